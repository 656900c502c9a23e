import numpy as np
import pytest
import torch

from sned import data as data_mod
from sned import model as model_mod
from sned import searchspace as ss

torch.set_num_threads(2)


@pytest.fixture
def micro_config():
    """Single-level model small enough for exhaustive probing."""
    return model_mod.ModelConfig(base_width=8, level_multipliers=(1,), frames=2,
                                 time_embed_dim=16, cond_embed_dim=8)


@pytest.fixture
def micro_net(micro_config):
    return model_mod.build_supernet(micro_config, seed=0)


@pytest.fixture
def small_config():
    """Two-level model used where stage interactions matter."""
    return model_mod.ModelConfig(base_width=8, level_multipliers=(1, 2), frames=2,
                                 time_embed_dim=16, cond_embed_dim=8)


@pytest.fixture
def small_net(small_config):
    return model_mod.build_supernet(small_config, seed=0)


@pytest.fixture
def open_search():
    """16/32px space with no caps, fully opened (no warmup restriction)."""
    return ss.SearchSpaceConfig(resolutions=(16, 32), resolution_caps={})


@pytest.fixture
def tiny_dataset():
    ds = data_mod.gen_synthetic(16, 2, 32, seed=0)
    return data_mod.build_tiers(ds, [8, 16, 32])


def rand_spec(net, config, seed, resolution=None):
    """One spec from the fully opened space."""
    rng = np.random.default_rng(seed)
    shape = ss.space_shape(net.arch, config)
    spec = ss.sample_subnet(rng, config, ss.WarmupSchedule(), 10 ** 6, shape)
    if resolution is not None:
        import dataclasses
        spec = dataclasses.replace(spec, resolution=resolution)
    return spec


def brute_force_enumerate(config, shape):
    """Explicit product over every slot; the oracle for enumerate_count."""
    import itertools

    for res in config.resolutions:
        cap = config.cap(res)
        stage_opts = [r for r in sorted(config.ratio_set) if r <= cap + 1e-9]
        block_ratio_opts = []
        for block in shape.blocks:
            per_comp = [sorted(config.ratio_set) if name in block.elastic else [1.0]
                        for name in ss.COMPONENTS]
            block_ratio_opts.append(list(itertools.product(*per_comp)))
        mask_opts = []
        for block in shape.blocks:
            flags = [[False, True] if name in block.droppable else [False]
                     for name in ss.ATTENTIONS]
            mask_opts.append([ss.apply_ff_rule(tuple(flag) + (False,))
                              for flag in itertools.product(*flags)])
        for stages in itertools.product(stage_opts, repeat=shape.n_stages):
            for ratios in itertools.product(*block_ratio_opts):
                for masks in itertools.product(*mask_opts):
                    yield ss.SubnetSpec(resolution=res, stage_ratios=stages,
                                        component_ratios=ratios, drop_mask=masks)
