import dataclasses

import numpy as np
import pytest
import torch

from sned import data as data_mod
from sned import diffusion as diff_mod
from sned import model as m
from sned import numerics as nm
from sned import searchspace as ss
from sned import trainer as trainer_mod

from conftest import rand_spec


class TestActiveWidth:
    @pytest.mark.parametrize("full,ratio,quantum,expected", [
        (64, 1.0, 4, 64),
        (64, 0.4, 4, 24),   # 25.6/4 = 6.4 -> 6 -> 24
        (8, 0.4, 4, 4),     # clamped to the quantum
        (64, 0.9, 4, 56),   # 57.6/4 = 14.4 -> 14 -> 56
        (12, 0.5, 4, 8),    # 1.5 rounds half up to 2
    ])
    def test_cases(self, full, ratio, quantum, expected):
        assert m.active_width(full, ratio, quantum) == expected

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            m.active_width(64, 1.5, 4)
        with pytest.raises(ValueError):
            m.active_width(64, 0.0, 4)


class TestSliceWeights:
    def test_full_ratio_is_whole_array(self):
        w = torch.rand(8, 8, 3, 3)
        assert m.slice_weights(w, 1.0, 1.0, 4).shape == (8, 8, 3, 3)

    def test_half_out(self):
        w = torch.rand(8, 8, 3, 3)
        s = m.slice_weights(w, r_in=1.0, r_out=0.5, quantum=4)
        assert s.shape == (4, 8, 3, 3)
        assert torch.equal(s, w[:4])

    def test_bias_slice(self):
        b = torch.rand(8)
        s = m.slice_weights(b, r_out=0.5, quantum=4)
        assert torch.equal(s, b[:4])

    def test_slice_aliases_storage(self):
        w = torch.zeros(8, 8, 3, 3)
        s = m.slice_weights(w, r_out=0.5, quantum=4)
        s[0, 0, 0, 0] = 9.0
        assert float(w[0, 0, 0, 0]) == 9.0

    def test_nesting_prefix(self):
        w = torch.rand(16, 16)
        small = m.slice_weights(w, 0.4, 0.4, 4)
        big = m.slice_weights(w, 0.8, 0.8, 4)
        assert torch.equal(big[:small.shape[0], :small.shape[1]], small)


class TestBuild:
    def test_default_has_five_blocks(self):
        net = m.build_supernet(m.ModelConfig(), seed=0)
        assert len(net.arch.blocks) == 5
        assert net.block_names == ["down0.b0", "down1.b0", "mid", "up1.b0", "up0.b0"]

    def test_same_seed_bit_identical(self, micro_config):
        a = m.build_supernet(micro_config, seed=42)
        b = m.build_supernet(micro_config, seed=42)
        assert set(a.params) == set(b.params)
        for name in a.params:
            assert torch.equal(a.params[name], b.params[name])

    def test_different_seed_differs(self, micro_config):
        a = m.build_supernet(micro_config, seed=1)
        b = m.build_supernet(micro_config, seed=2)
        assert not torch.equal(a.params["stem.w"], b.params["stem.w"])

    def test_ssr_stem_doubles_input_channels(self, micro_config):
        ssr = m.build_supernet(dataclasses.replace(micro_config, role="ssr"), seed=0)
        assert ssr.params["stem.w"].shape[1] == 2 * micro_config.in_channels

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="multiple of heads"):
            m.ModelConfig(width_quantum=3, heads=2).validate()
        with pytest.raises(ValueError, match="multiple of quantum"):
            m.ModelConfig(base_width=10, width_quantum=4).validate()
        with pytest.raises(ValueError, match="role"):
            m.ModelConfig(role="other").validate()

    def test_single_level_layout(self, micro_net):
        assert micro_net.block_names == ["down0.b0", "mid", "up0.b0"]
        assert "down0.ds.w" not in micro_net.params
        assert "up0.skip.w" in micro_net.params


class TestForward:
    def test_resolution_agnostic_same_weights(self, small_net):
        caps = data_mod.random_captions(1, 0)
        for res in (16, 32, 64):
            x = torch.rand(1, 2, 3, res, res)
            y = m.forward(small_net, m.full_spec(small_net, res), x, 3, caps)
            assert y.shape == x.shape

    def test_deterministic(self, small_net, open_search):
        spec = rand_spec(small_net, open_search, seed=4, resolution=16)
        x = torch.rand(2, 2, 3, 16, 16)
        caps = data_mod.random_captions(2, 1)
        a = m.forward(small_net, spec, x, 5, caps)
        b = m.forward(small_net, spec, x.clone(), 5, caps.clone())
        assert torch.equal(a, b)

    def test_dropped_equals_manually_zeroed(self, small_net):
        """Dropping a branch must equal zeroing its output projection, bitwise."""
        n_blocks = len(small_net.arch.blocks)
        drop_all = m.full_spec(small_net, 16)
        drop_all = dataclasses.replace(
            drop_all, drop_mask=((True, True, True, True),) * n_blocks)
        zeroed = small_net.clone()
        for name in list(zeroed.params):
            for key in ("tattn.out", "cattn.out", "sattn.out", "ff.fc2"):
                if f".{key}." in name:
                    zeroed.params[name] = torch.zeros_like(zeroed.params[name])
        # randomize everything else so the comparison is not trivially zero
        rng = np.random.default_rng(0)
        for name in list(zeroed.params):
            if "attn" not in name and ".ff." not in name and \
                    float(zeroed.params[name].abs().max()) == 0:
                zeroed.params[name] = torch.from_numpy(
                    rng.standard_normal(tuple(zeroed.params[name].shape),
                                        dtype=np.float32) * np.float32(0.2))
        dropped_net = zeroed.clone()
        x = torch.rand(2, 2, 3, 16, 16)
        caps = data_mod.random_captions(2, 2)
        kept = m.forward(zeroed, m.full_spec(zeroed, 16), x, 2, caps)
        dropped = m.forward(dropped_net, drop_all, x, 2, caps)
        assert torch.equal(kept, dropped)

    def test_all_dropped_equals_resblock_only_network(self, small_net, open_search):
        n_blocks = len(small_net.arch.blocks)
        spec = m.full_spec(small_net, 16)
        spec = dataclasses.replace(
            spec, drop_mask=((True, True, True, True),) * n_blocks)
        reduced = trainer_mod.extract_subnet(small_net, spec)
        assert all(not b.has_temporal and not b.has_cross and not b.has_spatial
                   and not b.has_ff for b in reduced.arch.blocks)
        x = torch.rand(2, 2, 3, 16, 16)
        caps = data_mod.random_captions(2, 3)
        a = m.forward(small_net, spec, x, 4, caps)
        b = m.forward(reduced, m.full_spec(reduced, 16), x, 4, caps)
        assert float((a - b).abs().max()) <= 1e-5

    def test_resolution_mismatch_rejected(self, small_net):
        with pytest.raises(ValueError, match="resolution mismatch"):
            m.forward(small_net, m.full_spec(small_net, 32),
                      torch.rand(1, 2, 3, 16, 16), 1, data_mod.random_captions(1, 0))

    def test_spec_layout_mismatch_rejected(self, small_net, micro_net):
        spec = m.full_spec(micro_net, 16)
        with pytest.raises(ValueError, match="spec/config mismatch"):
            m.forward(small_net, spec, torch.rand(1, 2, 3, 16, 16), 1,
                      data_mod.random_captions(1, 0))

    def test_ssr_requires_conditioning(self, micro_config):
        ssr = m.build_supernet(dataclasses.replace(micro_config, role="ssr"), seed=0)
        x = torch.rand(1, 2, 3, 16, 16)
        caps = data_mod.random_captions(1, 0)
        with pytest.raises(ValueError, match="conditioning"):
            m.forward(ssr, m.full_spec(ssr, 16), x, 1, caps)
        y = m.forward(ssr, m.full_spec(ssr, 16), x, 1, caps, cond=x.clone())
        assert y.shape == x.shape

    def test_captions_required_only_with_cross(self, small_net):
        n_blocks = len(small_net.arch.blocks)
        spec = m.full_spec(small_net, 16)
        x = torch.rand(1, 2, 3, 16, 16)
        with pytest.raises(ValueError, match="captions required"):
            m.forward(small_net, spec, x, 1, None)
        no_cross = dataclasses.replace(
            spec, drop_mask=((False, True, False, False),) * n_blocks)
        y = m.forward(small_net, no_cross, x, 1, None)
        assert y.shape == x.shape


class TestCounts:
    def test_single_conv_element_count(self):
        w = torch.rand(32, 32, 3, 3)
        b = torch.rand(32)
        sw = m.slice_weights(w, r_in=0.7, r_out=0.7, quantum=4)
        sb = m.slice_weights(b, r_out=0.7, quantum=4)
        assert sw.numel() + sb.numel() == 3 * 3 * 24 * 24 + 24 == 5208

    def test_full_spec_counts_everything(self, small_net):
        total = sum(p.numel() for p in small_net.params.values())
        assert m.param_count(small_net, m.full_spec(small_net, 16)) == total

    def test_param_monotonicity(self, small_net, open_search):
        rng = np.random.default_rng(0)
        for seed in range(40):
            big = rand_spec(small_net, open_search, seed)
            ratios = tuple(
                tuple(max(0.4, round(r - 0.1 * rng.integers(0, 2), 1)) for r in row)
                for row in big.component_ratios)
            stages = tuple(max(0.4, round(r - 0.1 * rng.integers(0, 2), 1))
                           for r in big.stage_ratios)
            small = dataclasses.replace(big, stage_ratios=stages,
                                        component_ratios=ratios)
            assert m.param_count(small_net, small) <= m.param_count(small_net, big)
            assert m.flop_count(small_net, small) <= m.flop_count(small_net, big)

    def test_conv_flop_formula(self):
        assert m._conv_flops(4, 4, 8, 1) == 2 * 9 * 4 * 4 * 64 == 18432

    def test_drop_strictly_decreases_flops(self, small_net):
        full = m.full_spec(small_net, 16)
        n_blocks = len(small_net.arch.blocks)
        masks = [(False, False, False, False)] * n_blocks
        masks[0] = (True, False, False, False)
        dropped = dataclasses.replace(full, drop_mask=tuple(masks))
        assert m.flop_count(small_net, dropped) < m.flop_count(small_net, full)
        assert m.param_count(small_net, dropped) < m.param_count(small_net, full)

    def test_doubling_resolution_scales_conv_terms_4x(self, small_net):
        hi = m.flop_count(small_net, m.full_spec(small_net, 32))
        lo = m.flop_count(small_net, m.full_spec(small_net, 16))
        # conv terms scale exactly 4x, spatial attention 16x; only the tiny
        # per-video time-MLP terms stay constant
        assert hi >= 3.99 * lo
        assert hi <= 16 * lo

    def test_extraction_count_equals_param_count(self, small_net, open_search):
        for seed in range(10):
            spec = rand_spec(small_net, open_search, seed)
            sub = trainer_mod.extract_subnet(small_net, spec)
            assert sum(p.numel() for p in sub.params.values()) == \
                m.param_count(small_net, spec)


class TestNesting:
    def test_leading_slice_containment(self, small_net):
        plan_small = m.active_slices(small_net, dataclasses.replace(
            m.full_spec(small_net, 16),
            stage_ratios=(0.4,) * small_net.arch.levels))
        plan_big = m.active_slices(small_net, dataclasses.replace(
            m.full_spec(small_net, 16),
            stage_ratios=(0.8,) * small_net.arch.levels))
        for name, idx_small in plan_small.items():
            idx_big = plan_big[name]
            for s_small, s_big in zip(idx_small, idx_big):
                stop_small = s_small.stop if s_small.stop is not None else 10 ** 9
                stop_big = s_big.stop if s_big.stop is not None else 10 ** 9
                assert stop_small <= stop_big


class TestCheckpoint:
    def test_round_trip_bit_identical(self, small_net, tmp_path):
        path = tmp_path / "net.snw"
        m.save_supernet(small_net, path)
        loaded = m.load_supernet(path)
        assert loaded.config == small_net.config
        assert [b.name for b in loaded.arch.blocks] == small_net.block_names
        for name in small_net.params:
            assert torch.equal(loaded.params[name], small_net.params[name])

    def test_bad_magic(self, small_net, tmp_path):
        path = tmp_path / "net.snw"
        m.save_supernet(small_net, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(m.SnwFormatError, match="bad magic"):
            m.load_snw(path)

    def test_truncated_payload(self, small_net, tmp_path):
        path = tmp_path / "net.snw"
        m.save_supernet(small_net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(m.SnwFormatError, match="truncated payload"):
            m.load_snw(path)

    def test_trailing_bytes(self, small_net, tmp_path):
        path = tmp_path / "net.snw"
        m.save_supernet(small_net, path)
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00\x00\x00")
        with pytest.raises(m.SnwFormatError, match="size disagreement"):
            m.load_snw(path)


class TestInflate:
    def _trained_image_net(self, config, seed=0):
        """Image model with its zero-initialized layers randomized (as if trained)."""
        net = m.build_image_model(config, seed=seed)
        rng = np.random.default_rng(seed + 100)
        for name, p in net.params.items():
            if float(p.abs().max()) == 0.0:
                net.params[name] = torch.from_numpy(
                    rng.standard_normal(tuple(p.shape), dtype=np.float32)
                    * np.float32(0.2))
        return net

    def test_identity_per_frame(self, micro_config):
        image = self._trained_image_net(micro_config)
        video = m.inflate_image_checkpoint(image, micro_config, seed=1)
        caps = data_mod.random_captions(2, 0)
        for probe in range(5):
            x = torch.rand(2, 2, 3, 16, 16)
            a = m.forward(video, m.full_spec(video, 16), x, 3, caps)
            b = m.forward(image, m.full_spec(image, 16), x, 3, caps)
            assert float((a - b).abs().max()) <= 1e-6

    def test_strictly_more_parameters(self, micro_config):
        image = self._trained_image_net(micro_config)
        video = m.inflate_image_checkpoint(image, micro_config, seed=1)
        assert m.param_count(video, m.full_spec(video, 16)) > \
            m.param_count(image, m.full_spec(image, 16))

    def test_gradient_reaches_temporal_projection(self, micro_config):
        image = self._trained_image_net(micro_config)
        video = m.inflate_image_checkpoint(image, micro_config, seed=1)
        name = "mid.tattn.out.w"
        assert float(video.params[name].abs().max()) == 0.0
        spec = m.full_spec(video, 16)
        batch = data_mod.VideoBatch(videos=torch.rand(2, 2, 3, 16, 16),
                                    captions=data_mod.random_captions(2, 1))
        tape = nm.Tape()
        loss = diff_mod.training_loss(video, spec, batch,
                                      diff_mod.linear_schedule(10),
                                      np.random.default_rng(0), tape=tape)
        grads = tape.gradients(loss)
        assert float(grads[name].abs().max()) > 0.0
        with torch.no_grad():
            video.params[name][m.active_slices(video, spec)[name]].add_(
                grads[name], alpha=-0.1)
        assert float(video.params[name].abs().max()) > 0.0

    def test_layout_mismatch(self, micro_config, small_config):
        image = m.build_image_model(small_config, seed=0)
        with pytest.raises(ValueError, match="layout mismatch"):
            m.inflate_image_checkpoint(image, micro_config)


class TestPresets:
    def test_fractions_are_ordered_and_near_targets(self, small_net):
        search = ss.SearchSpaceConfig(resolutions=(16, 32), resolution_caps={})
        total = m.param_count(small_net, m.full_spec(small_net, 16))
        fractions = {}
        for preset, target in m.PRESET_FRACTIONS.items():
            spec = m.preset_spec(small_net, search, preset, 16)
            fractions[preset] = m.param_count(small_net, spec) / total
        assert fractions["S"] < fractions["M"] < fractions["L"] <= fractions["B"]
        assert fractions["B"] == pytest.approx(1.0)
        for preset, target in m.PRESET_FRACTIONS.items():
            # nearest grid point: no other uniform stage ratio does better
            best = min(abs(m.param_count(
                small_net, dataclasses.replace(
                    m.full_spec(small_net, 16),
                    stage_ratios=(r,) * small_net.arch.levels)) / total - target)
                for r in ss.RATIO_SET)
            assert abs(fractions[preset] - target) == pytest.approx(best, abs=1e-12)

    def test_caps_respected(self, small_net):
        search = ss.SearchSpaceConfig(resolutions=(64,), resolution_caps={64: 0.7})
        spec = m.preset_spec(small_net, search, "B", 64)
        assert all(r <= 0.7 for r in spec.stage_ratios)

    def test_unknown_preset(self, small_net):
        with pytest.raises(ValueError, match="unknown preset"):
            m.preset_spec(small_net, ss.SearchSpaceConfig(), "X", 16)
