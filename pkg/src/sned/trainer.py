"""Superposition supernet training: per-iteration subnet and resolution
sampling, gradients and Adam updates restricted to the sampled slices, full
EMA shadowing, and post-training subnet extraction.

Freezing is structural: gradients exist only for the watched slice leaves, so
an element outside the sampled subnet can never move, and neither can its
optimizer moments.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import diffusion as diff_mod
from . import model as model_mod
from . import searchspace as ss
from .model import Supernet, active_width
from .numerics import Tape, Tensor
from .searchspace import SubnetSpec


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 2000
    learning_rate: float = 1e-4
    batch_size: int = 8
    warmup: ss.WarmupSchedule = field(default_factory=ss.WarmupSchedule)
    ema_decay: float = 0.999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")


@dataclass
class OptimizerState:
    """Adam moments congruent to every weight, plus per-element step counts.

    Entries of never-updated elements stay exactly zero; bias correction uses
    each element's own count.
    """

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    steps: dict[str, Tensor]

    @classmethod
    def zeros_like(cls, net: Supernet) -> "OptimizerState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in net.params.items()},
            v={k: torch.zeros_like(p) for k, p in net.params.items()},
            steps={k: torch.zeros_like(p) for k, p in net.params.items()},
        )


@dataclass
class EmaState:
    shadow: dict[str, Tensor]
    decay: float

    @classmethod
    def from_net(cls, net: Supernet, decay: float) -> "EmaState":
        return cls(shadow={k: p.clone() for k, p in net.params.items()}, decay=decay)

    def as_net(self, net: Supernet) -> Supernet:
        return Supernet(config=net.config, arch=net.arch, params=self.shadow)


def ema_update(ema: EmaState, net: Supernet, decay: float) -> EmaState:
    """shadow <- decay*shadow + (1-decay)*weights over every element."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    with torch.no_grad():
        for name, w in net.params.items():
            ema.shadow[name].mul_(decay).add_(w, alpha=1.0 - decay)
    return ema


def extract_subnet(net: Supernet, spec: SubnetSpec) -> Supernet:
    """Standalone network holding copies of exactly the active slices.

    Dropped components are omitted from the architecture entirely; the result
    forwards with its own full spec and matches the sliced supernet.
    """
    plan = model_mod.active_slices(net, spec)
    q = net.config.width_quantum
    widths = [active_width(w, r, q)
              for w, r in zip(net.arch.stage_widths, spec.stage_ratios)]
    blocks = []
    for i, b in enumerate(net.arch.blocks):
        keep = {c: model_mod._component_active(b, spec, i, c)
                for c in ("temporal", "cross", "spatial", "feed_forward")}

        def dim(component: str) -> int:
            if not keep[component]:
                return b.attn_dim(component)
            return active_width(b.attn_dim(component),
                                spec.component_ratio(i, component), q)

        blocks.append(model_mod.BlockArch(
            name=b.name, level=b.level,
            res_hidden=active_width(b.res_hidden, spec.component_ratio(i, "resblock"), q),
            temporal_dim=dim("temporal"), cross_dim=dim("cross"),
            spatial_dim=dim("spatial"),
            ff_hidden=active_width(b.ff_hidden, spec.component_ratio(i, "feed_forward"), q)
            if keep["feed_forward"] else b.ff_hidden,
            has_temporal=keep["temporal"], has_cross=keep["cross"],
            has_spatial=keep["spatial"], has_ff=keep["feed_forward"],
        ))
    arch = model_mod.Arch(stage_widths=widths,
                          blocks_per_level=net.arch.blocks_per_level, blocks=blocks)
    params = {name: net.params[name][idx].clone() for name, idx in plan.items()}
    return Supernet(config=net.config, arch=arch, params=params)


@dataclass
class StepReport:
    iteration: int
    resolution: int
    param_fraction: float
    loss: float
    wall_ms: float
    spec: SubnetSpec


class Trainer:
    """Owns the mutable training state: weights, moments, EMA, batch streams."""

    def __init__(self, net: Supernet, dataset: data_mod.VideoDataset,
                 train_cfg: TrainConfig, search_cfg: ss.SearchSpaceConfig,
                 schedule: diff_mod.NoiseSchedule,
                 checkpoint_dir: str | Path | None = None,
                 metrics_path: str | Path | None = None):
        train_cfg.validate()
        search_cfg.validate()
        self.net = net
        self.dataset = dataset
        self.train_cfg = train_cfg
        self.search_cfg = search_cfg
        self.schedule = schedule
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.opt = OptimizerState.zeros_like(net)
        self.ema = EmaState.from_net(net, train_cfg.ema_decay)
        self.shape = ss.space_shape(net.arch, search_cfg)
        self.metrics: list[dict] = []
        self._streams: dict[int, object] = {}
        self._full_counts = {
            res: model_mod.param_count(net, model_mod.full_spec(net, res))
            for res in search_cfg.resolutions}
        self._probe_spec = model_mod.full_spec(net, min(search_cfg.resolutions))
        self._probe_batch = next(data_mod.batches(
            dataset, self._probe_spec.resolution, train_cfg.batch_size,
            seed=train_cfg.seed + 771,
            pair_low=net.config.role == model_mod.ROLE_SSR))

    def _batch(self, resolution: int) -> data_mod.VideoBatch:
        if resolution not in self._streams:
            self._streams[resolution] = data_mod.batches(
                self.dataset, resolution, self.train_cfg.batch_size,
                seed=self.train_cfg.seed * 1009 + resolution,
                pair_low=self.net.config.role == model_mod.ROLE_SSR)
        return next(self._streams[resolution])

    def step(self, iteration: int) -> StepReport:
        t0 = time.perf_counter()
        cfg = self.train_cfg
        rng = np.random.default_rng([cfg.seed, iteration])
        spec = ss.sample_subnet(rng, self.search_cfg, cfg.warmup, iteration, self.shape)
        batch = self._batch(spec.resolution)

        tape = Tape()
        loss = diff_mod.training_loss(self.net, spec, batch, self.schedule, rng,
                                      tape=tape)
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                f"non-finite loss {loss_val} at iteration {iteration} for subnet:\n"
                f"{spec.to_json()}")
        grads = tape.gradients(loss)
        self._adam(spec, grads)
        ema_update(self.ema, self.net, cfg.ema_decay)

        wall_ms = (time.perf_counter() - t0) * 1000.0
        fraction = model_mod.param_count(self.net, spec) / self._full_counts[spec.resolution]
        return StepReport(iteration=iteration, resolution=spec.resolution,
                          param_fraction=fraction, loss=loss_val,
                          wall_ms=wall_ms, spec=spec)

    def _adam(self, spec: SubnetSpec, grads: dict[str, Tensor]) -> None:
        cfg = self.train_cfg
        plan = model_mod.active_slices(self.net, spec)
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        with torch.no_grad():
            for name, g in grads.items():
                idx = plan[name]
                m = self.opt.m[name][idx]
                v = self.opt.v[name][idx]
                steps = self.opt.steps[name][idx]
                steps.add_(1.0)
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                m_hat = m / (1.0 - torch.pow(b1, steps))
                v_hat = v / (1.0 - torch.pow(b2, steps))
                self.net.params[name][idx].add_(
                    m_hat / (v_hat.sqrt() + cfg.adam_eps), alpha=-cfg.learning_rate)

    def _probe_ema_loss(self) -> float:
        rng = np.random.default_rng([self.train_cfg.seed, 424242])
        loss = diff_mod.training_loss(self.ema.as_net(self.net), self._probe_spec,
                                      self._probe_batch, self.schedule, rng)
        return float(loss)

    def run(self) -> list[dict]:
        cfg = self.train_cfg
        for iteration in range(cfg.total_iterations):
            report = self.step(iteration)
            if cfg.log_every and (iteration + 1) % cfg.log_every == 0:
                record = {
                    "iter": iteration,
                    "res": report.resolution,
                    "param_fraction": round(report.param_fraction, 6),
                    "loss": report.loss,
                    "probe_ema_loss": self._probe_ema_loss(),
                    "wall_ms": round(report.wall_ms, 3),
                }
                self.metrics.append(record)
                if self.metrics_path:
                    with open(self.metrics_path, "a") as fh:
                        fh.write(json.dumps(record) + "\n")
            if cfg.checkpoint_every and self.checkpoint_dir and \
                    (iteration + 1) % cfg.checkpoint_every == 0:
                self.save_checkpoint(f"iter{iteration + 1:07d}")
        if self.checkpoint_dir:
            self.save_checkpoint("final")
        return self.metrics

    def save_checkpoint(self, tag: str) -> None:
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        net = self.net
        model_mod.save_supernet(net, self.checkpoint_dir / f"{tag}.snw")
        opt_params: dict[str, Tensor] = {}
        for name in net.params:
            opt_params[f"{name}.m"] = self.opt.m[name]
            opt_params[f"{name}.v"] = self.opt.v[name]
            opt_params[f"{name}.steps"] = self.opt.steps[name]
        model_mod.save_snw(self.checkpoint_dir / f"{tag}.opt.snw", opt_params,
                           kind="optimizer", config=net.config, arch=net.arch)
        model_mod.save_snw(self.checkpoint_dir / f"{tag}.ema.snw", self.ema.shadow,
                           kind="ema", config=net.config, arch=net.arch)


def load_optimizer(path, net: Supernet) -> OptimizerState:
    params, header = model_mod.load_snw(path)
    if header.get("kind") != "optimizer":
        raise model_mod.SnwFormatError("not an optimizer container")
    opt = OptimizerState(m={}, v={}, steps={})
    for name, p in net.params.items():
        for part, store in (("m", opt.m), ("v", opt.v), ("steps", opt.steps)):
            t = params[f"{name}.{part}"]
            if t.shape != p.shape:
                raise ValueError(f"optimizer state {name}.{part} shape mismatch")
            store[name] = t
    return opt


def load_ema(path, net: Supernet) -> EmaState:
    params, header = model_mod.load_snw(path)
    if header.get("kind") != "ema":
        raise model_mod.SnwFormatError("not an EMA container")
    for name, p in net.params.items():
        if params[name].shape != p.shape:
            raise ValueError(f"EMA shadow {name} shape mismatch")
    return EmaState(shadow=params, decay=0.0)


def train(net: Supernet, dataset: data_mod.VideoDataset, train_cfg: TrainConfig,
          search_cfg: ss.SearchSpaceConfig, schedule: diff_mod.NoiseSchedule,
          checkpoint_dir=None, metrics_path=None) -> tuple[Supernet, EmaState, list[dict]]:
    """Runs the full loop; returns the trained net, EMA state, and metrics log."""
    trainer = Trainer(net, dataset, train_cfg, search_cfg, schedule,
                      checkpoint_dir=checkpoint_dir, metrics_path=metrics_path)
    metrics = trainer.run()
    return trainer.net, trainer.ema, metrics
