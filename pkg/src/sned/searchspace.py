"""The subnet search space: spec encoding, warmup-restricted sampling, counting.

A subnet is one point in the space: per-stage channel ratios, per-block
component ratios, per-block drop decisions for the three attentions (the
feed-forward is tied: it drops exactly when all three attentions drop), and a
target resolution. Sampling is uniform over whatever the warmup schedule has
opened so far.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

RATIO_SET: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

COMPONENTS: tuple[str, ...] = ("resblock", "temporal", "cross", "spatial", "feed_forward")
ATTENTIONS: tuple[str, ...] = ("temporal", "cross", "spatial")
DROP_SLOTS: tuple[str, ...] = ("temporal", "cross", "spatial", "feed_forward")

_EPS = 1e-9


@dataclass(frozen=True)
class SubnetSpec:
    """One candidate architecture, realized as slices of the supernet.

    component_ratios holds one 5-tuple per block in execution order, in
    COMPONENTS order. drop_mask holds one 4-tuple per block in DROP_SLOTS
    order; True means the component is dropped.
    """

    resolution: int
    stage_ratios: tuple[float, ...]
    component_ratios: tuple[tuple[float, float, float, float, float], ...]
    drop_mask: tuple[tuple[bool, bool, bool, bool], ...]

    def component_ratio(self, block: int, component: str) -> float:
        return self.component_ratios[block][COMPONENTS.index(component)]

    def dropped(self, block: int, component: str) -> bool:
        return self.drop_mask[block][DROP_SLOTS.index(component)]

    def to_json(self) -> str:
        doc = {
            "resolution": self.resolution,
            "stage_ratios": list(self.stage_ratios),
            "component_ratios": [
                {name: r for name, r in zip(COMPONENTS, ratios)}
                for ratios in self.component_ratios
            ],
            "drop_mask": [
                {name: bool(d) for name, d in zip(DROP_SLOTS, mask)}
                for mask in self.drop_mask
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SubnetSpec":
        doc = json.loads(text)
        try:
            return cls(
                resolution=int(doc["resolution"]),
                stage_ratios=tuple(float(r) for r in doc["stage_ratios"]),
                component_ratios=tuple(
                    tuple(float(entry[name]) for name in COMPONENTS)
                    for entry in doc["component_ratios"]
                ),
                drop_mask=tuple(
                    tuple(bool(entry[name]) for name in DROP_SLOTS)
                    for entry in doc["drop_mask"]
                ),
            )
        except KeyError as exc:
            raise ValueError(f"subnet spec document missing key {exc}") from exc


@dataclass(frozen=True)
class BlockShape:
    """Which ratio slots are elastic and which attentions are droppable in one block."""

    elastic: tuple[str, ...]
    droppable: tuple[str, ...]


@dataclass(frozen=True)
class SpaceShape:
    """Structural footprint of the space: stage count plus per-block slots."""

    n_stages: int
    blocks: tuple[BlockShape, ...]


@dataclass(frozen=True)
class SearchSpaceConfig:
    ratio_set: tuple[float, ...] = RATIO_SET
    resolutions: tuple[int, ...] = (16, 32, 64)
    resolution_caps: dict[int, float] = field(
        default_factory=lambda: {16: 1.0, 32: 1.0, 64: 0.7})
    droppable: tuple[str, ...] = ATTENTIONS
    elastic_components: tuple[str, ...] = COMPONENTS

    def cap(self, resolution: int) -> float:
        return self.resolution_caps.get(resolution, 1.0)

    def validate(self) -> None:
        for r in sorted(self.ratio_set):
            if not 0.0 < r <= 1.0:
                raise ValueError(f"ratio {r} outside (0, 1]")
        base = min(self.resolutions)
        for res in self.resolutions:
            if res % base != 0 or (res // base) & (res // base - 1):
                raise ValueError(f"resolution {res} is not base {base} times a power of two")
        for res, cap in self.resolution_caps.items():
            if not _in_ratio_set(cap, self.ratio_set):
                raise ValueError(f"resolution cap {cap} for {res}px not in ratio set")
        for name in self.droppable:
            if name not in ATTENTIONS:
                raise ValueError(f"droppable component {name!r} is not an attention")
        for name in self.elastic_components:
            if name not in COMPONENTS:
                raise ValueError(f"unknown elastic component {name!r}")


@dataclass(frozen=True)
class WarmupSchedule:
    """Iteration-indexed floor on sampled ratios and retained block fraction."""

    total_warmup_iterations: int = 30000
    step_length: int = 5000
    start_fraction: float = 1.0
    end_fraction: float = 0.4

    def __post_init__(self) -> None:
        if self.total_warmup_iterations % self.step_length != 0:
            raise ValueError("step_length must divide total_warmup_iterations")
        if not 0.0 < self.end_fraction <= self.start_fraction <= 1.0:
            raise ValueError("need 0 < end_fraction <= start_fraction <= 1")


def min_fraction(schedule: WarmupSchedule, iteration: int) -> float:
    """Step schedule from start_fraction down to end_fraction, one step per step_length."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    n_steps = schedule.total_warmup_iterations // schedule.step_length
    delta = (schedule.start_fraction - schedule.end_fraction) / n_steps
    return max(schedule.end_fraction,
               schedule.start_fraction - delta * (iteration // schedule.step_length))


def _in_ratio_set(r: float, ratio_set: tuple[float, ...]) -> bool:
    return any(abs(r - s) < _EPS for s in ratio_set)


def _admissible(ratio_set: tuple[float, ...], floor: float) -> list[float]:
    return [r for r in sorted(ratio_set) if r >= floor - _EPS]


def apply_ff_rule(mask: tuple[bool, bool, bool, bool]) -> tuple[bool, bool, bool, bool]:
    """Feed-forward drops exactly when all three attentions drop."""
    t, c, s = mask[0], mask[1], mask[2]
    return (t, c, s, t and c and s)


def sample_subnet(rng: np.random.Generator, config: SearchSpaceConfig,
                  schedule: WarmupSchedule, iteration: int,
                  shape: SpaceShape) -> SubnetSpec:
    """Uniform draw from the warmup-restricted space.

    Draw order is fixed (resolution, stage ratios, component ratios, block
    keep-fraction, drop subset) so a seeded generator reproduces the spec.
    """
    floor = min_fraction(schedule, iteration)
    ratios = _admissible(config.ratio_set, floor)

    resolution = int(rng.choice(np.asarray(config.resolutions)))
    cap = config.cap(resolution)

    stage_ratios = tuple(
        min(float(rng.choice(ratios)), cap) for _ in range(shape.n_stages))

    component_ratios = []
    for block in shape.blocks:
        component_ratios.append(tuple(
            float(rng.choice(ratios)) if name in block.elastic else 1.0
            for name in COMPONENTS))

    droppable_slots = [(i, name)
                       for i, block in enumerate(shape.blocks)
                       for name in block.droppable]
    keep_fraction = float(rng.uniform(floor, 1.0))
    n_drop = math.floor((1.0 - keep_fraction) * len(droppable_slots))
    dropped: set[tuple[int, str]] = set()
    if n_drop > 0:
        picks = rng.choice(len(droppable_slots), size=n_drop, replace=False)
        dropped = {droppable_slots[int(i)] for i in picks}

    drop_mask = tuple(
        apply_ff_rule(tuple((i, name) in dropped for name in ATTENTIONS) + (False,))
        for i in range(len(shape.blocks)))

    return SubnetSpec(resolution=resolution, stage_ratios=stage_ratios,
                      component_ratios=tuple(component_ratios), drop_mask=drop_mask)


def validate(spec: SubnetSpec, config: SearchSpaceConfig,
             shape: SpaceShape) -> list[str]:
    """Collects violations; an empty list means the spec is admissible."""
    bad: list[str] = []
    if spec.resolution not in config.resolutions:
        bad.append(f"resolution {spec.resolution} not in configured set")
    if len(spec.stage_ratios) != shape.n_stages:
        bad.append(f"layout mismatch: {len(spec.stage_ratios)} stage ratios, "
                   f"model has {shape.n_stages} stages")
    if len(spec.component_ratios) != len(shape.blocks) or \
            len(spec.drop_mask) != len(shape.blocks):
        bad.append(f"layout mismatch: spec covers {len(spec.component_ratios)} blocks, "
                   f"model has {len(shape.blocks)}")
        return bad

    cap = config.cap(spec.resolution)
    for i, r in enumerate(spec.stage_ratios):
        if not _in_ratio_set(r, config.ratio_set):
            bad.append(f"stage {i}: ratio {r} not in ratio set")
        elif r > cap + _EPS:
            bad.append(f"stage {i}: ratio {r} exceeds resolution cap {cap} "
                       f"at {spec.resolution}px")
    for b, (ratios, block) in enumerate(zip(spec.component_ratios, shape.blocks)):
        for name, r in zip(COMPONENTS, ratios):
            if name in block.elastic:
                if not _in_ratio_set(r, config.ratio_set):
                    bad.append(f"block {b} {name}: ratio {r} not in ratio set")
            elif abs(r - 1.0) > _EPS:
                bad.append(f"block {b} {name}: ratio fixed at 1.0 for this space")
    for b, (mask, block) in enumerate(zip(spec.drop_mask, shape.blocks)):
        for name, d in zip(DROP_SLOTS, mask):
            if d and name != "feed_forward" and name not in block.droppable:
                bad.append(f"block {b}: {name} is not droppable in this space")
        if mask != apply_ff_rule(mask):
            bad.append(f"block {b}: feed-forward rule violated")
    return bad


def enumerate_count(config: SearchSpaceConfig, shape: SpaceShape) -> int:
    """Exact size of the space (arbitrary precision)."""
    n_ratios = len(config.ratio_set)
    total = 0
    for res in config.resolutions:
        cap = config.cap(res)
        stage_choices = len(_admissible_capped(config.ratio_set, cap))
        count = stage_choices ** shape.n_stages
        for block in shape.blocks:
            count *= n_ratios ** len(block.elastic)
            count *= 2 ** len(block.droppable)
        total += count
    return total


def _admissible_capped(ratio_set: tuple[float, ...], cap: float) -> list[float]:
    return [r for r in sorted(ratio_set) if r <= cap + _EPS]


def cost_histogram(config: SearchSpaceConfig, model_config, n_samples: int,
                   seed: int, schedule: WarmupSchedule | None = None,
                   iteration: int | None = None) -> dict:
    """Parameter/FLOP statistics over sampled subnets.

    With no schedule/iteration the fully opened space is sampled. Every
    sampled spec is validated before costing.
    """
    from . import model as model_mod

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if schedule is None:
        schedule = WarmupSchedule()
    if iteration is None:
        iteration = schedule.total_warmup_iterations

    net = model_mod.build_supernet(model_config, seed=0)
    shape = space_shape(net.arch, config)
    rng = np.random.default_rng(seed)
    params, flops = [], []
    for _ in range(n_samples):
        spec = sample_subnet(rng, config, schedule, iteration, shape)
        bad = validate(spec, config, shape)
        if bad:
            raise RuntimeError(f"sampled spec failed validation: {bad}")
        params.append(model_mod.param_count(net, spec))
        flops.append(model_mod.flop_count(net, spec))

    def summary(values: list[int]) -> dict:
        arr = np.asarray(values, dtype=np.float64)
        return {
            "min": int(arr.min()),
            "max": int(arr.max()),
            "mean": float(arr.mean()),
            "deciles": [float(np.percentile(arr, p)) for p in range(10, 100, 10)],
        }

    return {"n_samples": n_samples, "seed": seed,
            "params": summary(params), "flops": summary(flops)}


def space_shape(arch, config: SearchSpaceConfig) -> SpaceShape:
    """Derive the slot structure from a model architecture description."""
    blocks = []
    for block in arch.blocks:
        present = {
            "resblock": True,
            "temporal": block.has_temporal,
            "cross": block.has_cross,
            "spatial": block.has_spatial,
            "feed_forward": block.has_ff,
        }
        blocks.append(BlockShape(
            elastic=tuple(n for n in config.elastic_components if present[n]),
            droppable=tuple(n for n in config.droppable if present[n]),
        ))
    return SpaceShape(n_stages=len(arch.stage_widths), blocks=tuple(blocks))
