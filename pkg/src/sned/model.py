"""The elastic video U-Net supernet.

Every weight array lives at its full width; a subnet is realized by taking
the leading ``active_width`` channels along each elastic axis (views aliasing
supernet storage, so slices nest and updates through a slice are updates to
the supernet). Each diffusion block holds a ResBlock plus three attentions
and a feed-forward, all residual, so dropping a component is exactly the
identity on its input.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numerics as nm
from .numerics import Tensor
from .searchspace import COMPONENTS, SubnetSpec, SearchSpaceConfig

KERNEL = 3
FF_MULT = 2
SNW_MAGIC = b"SNW1"

ROLE_BASE = "base"
ROLE_SSR = "ssr"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    base_width: int = 32
    level_multipliers: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 1
    heads: int = 2
    width_quantum: int = 4
    time_embed_dim: int = 128
    cond_embed_dim: int = 64
    frames: int = 4
    role: str = ROLE_BASE
    vocab_size: int = 12

    def validate(self) -> None:
        if self.role not in (ROLE_BASE, ROLE_SSR):
            raise ValueError(f"role must be 'base' or 'ssr', got {self.role!r}")
        if self.width_quantum % self.heads != 0:
            raise ValueError(
                f"width_quantum {self.width_quantum} must be a multiple of heads {self.heads}")
        if not self.level_multipliers:
            raise ValueError("level_multipliers must be non-empty")
        for mult in self.level_multipliers:
            width = self.base_width * mult
            if width % self.width_quantum != 0:
                raise ValueError(
                    f"stage width {width} is not a multiple of quantum {self.width_quantum}")
        if self.time_embed_dim % 2 != 0 or self.time_embed_dim < 4:
            raise ValueError("time_embed_dim must be even and >= 4")
        for name in ("in_channels", "blocks_per_level", "heads", "time_embed_dim",
                     "cond_embed_dim", "frames", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def stage_widths(self) -> list[int]:
        return [self.base_width * m for m in self.level_multipliers]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["level_multipliers"] = tuple(doc["level_multipliers"])
        return cls(**doc)


@dataclass
class BlockArch:
    """Structural record of one diffusion block (full widths, component presence)."""

    name: str
    level: int
    res_hidden: int
    temporal_dim: int
    cross_dim: int
    spatial_dim: int
    ff_hidden: int
    has_temporal: bool = True
    has_cross: bool = True
    has_spatial: bool = True
    has_ff: bool = True

    def attn_dim(self, component: str) -> int:
        return {"temporal": self.temporal_dim, "cross": self.cross_dim,
                "spatial": self.spatial_dim}[component]


@dataclass
class Arch:
    """Layer layout of one network; authoritative over ModelConfig for widths."""

    stage_widths: list[int]
    blocks_per_level: int
    blocks: list[BlockArch]

    @property
    def levels(self) -> int:
        return len(self.stage_widths)

    def to_dict(self) -> dict:
        return {
            "stage_widths": list(self.stage_widths),
            "blocks_per_level": self.blocks_per_level,
            "blocks": [dataclasses.asdict(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Arch":
        return cls(
            stage_widths=[int(w) for w in doc["stage_widths"]],
            blocks_per_level=int(doc["blocks_per_level"]),
            blocks=[BlockArch(**b) for b in doc["blocks"]],
        )


@dataclass
class Supernet:
    config: ModelConfig
    arch: Arch
    params: dict[str, Tensor]

    @property
    def block_names(self) -> list[str]:
        return [b.name for b in self.arch.blocks]

    def astype(self, dtype: torch.dtype) -> "Supernet":
        return Supernet(self.config, self.arch,
                        {k: v.to(dtype) for k, v in self.params.items()})

    def clone(self) -> "Supernet":
        return Supernet(self.config, self.arch,
                        {k: v.clone() for k, v in self.params.items()})


def active_width(full: int, ratio: float, quantum: int) -> int:
    """Quantized channel count: clamp(quantum * round_half_up(ratio*full/quantum))."""
    if not 0.0 < ratio <= 1.0 + 1e-9:
        raise ValueError(f"ratio {ratio} outside (0, 1]")
    k = math.floor(ratio * full / quantum + 0.5)
    return max(quantum, min(full, quantum * k))


def slice_weights(weight: Tensor, r_in: float = 1.0, r_out: float = 1.0,
                  quantum: int = 4) -> Tensor:
    """Leading-channel slice of a weight array; the view aliases the storage.

    1-D arrays slice their only axis by r_out; 2-D and 4-D arrays slice axis 0
    by r_out and axis 1 by r_in.
    """
    if weight.ndim == 1:
        return weight[:active_width(weight.shape[0], r_out, quantum)]
    a_out = active_width(weight.shape[0], r_out, quantum)
    a_in = active_width(weight.shape[1], r_in, quantum)
    return weight[:a_out, :a_in]


# --------------------------------------------------------------------------
# construction

def _block_param_shapes(block: BlockArch, width: int, cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(suffix, shape, init kind) for one block at its full widths."""
    w, h, f = width, block.res_hidden, block.ff_hidden
    k, dt, dc = KERNEL, cfg.time_embed_dim, cfg.cond_embed_dim
    out: list[tuple[str, tuple, str]] = [
        ("res.gn1.g", (w,), "ones"), ("res.gn1.b", (w,), "zeros"),
        ("res.conv1.w", (h, w, k, k), "conv"), ("res.conv1.b", (h,), "zeros"),
        ("res.gn2.g", (h,), "ones"), ("res.gn2.b", (h,), "zeros"),
        ("res.conv2.w", (w, h, k, k), "zeros"), ("res.conv2.b", (w,), "zeros"),
        ("res.time.w", (w, dt), "linear"), ("res.time.b", (w,), "zeros"),
    ]
    for flag, key, a, kv_in in (
            (block.has_temporal, "tattn", block.temporal_dim, w),
            (block.has_cross, "cattn", block.cross_dim, dc),
            (block.has_spatial, "sattn", block.spatial_dim, w)):
        if not flag:
            continue
        out += [
            (f"{key}.norm.g", (w,), "ones"), (f"{key}.norm.b", (w,), "zeros"),
            (f"{key}.q.w", (a, w), "linear"), (f"{key}.q.b", (a,), "zeros"),
            (f"{key}.k.w", (a, kv_in), "linear"), (f"{key}.k.b", (a,), "zeros"),
            (f"{key}.v.w", (a, kv_in), "linear"), (f"{key}.v.b", (a,), "zeros"),
            (f"{key}.out.w", (w, a), "zeros"), (f"{key}.out.b", (w,), "zeros"),
        ]
    if block.has_ff:
        out += [
            ("ff.norm.g", (w,), "ones"), ("ff.norm.b", (w,), "zeros"),
            ("ff.fc1.w", (f, w), "linear"), ("ff.fc1.b", (f,), "zeros"),
            ("ff.fc2.w", (w, f), "zeros"), ("ff.fc2.b", (w,), "zeros"),
        ]
    return out


def _param_shapes(arch: Arch, cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    widths = arch.stage_widths
    levels = arch.levels
    k = KERNEL
    stem_in = cfg.in_channels * (2 if cfg.role == ROLE_SSR else 1)
    shapes: list[tuple[str, tuple, str]] = [
        ("stem.w", (widths[0], stem_in, k, k), "conv"),
        ("stem.b", (widths[0],), "zeros"),
        ("time.fc1.w", (cfg.time_embed_dim, cfg.time_embed_dim), "linear"),
        ("time.fc1.b", (cfg.time_embed_dim,), "zeros"),
        ("time.fc2.w", (cfg.time_embed_dim, cfg.time_embed_dim), "linear"),
        ("time.fc2.b", (cfg.time_embed_dim,), "zeros"),
        ("emb.table", (cfg.vocab_size, cfg.cond_embed_dim), "embed"),
    ]
    blocks = {b.name: b for b in arch.blocks}

    def add_block(name: str, level: int) -> None:
        for suffix, shape, kind in _block_param_shapes(blocks[name], widths[level], cfg):
            shapes.append((f"{name}.{suffix}", shape, kind))

    for lvl in range(levels):
        for i in range(arch.blocks_per_level):
            add_block(f"down{lvl}.b{i}", lvl)
        if lvl < levels - 1:
            shapes.append((f"down{lvl}.ds.w", (widths[lvl + 1], widths[lvl], k, k), "conv"))
            shapes.append((f"down{lvl}.ds.b", (widths[lvl + 1],), "zeros"))
    add_block("mid", levels - 1)
    for lvl in range(levels - 1, -1, -1):
        if lvl < levels - 1:
            shapes.append((f"up{lvl}.us.w", (widths[lvl], widths[lvl + 1], k, k), "conv"))
            shapes.append((f"up{lvl}.us.b", (widths[lvl],), "zeros"))
        shapes.append((f"up{lvl}.skip.w", (widths[lvl], widths[lvl], k, k), "conv"))
        shapes.append((f"up{lvl}.x.w", (widths[lvl], widths[lvl], k, k), "conv"))
        shapes.append((f"up{lvl}.merge.b", (widths[lvl],), "zeros"))
        for i in range(arch.blocks_per_level):
            add_block(f"up{lvl}.b{i}", lvl)
    shapes += [
        ("out.norm.g", (widths[0],), "ones"),
        ("out.norm.b", (widths[0],), "zeros"),
        ("out.w", (cfg.in_channels, widths[0], k, k), "zeros"),
        ("out.b", (cfg.in_channels,), "zeros"),
    ]
    return shapes


def _init_array(rng: np.random.Generator, shape: tuple, kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if kind == "conv":
        fan_in = shape[1] * shape[2] * shape[3]
    elif kind == "linear":
        fan_in = shape[1]
    elif kind == "embed":
        fan_in = shape[1]
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    std = 1.0 / math.sqrt(fan_in)
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(std)


def _make_arch(cfg: ModelConfig, include_temporal: bool) -> Arch:
    widths = cfg.stage_widths()
    levels = len(widths)

    def block(name: str, level: int) -> BlockArch:
        w = widths[level]
        return BlockArch(name=name, level=level, res_hidden=w, temporal_dim=w,
                         cross_dim=w, spatial_dim=w, ff_hidden=FF_MULT * w,
                         has_temporal=include_temporal)

    blocks = []
    for lvl in range(levels):
        for i in range(cfg.blocks_per_level):
            blocks.append(block(f"down{lvl}.b{i}", lvl))
    blocks.append(block("mid", levels - 1))
    for lvl in range(levels - 1, -1, -1):
        for i in range(cfg.blocks_per_level):
            blocks.append(block(f"up{lvl}.b{i}", lvl))
    return Arch(stage_widths=widths, blocks_per_level=cfg.blocks_per_level, blocks=blocks)


def _build(cfg: ModelConfig, seed: int, include_temporal: bool) -> Supernet:
    cfg.validate()
    arch = _make_arch(cfg, include_temporal)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_shapes(arch, cfg):
        params[name] = torch.from_numpy(_init_array(rng, shape, kind))
    return Supernet(config=cfg, arch=arch, params=params)


def build_supernet(config: ModelConfig, seed: int) -> Supernet:
    """Deterministic full video supernet for the given seed."""
    return _build(config, seed, include_temporal=True)


def build_image_model(config: ModelConfig, seed: int) -> Supernet:
    """Same layout with the temporal self-attentions absent (per-frame model)."""
    return _build(config, seed, include_temporal=False)


def inflate_image_checkpoint(image_net: Supernet, config: ModelConfig,
                             seed: int = 0) -> Supernet:
    """Video supernet initialized from a per-frame model.

    Shared weights are copied; each temporal attention gets fresh q/k/v
    projections and a zero output projection, so the new branch is the
    identity at initialization.
    """
    net = build_supernet(config, seed)
    target_shared = {n for n in net.params if ".tattn." not in n}
    source = set(image_net.params)
    if source != target_shared:
        missing = sorted(target_shared - source)[:3]
        extra = sorted(source - target_shared)[:3]
        raise ValueError(f"layout mismatch: missing={missing} extra={extra}")
    for name, value in image_net.params.items():
        if value.shape != net.params[name].shape:
            raise ValueError(
                f"layout mismatch: {name} has shape {tuple(value.shape)}, "
                f"expected {tuple(net.params[name].shape)}")
        net.params[name] = value.clone()
    return net


# --------------------------------------------------------------------------
# slicing plans

_ALL = slice(None)


def full_spec(net: Supernet, resolution: int) -> SubnetSpec:
    """All ratios 1.0, nothing dropped; the identity subnet of this network."""
    n_blocks = len(net.arch.blocks)
    return SubnetSpec(
        resolution=resolution,
        stage_ratios=(1.0,) * net.arch.levels,
        component_ratios=((1.0,) * len(COMPONENTS),) * n_blocks,
        drop_mask=((False, False, False, False),) * n_blocks,
    )


def check_spec_layout(net: Supernet, spec: SubnetSpec) -> None:
    if len(spec.stage_ratios) != net.arch.levels:
        raise ValueError(
            f"spec/config mismatch: {len(spec.stage_ratios)} stage ratios for "
            f"{net.arch.levels} levels")
    if len(spec.component_ratios) != len(net.arch.blocks) or \
            len(spec.drop_mask) != len(net.arch.blocks):
        raise ValueError(
            f"spec/config mismatch: spec covers {len(spec.component_ratios)} blocks, "
            f"model has {len(net.arch.blocks)}")


def _component_active(block: BlockArch, spec: SubnetSpec, index: int,
                      component: str) -> bool:
    present = {"temporal": block.has_temporal, "cross": block.has_cross,
               "spatial": block.has_spatial, "feed_forward": block.has_ff}[component]
    return present and not spec.dropped(index, component)


def active_slices(net: Supernet, spec: SubnetSpec) -> dict[str, tuple]:
    """name -> index tuple of the weight slice active under the spec.

    Parameters of dropped (or structurally absent) components are omitted;
    the caption embedding participates only while some cross attention does.
    """
    check_spec_layout(net, spec)
    cfg, arch = net.config, net.arch
    q = cfg.width_quantum
    aw = [active_width(w, r, q) for w, r in zip(arch.stage_widths, spec.stage_ratios)]

    plan: dict[str, tuple] = {}
    plan["stem.w"] = (slice(0, aw[0]), _ALL, _ALL, _ALL)
    plan["stem.b"] = (slice(0, aw[0]),)
    for name in ("time.fc1.w", "time.fc1.b", "time.fc2.w", "time.fc2.b"):
        plan[name] = (_ALL,) * net.params[name].ndim
    if any(_component_active(b, spec, i, "cross") for i, b in enumerate(arch.blocks)):
        plan["emb.table"] = (_ALL, _ALL)

    for index, block in enumerate(arch.blocks):
        w_a = aw[block.level]
        h_a = active_width(block.res_hidden, spec.component_ratio(index, "resblock"), q)
        p = block.name
        plan[f"{p}.res.gn1.g"] = (slice(0, w_a),)
        plan[f"{p}.res.gn1.b"] = (slice(0, w_a),)
        plan[f"{p}.res.conv1.w"] = (slice(0, h_a), slice(0, w_a), _ALL, _ALL)
        plan[f"{p}.res.conv1.b"] = (slice(0, h_a),)
        plan[f"{p}.res.gn2.g"] = (slice(0, h_a),)
        plan[f"{p}.res.gn2.b"] = (slice(0, h_a),)
        plan[f"{p}.res.conv2.w"] = (slice(0, w_a), slice(0, h_a), _ALL, _ALL)
        plan[f"{p}.res.conv2.b"] = (slice(0, w_a),)
        plan[f"{p}.res.time.w"] = (slice(0, w_a), _ALL)
        plan[f"{p}.res.time.b"] = (slice(0, w_a),)
        for component, key in (("temporal", "tattn"), ("cross", "cattn"),
                               ("spatial", "sattn")):
            if not _component_active(block, spec, index, component):
                continue
            a_a = active_width(block.attn_dim(component),
                               spec.component_ratio(index, component), q)
            kv = (_ALL,) if component == "cross" else (slice(0, w_a),)
            plan[f"{p}.{key}.norm.g"] = (slice(0, w_a),)
            plan[f"{p}.{key}.norm.b"] = (slice(0, w_a),)
            plan[f"{p}.{key}.q.w"] = (slice(0, a_a), slice(0, w_a))
            plan[f"{p}.{key}.q.b"] = (slice(0, a_a),)
            plan[f"{p}.{key}.k.w"] = (slice(0, a_a),) + kv
            plan[f"{p}.{key}.k.b"] = (slice(0, a_a),)
            plan[f"{p}.{key}.v.w"] = (slice(0, a_a),) + kv
            plan[f"{p}.{key}.v.b"] = (slice(0, a_a),)
            plan[f"{p}.{key}.out.w"] = (slice(0, w_a), slice(0, a_a))
            plan[f"{p}.{key}.out.b"] = (slice(0, w_a),)
        if _component_active(block, spec, index, "feed_forward"):
            f_a = active_width(block.ff_hidden,
                               spec.component_ratio(index, "feed_forward"), q)
            plan[f"{p}.ff.norm.g"] = (slice(0, w_a),)
            plan[f"{p}.ff.norm.b"] = (slice(0, w_a),)
            plan[f"{p}.ff.fc1.w"] = (slice(0, f_a), slice(0, w_a))
            plan[f"{p}.ff.fc1.b"] = (slice(0, f_a),)
            plan[f"{p}.ff.fc2.w"] = (slice(0, w_a), slice(0, f_a))
            plan[f"{p}.ff.fc2.b"] = (slice(0, w_a),)

    for lvl in range(arch.levels - 1):
        plan[f"down{lvl}.ds.w"] = (slice(0, aw[lvl + 1]), slice(0, aw[lvl]), _ALL, _ALL)
        plan[f"down{lvl}.ds.b"] = (slice(0, aw[lvl + 1]),)
        plan[f"up{lvl}.us.w"] = (slice(0, aw[lvl]), slice(0, aw[lvl + 1]), _ALL, _ALL)
        plan[f"up{lvl}.us.b"] = (slice(0, aw[lvl]),)
    for lvl in range(arch.levels):
        plan[f"up{lvl}.skip.w"] = (slice(0, aw[lvl]), slice(0, aw[lvl]), _ALL, _ALL)
        plan[f"up{lvl}.x.w"] = (slice(0, aw[lvl]), slice(0, aw[lvl]), _ALL, _ALL)
        plan[f"up{lvl}.merge.b"] = (slice(0, aw[lvl]),)
    plan["out.norm.g"] = (slice(0, aw[0]),)
    plan["out.norm.b"] = (slice(0, aw[0]),)
    plan["out.w"] = (_ALL, slice(0, aw[0]), _ALL, _ALL)
    plan["out.b"] = (_ALL,)
    return plan


def param_count(net: Supernet, spec: SubnetSpec) -> int:
    """Elements of all weight slices active under the spec."""
    return sum(net.params[name][idx].numel()
               for name, idx in active_slices(net, spec).items())


# --------------------------------------------------------------------------
# forward

def sinusoidal_embedding(t: Tensor, dim: int, dtype: torch.dtype) -> Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float64)
                      * (-math.log(10000.0) / (half - 1)))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(dtype)


class _Fetcher:
    """Pulls active weight views per the plan, registering them on the tape."""

    def __init__(self, net: Supernet, plan: dict[str, tuple], tape: nm.Tape | None):
        self.net = net
        self.plan = plan
        self.tape = tape
        self._cache: dict[str, Tensor] = {}

    def __call__(self, name: str) -> Tensor:
        if name not in self._cache:
            view = self.net.params[name][self.plan[name]]
            self._cache[name] = self.tape.watch(view, name) if self.tape else view
        return self._cache[name]


def _as_batch_tensor(t, batch: int) -> Tensor:
    if isinstance(t, int):
        t = torch.full((batch,), t, dtype=torch.int64)
    elif isinstance(t, np.ndarray):
        t = torch.from_numpy(t)
    if t.shape != (batch,):
        raise ValueError(f"timesteps must have shape ({batch},), got {tuple(t.shape)}")
    return t


def forward(net: Supernet, spec: SubnetSpec, x: Tensor, t, captions: Tensor | None,
            cond: Tensor | None = None, tape: nm.Tape | None = None) -> Tensor:
    """Noise prediction at the input's shape.

    x: [B, F, C, H, W] at spec.resolution; t: per-sample timesteps; captions:
    token ids [B, L]; cond: same shape as x for the SSR role (upsampled
    low-resolution video, concatenated at the stem).
    """
    cfg, arch = net.config, net.arch
    if x.ndim != 5:
        raise ValueError(f"expected video batch [B,F,C,H,W], got {tuple(x.shape)}")
    b, f, c, hgt, wid = x.shape
    if hgt != spec.resolution or wid != spec.resolution:
        raise ValueError(
            f"resolution mismatch: input {hgt}x{wid}, spec {spec.resolution}")
    if c != cfg.in_channels:
        raise ValueError(f"input channels {c} != configured {cfg.in_channels}")
    if spec.resolution % (1 << (arch.levels - 1)) != 0:
        raise ValueError(f"resolution {spec.resolution} not divisible across "
                         f"{arch.levels} levels")

    plan = active_slices(net, spec)
    P = _Fetcher(net, plan, tape)
    groups = cfg.width_quantum
    heads = cfg.heads
    dtype = net.params["stem.w"].dtype

    t = _as_batch_tensor(t, b)
    temb = sinusoidal_embedding(t, cfg.time_embed_dim, dtype)
    temb = nm.linear(temb, P("time.fc1.w"), P("time.fc1.b"))
    temb = nm.linear(nm.silu(temb), P("time.fc2.w"), P("time.fc2.b"))
    temb = nm.silu(temb)

    cap_tokens = None
    if "emb.table" in plan:
        if captions is None:
            raise ValueError("captions required while any cross attention is active")
        cap = torch.nn.functional.embedding(captions, P("emb.table"))
        cap_tokens = cap.unsqueeze(1).expand(b, f, cap.shape[1], cap.shape[2])
        cap_tokens = cap_tokens.reshape(b * f, cap.shape[1], cap.shape[2])

    h = x.reshape(b * f, c, hgt, wid)
    if cfg.role == ROLE_SSR:
        if cond is None:
            raise ValueError("SSR forward requires the low-resolution conditioning")
        if cond.shape != x.shape:
            raise ValueError(
                f"conditioning shape {tuple(cond.shape)} != input {tuple(x.shape)}")
        h = torch.cat([h, cond.reshape(b * f, c, hgt, wid)], dim=1)
    h = nm.conv2d(h, P("stem.w"), P("stem.b"), 1, KERNEL // 2)

    block_index = {blk.name: i for i, blk in enumerate(arch.blocks)}

    def run_block(name: str, h: Tensor) -> Tensor:
        i = block_index[name]
        block = arch.blocks[i]
        p = block.name

        y = nm.silu(nm.group_norm(h, groups, P(f"{p}.res.gn1.g"), P(f"{p}.res.gn1.b")))
        y = nm.conv2d(y, P(f"{p}.res.conv1.w"), P(f"{p}.res.conv1.b"), 1, KERNEL // 2)
        y = nm.silu(nm.group_norm(y, groups, P(f"{p}.res.gn2.g"), P(f"{p}.res.gn2.b")))
        y = nm.conv2d(y, P(f"{p}.res.conv2.w"), P(f"{p}.res.conv2.b"), 1, KERNEL // 2)
        tb = nm.linear(temb, P(f"{p}.res.time.w"), P(f"{p}.res.time.b"))
        y = y + tb.repeat_interleave(f, dim=0)[:, :, None, None]
        h = h + y

        bf, ch, hh, ww = h.shape
        for component, key in (("temporal", "tattn"), ("cross", "cattn"),
                               ("spatial", "sattn")):
            if not _component_active(block, spec, i, component):
                continue
            y = nm.group_norm(h, groups, P(f"{p}.{key}.norm.g"), P(f"{p}.{key}.norm.b"))
            if component == "temporal":
                tok = y.reshape(b, f, ch, hh, ww).permute(0, 3, 4, 1, 2)
                tok = tok.reshape(b * hh * ww, f, ch)
                kv = tok
            else:
                tok = y.reshape(bf, ch, hh * ww).transpose(1, 2)
                kv = cap_tokens if component == "cross" else tok
            q = nm.linear(tok, P(f"{p}.{key}.q.w"), P(f"{p}.{key}.q.b"))
            kk = nm.linear(kv, P(f"{p}.{key}.k.w"), P(f"{p}.{key}.k.b"))
            vv = nm.linear(kv, P(f"{p}.{key}.v.w"), P(f"{p}.{key}.v.b"))
            att = nm.multi_head_attention(q, kk, vv, heads)
            o = nm.linear(att, P(f"{p}.{key}.out.w"), P(f"{p}.{key}.out.b"))
            if component == "temporal":
                o = o.reshape(b, hh, ww, f, ch).permute(0, 3, 4, 1, 2).reshape(bf, ch, hh, ww)
            else:
                o = o.transpose(1, 2).reshape(bf, ch, hh, ww)
            h = h + o

        if _component_active(block, spec, i, "feed_forward"):
            y = nm.group_norm(h, groups, P(f"{p}.ff.norm.g"), P(f"{p}.ff.norm.b"))
            tok = y.reshape(bf, ch, hh * ww).transpose(1, 2)
            tok = nm.silu(nm.linear(tok, P(f"{p}.ff.fc1.w"), P(f"{p}.ff.fc1.b")))
            tok = nm.linear(tok, P(f"{p}.ff.fc2.w"), P(f"{p}.ff.fc2.b"))
            h = h + tok.transpose(1, 2).reshape(bf, ch, hh, ww)
        return h

    skips = []
    for lvl in range(arch.levels):
        for i in range(arch.blocks_per_level):
            h = run_block(f"down{lvl}.b{i}", h)
        skips.append(h)
        if lvl < arch.levels - 1:
            h = nm.conv2d(h, P(f"down{lvl}.ds.w"), P(f"down{lvl}.ds.b"), 2, KERNEL // 2)
    h = run_block("mid", h)
    for lvl in range(arch.levels - 1, -1, -1):
        if lvl < arch.levels - 1:
            h = h.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
            h = nm.conv2d(h, P(f"up{lvl}.us.w"), P(f"up{lvl}.us.b"), 1, KERNEL // 2)
        h = nm.conv2d(skips[lvl], P(f"up{lvl}.skip.w"), None, 1, KERNEL // 2) \
            + nm.conv2d(h, P(f"up{lvl}.x.w"), P(f"up{lvl}.merge.b"), 1, KERNEL // 2)
        for i in range(arch.blocks_per_level):
            h = run_block(f"up{lvl}.b{i}", h)
    h = nm.silu(nm.group_norm(h, groups, P("out.norm.g"), P("out.norm.b")))
    h = nm.conv2d(h, P("out.w"), P("out.b"), 1, KERNEL // 2)
    return h.reshape(b, f, c, hgt, wid)


# --------------------------------------------------------------------------
# cost accounting

def _conv_flops(c_in: int, c_out: int, out_hw: int, frames: int, k: int = KERNEL) -> int:
    return 2 * k * k * c_in * c_out * out_hw * out_hw * frames


def _linear_flops(d_in: int, d_out: int, tokens: int) -> int:
    return 2 * d_in * d_out * tokens


def flop_count(net: Supernet, spec: SubnetSpec, caption_len: int = 5) -> int:
    """Analytic multiply-add count x2 for one video (conv/linear/attention terms)."""
    check_spec_layout(net, spec)
    cfg, arch = net.config, net.arch
    q = cfg.width_quantum
    fr = cfg.frames
    aw = [active_width(w, r, q) for w, r in zip(arch.stage_widths, spec.stage_ratios)]
    res = [spec.resolution >> lvl for lvl in range(arch.levels)]

    total = 0
    stem_in = cfg.in_channels * (2 if cfg.role == ROLE_SSR else 1)
    total += _conv_flops(stem_in, aw[0], res[0], fr)
    total += 2 * _linear_flops(cfg.time_embed_dim, cfg.time_embed_dim, 1)

    for index, block in enumerate(arch.blocks):
        lvl = block.level
        w_a, r = aw[lvl], res[lvl]
        n_spatial = r * r
        h_a = active_width(block.res_hidden, spec.component_ratio(index, "resblock"), q)
        total += _conv_flops(w_a, h_a, r, fr) + _conv_flops(h_a, w_a, r, fr)
        total += _linear_flops(cfg.time_embed_dim, w_a, 1)
        for component in ("temporal", "cross", "spatial"):
            if not _component_active(block, spec, index, component):
                continue
            a_a = active_width(block.attn_dim(component),
                               spec.component_ratio(index, component), q)
            if component == "temporal":
                n, m, inst, kv_tokens, kv_in = fr, fr, n_spatial, fr * n_spatial, w_a
            elif component == "cross":
                n, m, inst, kv_tokens, kv_in = n_spatial, caption_len, fr, fr * caption_len, cfg.cond_embed_dim
            else:
                n, m, inst, kv_tokens, kv_in = n_spatial, n_spatial, fr, fr * n_spatial, w_a
            total += inst * (2 * n * m * a_a + 2 * n * m * a_a)
            q_tokens = fr * n_spatial
            total += _linear_flops(w_a, a_a, q_tokens)
            total += 2 * _linear_flops(kv_in, a_a, kv_tokens)
            total += _linear_flops(a_a, w_a, q_tokens)
        if _component_active(block, spec, index, "feed_forward"):
            f_a = active_width(block.ff_hidden,
                               spec.component_ratio(index, "feed_forward"), q)
            total += 2 * _linear_flops(w_a, f_a, fr * n_spatial)

    for lvl in range(arch.levels - 1):
        total += _conv_flops(aw[lvl], aw[lvl + 1], res[lvl + 1], fr)
        total += _conv_flops(aw[lvl + 1], aw[lvl], res[lvl], fr)
    for lvl in range(arch.levels):
        total += 2 * _conv_flops(aw[lvl], aw[lvl], res[lvl], fr)
    total += _conv_flops(aw[0], cfg.in_channels, res[0], fr)
    return total


# --------------------------------------------------------------------------
# presets

PRESET_FRACTIONS = {"S": 0.4, "M": 0.6, "L": 0.8, "B": 1.0}


def preset_spec(net: Supernet, search: SearchSpaceConfig, preset: str,
                resolution: int) -> SubnetSpec:
    """Uniform-stage-ratio spec whose parameter fraction is nearest the preset target.

    The stage ratio is found by bisection over the sorted ratio grid
    (param_count is monotone in the uniform ratio); component ratios stay at
    1.0 and nothing is dropped.
    """
    if preset not in PRESET_FRACTIONS:
        raise ValueError(f"unknown preset {preset!r}, expected one of S/M/L/B")
    target = PRESET_FRACTIONS[preset]
    cap = search.cap(resolution)
    grid = [r for r in sorted(search.ratio_set) if r <= cap + 1e-9]
    base = full_spec(net, resolution)
    total = param_count(net, dataclasses.replace(base, stage_ratios=(1.0,) * net.arch.levels))

    def fraction(ratio: float) -> float:
        spec = dataclasses.replace(base, stage_ratios=(ratio,) * net.arch.levels)
        return param_count(net, spec) / total

    lo, hi = 0, len(grid) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fraction(grid[mid]) < target:
            lo = mid
        else:
            hi = mid
    best = min((grid[lo], grid[hi]), key=lambda r: abs(fraction(r) - target))
    return dataclasses.replace(base, stage_ratios=(best,) * net.arch.levels)


# --------------------------------------------------------------------------
# SNW1 container

class SnwFormatError(ValueError):
    pass


def save_snw(path, params: dict[str, Tensor], kind: str,
             config: ModelConfig | None = None, arch: Arch | None = None) -> None:
    """Write a weight container: magic, length-prefixed JSON header, raw f32."""
    layers = []
    offset = 0
    for name, tensor in params.items():
        layers.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.numel() * 4
    header = {
        "kind": kind,
        "config": config.to_dict() if config is not None else None,
        "arch": arch.to_dict() if arch is not None else None,
        "layers": layers,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNW_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in params.values():
            arr = np.ascontiguousarray(tensor.detach().to(torch.float32).numpy())
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_snw(path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SNW_MAGIC:
        raise SnwFormatError(f"bad magic: expected {SNW_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 8:
        raise SnwFormatError("truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise SnwFormatError("truncated header")
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    payload = raw[8 + hlen:]
    expected = sum(int(np.prod(l["shape"])) * 4 if l["shape"] else 4
                   for l in header["layers"])
    if len(payload) < expected:
        raise SnwFormatError(
            f"truncated payload: header promises {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise SnwFormatError(
            f"payload size disagreement: header promises {expected} bytes, "
            f"found {len(payload)}")
    params: dict[str, Tensor] = {}
    for layer in header["layers"]:
        shape = tuple(int(s) for s in layer["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(layer["offset"])
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        params[layer["name"]] = torch.from_numpy(arr.copy().reshape(shape))
    return params, header


def save_supernet(net: Supernet, path) -> None:
    save_snw(path, net.params, kind="supernet", config=net.config, arch=net.arch)


def load_supernet(path) -> Supernet:
    params, header = load_snw(path)
    if header.get("kind") != "supernet" or header.get("config") is None:
        raise SnwFormatError("not a supernet container")
    return Supernet(config=ModelConfig.from_dict(header["config"]),
                    arch=Arch.from_dict(header["arch"]), params=params)
