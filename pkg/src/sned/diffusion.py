"""Denoising-diffusion machinery: schedules, noising, loss, DDIM, cascade.

The model predicts the injected noise; sampling is deterministic DDIM over an
evenly spaced timestep subsequence, and the spatial-super-resolution cascade
reuses one SSR network at every doubling stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import model as model_mod
from .numerics import Tensor, Tape, resize_bilinear_antialiased
from .searchspace import SubnetSpec


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha sequences, 1-indexed: alpha_bar(t) for t in 1..T, alpha_bar(0)=1."""

    T: int
    betas: tuple[float, ...]
    alphas: tuple[float, ...]
    alpha_bars: tuple[float, ...]

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return self.alpha_bars[t - 1]


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = [beta_start]
    else:
        betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)]
    alphas = [1.0 - b for b in betas]
    bars, acc = [], 1.0
    for a in alphas:
        acc *= a
        bars.append(acc)
    return NoiseSchedule(T=T, betas=tuple(betas), alphas=tuple(alphas),
                         alpha_bars=tuple(bars))


def q_sample(x0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a single step or one step per sample (leading axis of x0).
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, int):
        ts = [t]
        per_sample = False
    else:
        ts = [int(v) for v in t]
        per_sample = True
        if len(ts) != x0.shape[0]:
            raise ValueError(f"got {len(ts)} timesteps for batch {x0.shape[0]}")
    for v in ts:
        if not 1 <= v <= schedule.T:
            raise ValueError(f"timestep {v} outside 1..{schedule.T}")
    bars = torch.tensor([schedule.alpha_bar(v) for v in ts], dtype=torch.float64)
    shape = (-1,) + (1,) * (x0.ndim - 1) if per_sample else (1,) * x0.ndim
    s0 = bars.sqrt().reshape(shape)
    s1 = (1.0 - bars).sqrt().reshape(shape)
    return (x0.to(torch.float64) * s0 + eps.to(torch.float64) * s1).to(x0.dtype)


def training_loss(net, spec: SubnetSpec, batch, schedule: NoiseSchedule,
                  rng: np.random.Generator, tape: Tape | None = None,
                  predict=None) -> Tensor:
    """Noise-prediction MSE on one batch; deterministic given the generator.

    ``predict`` substitutes the network call (same signature as
    model.forward minus net/spec/tape); used by oracle tests.
    """
    x0 = batch.videos
    if x0.shape[-1] != spec.resolution:
        raise ValueError(
            f"batch resolution {x0.shape[-1]} != spec resolution {spec.resolution}")
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = torch.from_numpy(
        rng.standard_normal(tuple(x0.shape), dtype=np.float32)).to(x0.dtype)
    xt = q_sample(x0, t, eps, schedule)
    cond = None
    if getattr(batch, "low_res", None) is not None:
        cond = resize_bilinear_antialiased(
            batch.low_res, spec.resolution, spec.resolution)
    if predict is not None:
        pred = predict(xt, t, batch.captions, cond)
    else:
        pred = model_mod.forward(net, spec, xt, t, batch.captions, cond=cond, tape=tape)
    return ((pred - eps) ** 2).mean()


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly spaced descending subsequence including both T and 1."""
    if num_steps < 1 or num_steps > T:
        raise ValueError(f"num_steps must be in 1..{T}, got {num_steps}")
    if num_steps == 1:
        return [T]
    raw = np.linspace(T, 1, num_steps)
    steps = sorted({int(round(v)) for v in raw}, reverse=True)
    return steps


def ddim_sample(net, spec: SubnetSpec, n: int, captions: Tensor | None,
                schedule: NoiseSchedule, num_steps: int, eta: float = 0.0,
                rng: np.random.Generator | None = None, cond: Tensor | None = None,
                clamp: bool = True, frames: int | None = None) -> Tensor:
    """Deterministic DDIM from seeded Gaussian noise down to t=0.

    The final update targets alpha_bar(0) = 1, so a zero predictor telescopes
    to x_T / sqrt(abar_T) exactly. The output is clamped to [0, 1] at the end
    only (disable with clamp=False to inspect the raw values).
    """
    if eta != 0.0:
        raise ValueError("only the deterministic eta=0 sampler is supported")
    if rng is None:
        raise ValueError("a seeded numpy Generator is required")
    cfg = net.config
    f = frames if frames is not None else cfg.frames
    shape = (n, f, cfg.in_channels, spec.resolution, spec.resolution)
    x = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32))

    steps = ddim_timesteps(schedule.T, num_steps)
    for t, t_prev in zip(steps, steps[1:] + [0]):
        eps_hat = model_mod.forward(net, spec, x, t, captions, cond=cond)
        if not torch.isfinite(eps_hat).all():
            raise FloatingPointError(
                f"non-finite noise prediction at t={t} (resolution {spec.resolution})")
        ab_t = schedule.alpha_bar(t)
        ab_p = schedule.alpha_bar(t_prev)
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        x = math.sqrt(ab_p) * x0_hat + math.sqrt(1.0 - ab_p) * eps_hat
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sampler state after t={t}")
    return x.clamp(0.0, 1.0) if clamp else x


def cascade_sample(base_net, ssr_net, base_spec: SubnetSpec,
                   ssr_specs: list[SubnetSpec], captions: Tensor | None,
                   schedule: NoiseSchedule, num_steps: int,
                   rng: np.random.Generator, frames: int | None = None) -> Tensor:
    """Base sample, then the same SSR network applied at every doubling stage."""
    res = base_spec.resolution
    for i, spec in enumerate(ssr_specs):
        if spec.resolution != res * (2 ** (i + 1)):
            raise ValueError(
                f"resolution chain mismatch: stage {i} is {spec.resolution}px, "
                f"expected {res * (2 ** (i + 1))}px")
    n = captions.shape[0] if captions is not None else 1
    x = ddim_sample(base_net, base_spec, n, captions, schedule, num_steps,
                    rng=rng, frames=frames)
    for spec in ssr_specs:
        up = resize_bilinear_antialiased(x, spec.resolution, spec.resolution)
        x = ddim_sample(ssr_net, spec, n, captions, schedule, num_steps,
                        rng=rng, cond=up, frames=frames)
    return x
