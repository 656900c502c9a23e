"""Quantitative evaluation at desk scale.

Distribution distances use a fixed, seeded, never-trained feature extractor,
so the Frechet and kernel mathematics run end-to-end without a pretrained
backbone; reported values are proxies and are labeled as such in the tables.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import data as data_mod
from . import diffusion as diff_mod
from . import model as model_mod
from .numerics import Tensor, silu, sym_psd_sqrt
from .searchspace import SubnetSpec

log = logging.getLogger(__name__)

FEATURE_DIM = 64
_STAGE_CHANNELS = (3, 16, 32, FEATURE_DIM)


@dataclass(frozen=True)
class FeatureExtractor:
    """Three strided spatial convolutions with pairwise temporal averaging.

    Weights are a pure function of the seed and are never trained.
    """

    seed: int
    weights: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]

    @classmethod
    def create(cls, seed: int) -> "FeatureExtractor":
        rng = np.random.default_rng([seed, 5150])
        weights, biases = [], []
        for c_in, c_out in zip(_STAGE_CHANNELS[:-1], _STAGE_CHANNELS[1:]):
            std = 1.0 / np.sqrt(c_in * 9)
            weights.append(torch.from_numpy(
                rng.standard_normal((c_out, c_in, 3, 3), dtype=np.float32) * np.float32(std)))
            biases.append(torch.from_numpy(
                rng.standard_normal(c_out, dtype=np.float32) * np.float32(0.1)))
        return cls(seed=seed, weights=tuple(weights), biases=tuple(biases))


def _temporal_pair_mean(x: Tensor, n: int) -> Tensor:
    """[n*f, c, h, w] -> pairs of adjacent frames averaged (odd tail kept)."""
    f = x.shape[0] // n
    if f < 2:
        return x
    x = x.reshape(n, f, *x.shape[1:])
    pairs = [(x[:, i] + x[:, i + 1]) / 2 for i in range(0, f - 1, 2)]
    if f % 2:
        pairs.append(x[:, -1])
    return torch.stack(pairs, dim=1).reshape(n * len(pairs), *x.shape[2:])


def extract_features(videos: Tensor, extractor: FeatureExtractor) -> Tensor:
    """[n, F, 3, H, W] in [0,1] -> [n, 64] deterministic features."""
    if videos.ndim != 5:
        raise ValueError(f"expected [n,F,3,H,W], got {tuple(videos.shape)}")
    lo, hi = float(videos.min()), float(videos.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"pixel values outside [0,1]: min {lo:.4g}, max {hi:.4g}")
    n, f = videos.shape[0], videos.shape[1]
    x = videos.reshape(n * f, *videos.shape[2:])
    for w, b in zip(extractor.weights, extractor.biases):
        x = silu(torch.nn.functional.conv2d(x, w, b, stride=2, padding=1))
        x = _temporal_pair_mean(x, n)
    frames = x.shape[0] // n
    feats = x.reshape(n, frames, x.shape[1], -1).mean(dim=(1, 3))
    if not torch.isfinite(feats).all():
        raise FloatingPointError("non-finite activations in the feature extractor")
    return feats


def _mean_cov(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_distance(feats_a, feats_b) -> float:
    """||mu_a-mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) < 2 * d:
        log.warning("frechet_distance: fewer than 2*dim samples per side "
                    "(%d, %d vs dim %d); estimate will be noisy",
                    a.shape[0], b.shape[0], d)
    mu_a, cov_a = _mean_cov(a)
    mu_b, cov_b = _mean_cov(b)

    def trace_sqrt_product(ca: np.ndarray, cb: np.ndarray) -> float:
        sa = sym_psd_sqrt(torch.from_numpy(ca))
        inner = sa @ torch.from_numpy(cb) @ sa
        return float(torch.diagonal(sym_psd_sqrt(inner)).sum())

    try:
        cross = trace_sqrt_product(cov_a, cov_b)
    except ValueError:
        log.warning("frechet_distance: degenerate covariance, regularizing with 1e-6*I")
        cov_a = cov_a + 1e-6 * np.eye(d)
        cov_b = cov_b + 1e-6 * np.eye(d)
        cross = trace_sqrt_product(cov_a, cov_b)

    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
                - 2.0 * cross)
    return max(val, 0.0)


def kernel_distance(feats_a, feats_b) -> float:
    """Biased squared MMD with the cubic polynomial kernel (x.y/d + 1)^3."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    d = a.shape[1]

    def k(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x @ y.T / d + 1.0) ** 3

    return float(k(a, a).mean() + k(b, b).mean() - 2.0 * k(a, b).mean())


def subnet_val_loss(net: model_mod.Supernet, spec: SubnetSpec,
                    val_dataset: data_mod.VideoDataset, schedule,
                    n_batches: int, seed: int, batch_size: int = 8,
                    predict=None) -> float:
    """Mean noise-prediction MSE over fixed (t, eps) draws.

    The draws depend only on (seed, resolution, batch size), so different
    subnets are scored against identical noise.
    """
    tier = val_dataset.tier(spec.resolution)
    low = (val_dataset.tier(spec.resolution // 2)
           if net.config.role == model_mod.ROLE_SSR else None)
    rng = np.random.default_rng([seed, 31337])
    n = tier.shape[0]
    losses = []
    for i in range(n_batches):
        start = (i * batch_size) % n
        idx = torch.arange(start, min(start + batch_size, n))
        batch = data_mod.VideoBatch(
            videos=tier[idx], captions=val_dataset.captions[idx],
            low_res=low[idx] if low is not None else None)
        loss = diff_mod.training_loss(net, spec, batch, schedule, rng,
                                      predict=predict)
        losses.append(float(loss))
    return float(np.mean(losses))


def bench(net: model_mod.Supernet, spec: SubnetSpec, reps: int, warm: int,
          schedule=None, ddim_steps: int = 10, batch: int = 1) -> dict:
    """Wall-clock stats for one forward pass and one full DDIM sampling."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if schedule is None:
        schedule = diff_mod.linear_schedule(100)
    cfg = net.config
    rng = np.random.default_rng([spec.resolution, 99])
    x = torch.from_numpy(rng.standard_normal(
        (batch, cfg.frames, cfg.in_channels, spec.resolution, spec.resolution),
        dtype=np.float32))
    captions = torch.zeros((batch, data_mod.CAPTION_LEN), dtype=torch.int64)
    cond = x.clone() if cfg.role == model_mod.ROLE_SSR else None

    def timed(fn) -> dict:
        for _ in range(warm):
            fn()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1000.0)
        return {
            "median_ms": float(np.median(times)),
            "p10_ms": float(np.percentile(times, 10)),
            "p90_ms": float(np.percentile(times, 90)),
        }

    params = model_mod.param_count(net, spec)
    fwd_flops = model_mod.flop_count(net, spec)
    forward_stats = timed(lambda: model_mod.forward(net, spec, x, 1, captions, cond=cond))
    ddim_stats = timed(lambda: diff_mod.ddim_sample(
        net, spec, batch, captions, schedule, ddim_steps,
        rng=np.random.default_rng(11), cond=cond))
    return {
        "forward": {"flops": fwd_flops, "params": params, **forward_stats},
        "ddim": {"flops": fwd_flops * len(diff_mod.ddim_timesteps(schedule.T, ddim_steps)),
                 "params": params, **ddim_stats},
    }


REPORT_COLUMNS = ("Model", "Params", "Proxy-FD", "Proxy-KD", "ValLoss", "Time")


def _cell(value) -> str:
    if isinstance(value, str):
        return value
    return f"{value:.4g}"


def report_table(entries: list[dict]) -> tuple[str, str]:
    """(csv_text, aligned_text), rows ordered by descending parameter count.

    Each entry carries model, params, proxy_fd, proxy_kd, val_loss, time_s.
    """
    if not entries:
        raise ValueError("report_table needs at least one entry")
    rows = sorted(entries, key=lambda e: -e["params"])
    table = [[_cell(r["model"]), _cell(r["params"]), _cell(r["proxy_fd"]),
              _cell(r["proxy_kd"]), _cell(r["val_loss"]), _cell(r["time_s"])]
             for r in rows]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(table)

    widths = [max(len(REPORT_COLUMNS[i]), *(len(row[i]) for row in table))
              for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(name.ljust(w) for name, w in zip(REPORT_COLUMNS, widths))]
    lines += ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table]
    return buf.getvalue(), "\n".join(lines) + "\n"
