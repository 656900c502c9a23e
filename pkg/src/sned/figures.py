"""Figure rendering for the CLI report paths (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curve(metrics: list[dict], path) -> None:
    if not metrics:
        return
    iters = [m["iter"] for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, [m["loss"] for m in metrics], label="train loss", lw=1.0)
    if any("probe_ema_loss" in m for m in metrics):
        ax.plot(iters, [m.get("probe_ema_loss") for m in metrics],
                label="EMA probe loss", lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("noise MSE")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cost_histogram(histogram: dict, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, unit in ((axes[0], "params", "parameters"),
                          (axes[1], "flops", "FLOPs")):
        stats = histogram[key]
        deciles = stats["deciles"]
        ax.plot(range(10, 100, 10), deciles, marker="o", ms=3)
        ax.axhline(stats["min"], color="gray", ls=":", lw=0.8)
        ax.axhline(stats["max"], color="gray", ls=":", lw=0.8)
        ax.set_title(f"{unit} over {histogram['n_samples']} subnets")
        ax.set_xlabel("percentile")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_chart(entries: list[dict], path) -> None:
    rows = sorted(entries, key=lambda e: e["params"])
    params = [r["params"] for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    panels = (("proxy_fd", "proxy FD"), ("proxy_kd", "proxy KD"),
              ("val_loss", "val loss"), ("time_s", "sampling time (s)"))
    for ax, (key, label) in zip(axes.ravel(), panels):
        ax.plot(params, [r[key] for r in rows], marker="o", ms=4)
        for r in rows:
            ax.annotate(r["model"], (r["params"], r[key]), fontsize=7,
                        xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel("parameters")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_video_sheet(videos, path, max_videos: int = 8) -> None:
    """Contact sheet: one row per video, one column per frame."""
    vids = np.asarray(videos)[:max_videos]
    n, frames = vids.shape[0], vids.shape[1]
    fig, axes = plt.subplots(n, frames, figsize=(1.4 * frames, 1.4 * n),
                             squeeze=False)
    for i in range(n):
        for j in range(frames):
            ax = axes[i][j]
            ax.imshow(np.clip(vids[i, j].transpose(1, 2, 0), 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"frame {j}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
