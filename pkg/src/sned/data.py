"""Deterministic synthetic captioned videos: one colored shape drifting on a torus.

Every video shows a single shape of a single color translating at a constant
integer velocity in the captioned direction, wrapping at the borders so the
motion stays unambiguous in every frame. Lower-resolution tiers are produced
offline by the antialiased bilinear resize, and the whole corpus round-trips
bit-exactly through the SNV1 container.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import Tensor, resize_bilinear_antialiased

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
MOTIONS = ("left", "right", "up", "down")
FILLER = ("a", "moving")

COLOR_RGB = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.9, 0.15),
    "blue": (0.15, 0.15, 0.9),
}
BACKGROUND = 0.1
CAPTION_LEN = 5

SNV_MAGIC = b"SNV1"


class SnvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionVocab:
    tokens: tuple[str, ...]

    @classmethod
    def default(cls) -> "CaptionVocab":
        return cls(tokens=COLORS + SHAPES + MOTIONS + FILLER)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.tokens.index(token)

    def encode(self, words: list[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class VideoBatch:
    """One training batch; low_res carries the paired conditioning tier for SSR."""

    videos: Tensor
    captions: Tensor
    low_res: Tensor | None = None


@dataclass
class VideoDataset:
    videos: Tensor              # master [n, F, 3, R, R], values in [0, 1]
    captions: Tensor            # [n, CAPTION_LEN] int64
    vocab: CaptionVocab
    tiers: dict[int, Tensor]

    @property
    def n(self) -> int:
        return self.videos.shape[0]

    @property
    def frames(self) -> int:
        return self.videos.shape[1]

    @property
    def resolution(self) -> int:
        return self.videos.shape[-1]

    def tier(self, resolution: int) -> Tensor:
        if resolution not in self.tiers:
            raise KeyError(f"no {resolution}px tier; available: {sorted(self.tiers)}")
        return self.tiers[resolution]


def _wrapped_delta(coords: np.ndarray, center: int, size: int) -> np.ndarray:
    return (coords - center + size // 2) % size - size // 2


def _shape_mask(shape: str, res: int, cy: int, cx: int, half: int) -> np.ndarray:
    yy = _wrapped_delta(np.arange(res)[:, None], cy, res)
    xx = _wrapped_delta(np.arange(res)[None, :], cx, res)
    if shape == "square":
        return (np.abs(yy) <= half) & (np.abs(xx) <= half)
    if shape == "circle":
        return yy * yy + xx * xx <= half * half
    if shape == "triangle":
        return (np.abs(yy) <= half) & (np.abs(xx) <= (yy + half) / 2)
    raise ValueError(f"unknown shape {shape!r}")


def gen_synthetic(n: int, frames: int, max_resolution: int, seed: int) -> VideoDataset:
    """n captioned videos at max_resolution; fully determined by the seed."""
    if max_resolution < 16:
        raise ValueError("max_resolution must be >= 16")
    if frames < 2:
        raise ValueError("frames must be >= 2")
    rng = np.random.default_rng(seed)
    vocab = CaptionVocab.default()
    res = max_resolution

    videos = np.full((n, frames, 3, res, res), BACKGROUND, dtype=np.float32)
    captions = np.zeros((n, CAPTION_LEN), dtype=np.int64)

    for i in range(n):
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        motion = MOTIONS[rng.integers(len(MOTIONS))]
        cy = int(rng.integers(res))
        cx = int(rng.integers(res))
        half = int(rng.integers(res // 8, res // 5 + 1))
        speed = int(rng.integers(1, 4))
        dy, dx = {"left": (0, -speed), "right": (0, speed),
                  "up": (-speed, 0), "down": (speed, 0)}[motion]
        rgb = np.asarray(COLOR_RGB[color], dtype=np.float32)
        for fidx in range(frames):
            mask = _shape_mask(shape, res, (cy + dy * fidx) % res,
                               (cx + dx * fidx) % res, half)
            videos[i, fidx, :, mask] = rgb
        captions[i] = vocab.encode(["a", color, shape, "moving", motion])

    return VideoDataset(videos=torch.from_numpy(videos),
                        captions=torch.from_numpy(captions),
                        vocab=vocab, tiers={res: torch.from_numpy(videos)})


def build_tiers(dataset: VideoDataset, resolutions) -> VideoDataset:
    """Adds one tier per requested resolution, resized from the master."""
    tiers = dict(dataset.tiers)
    for res in sorted(set(int(r) for r in resolutions)):
        if res > dataset.resolution:
            raise ValueError(
                f"tier {res}px exceeds master resolution {dataset.resolution}px")
        tiers[res] = resize_bilinear_antialiased(dataset.videos, res, res)
    return VideoDataset(videos=dataset.videos, captions=dataset.captions,
                        vocab=dataset.vocab, tiers=tiers)


def batches(dataset: VideoDataset, resolution: int, batch_size: int, seed: int,
            pair_low: bool = False):
    """Endless epoch-shuffled batch stream; each sample appears once per epoch.

    With pair_low=True every batch carries the half-resolution tier of the
    same samples as SSR conditioning.
    """
    tier = dataset.tier(resolution)
    low = dataset.tier(resolution // 2) if pair_low else None
    rng = np.random.default_rng(seed)
    n = dataset.n
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size].copy())
            yield VideoBatch(
                videos=tier[idx],
                captions=dataset.captions[idx],
                low_res=low[idx] if low is not None else None,
            )


def random_captions(n: int, seed: int) -> Tensor:
    """n well-formed caption token rows, for conditioning fresh samples."""
    rng = np.random.default_rng([seed, 2024])
    vocab = CaptionVocab.default()
    rows = []
    for _ in range(n):
        rows.append(vocab.encode([
            "a", COLORS[rng.integers(len(COLORS))], SHAPES[rng.integers(len(SHAPES))],
            "moving", MOTIONS[rng.integers(len(MOTIONS))]]))
    return torch.tensor(rows, dtype=torch.int64)


# --------------------------------------------------------------------------
# SNV1 container

def write_snv(dataset: VideoDataset, path, resolution: int | None = None) -> None:
    videos = dataset.videos if resolution is None else dataset.tier(resolution)
    arr = np.ascontiguousarray(videos.numpy().astype("<f4", copy=False))
    caps = np.ascontiguousarray(dataset.captions.numpy().astype("<u4"))
    n, f, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(SNV_MAGIC)
        fh.write(struct.pack("<7I", n, f, c, h, w, caps.shape[1], dataset.vocab.size))
        for token in dataset.vocab.tokens:
            blob = token.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
        fh.write(caps.tobytes())
        fh.write(arr.tobytes())


def read_snv(path) -> VideoDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SNV_MAGIC:
        raise SnvFormatError(f"bad magic: expected {SNV_MAGIC!r}, got {raw[:4]!r}")
    pos = 4
    if len(raw) < pos + 28:
        raise SnvFormatError("truncated payload: header incomplete")
    n, f, c, h, w, cap_len, vocab_size = struct.unpack_from("<7I", raw, pos)
    pos += 28
    tokens = []
    for _ in range(vocab_size):
        if len(raw) < pos + 4:
            raise SnvFormatError("truncated payload: vocabulary incomplete")
        (tlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if len(raw) < pos + tlen:
            raise SnvFormatError("truncated payload: vocabulary incomplete")
        tokens.append(raw[pos:pos + tlen].decode("utf-8"))
        pos += tlen
    cap_bytes = n * cap_len * 4
    vid_bytes = n * f * c * h * w * 4
    remaining = len(raw) - pos
    if remaining < cap_bytes + vid_bytes:
        raise SnvFormatError(
            f"truncated payload: expected {cap_bytes + vid_bytes} bytes after the "
            f"vocabulary, found {remaining}")
    if remaining > cap_bytes + vid_bytes:
        raise SnvFormatError(
            f"payload size disagreement: {remaining - cap_bytes - vid_bytes} "
            f"trailing bytes")
    caps = np.frombuffer(raw, dtype="<u4", count=n * cap_len, offset=pos)
    pos += cap_bytes
    vids = np.frombuffer(raw, dtype="<f4", count=n * f * c * h * w, offset=pos)
    videos = torch.from_numpy(vids.copy().reshape(n, f, c, h, w))
    captions = torch.from_numpy(caps.copy().reshape(n, cap_len).astype(np.int64))
    return VideoDataset(videos=videos, captions=captions,
                        vocab=CaptionVocab(tokens=tuple(tokens)),
                        tiers={h: videos})
