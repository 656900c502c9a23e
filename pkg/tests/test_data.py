import math

import numpy as np
import pytest
import torch

from sned import data as data_mod
from sned.data import (BACKGROUND, COLORS, MOTIONS, SHAPES, CaptionVocab,
                       SnvFormatError, batches, build_tiers, gen_synthetic,
                       random_captions, read_snv, write_snv)


# ---------------------------------------------------------------------------
# geometric oracle: recover (color, shape, motion) from pixels alone

def circular_centroid(mask: np.ndarray, axis_len: int, axis: int) -> float:
    idx = np.nonzero(mask)[axis].astype(np.float64)
    theta = 2 * np.pi * idx / axis_len
    mean = math.atan2(np.sin(theta).mean(), np.cos(theta).mean())
    return (mean % (2 * np.pi)) * axis_len / (2 * np.pi)


def wrapped_diff(b: float, a: float, n: int) -> float:
    return (b - a + n / 2) % n - n / 2


def recover_caption(video: np.ndarray) -> tuple[str, str, str]:
    frames, _, res, _ = video.shape
    f0 = video[0]
    mask = np.abs(f0 - BACKGROUND).max(axis=0) > 0.05

    rgb = f0[:, mask].mean(axis=1)
    color = COLORS[int(np.argmax(rgb))]

    # shape from the per-row width profile, rows ordered around the centroid
    cy = circular_centroid(mask, res, 0)
    ys, xs = np.nonzero(mask)
    rel = np.round((ys - cy + res / 2) % res - res / 2).astype(int)
    rows = sorted(set(rel))
    widths = np.array([np.sum(rel == r) for r in rows], dtype=np.float64)
    spread = (widths.max() - widths.min()) / widths.max()
    third = max(1, len(widths) // 3)
    ratio = widths[-third:].mean() / widths[:third].mean()
    if spread <= 0.2:
        shape = "square"
    elif ratio >= 2.0:
        shape = "triangle"
    else:
        shape = "circle"

    dys, dxs = [], []
    prev = None
    for f in range(frames):
        mk = np.abs(video[f] - BACKGROUND).max(axis=0) > 0.05
        cen = (circular_centroid(mk, res, 0), circular_centroid(mk, res, 1))
        if prev is not None:
            dys.append(wrapped_diff(cen[0], prev[0], res))
            dxs.append(wrapped_diff(cen[1], prev[1], res))
        prev = cen
    dy, dx = np.mean(dys), np.mean(dxs)
    if abs(dx) >= abs(dy):
        motion = "right" if dx > 0 else "left"
    else:
        motion = "down" if dy > 0 else "up"
    return color, shape, motion


# ---------------------------------------------------------------------------

class TestVocab:
    def test_ids_dense_and_bijective(self):
        vocab = CaptionVocab.default()
        assert vocab.size == 12
        assert [vocab.id_of(t) for t in vocab.tokens] == list(range(12))
        assert vocab.decode(vocab.encode(["a", "red", "circle"])) == \
            ["a", "red", "circle"]


class TestGeneration:
    def test_deterministic(self):
        a = gen_synthetic(6, 3, 32, seed=9)
        b = gen_synthetic(6, 3, 32, seed=9)
        assert torch.equal(a.videos, b.videos)
        assert torch.equal(a.captions, b.captions)

    def test_pixel_range(self):
        ds = gen_synthetic(8, 2, 32, seed=1)
        assert float(ds.videos.min()) >= 0.0
        assert float(ds.videos.max()) <= 1.0

    def test_moving_right_centroid_strictly_increases(self):
        ds = gen_synthetic(40, 4, 64, seed=2)
        vocab = ds.vocab
        right = vocab.id_of("right")
        checked = 0
        for i in range(ds.n):
            if int(ds.captions[i, 4]) != right:
                continue
            checked += 1
            video = ds.videos[i].numpy()
            cols = []
            for f in range(4):
                mk = np.abs(video[f] - BACKGROUND).max(axis=0) > 0.05
                cols.append(circular_centroid(mk, 64, 1))
            steps = [wrapped_diff(b, a, 64) for a, b in zip(cols, cols[1:])]
            assert all(s >= 0.9 for s in steps)
        assert checked >= 3

    def test_caption_matches_drawn_content(self):
        ds = gen_synthetic(60, 4, 64, seed=5)
        vocab = ds.vocab
        for i in range(ds.n):
            color, shape, motion = recover_caption(ds.videos[i].numpy())
            words = vocab.decode(ds.captions[i])
            assert words == ["a", color, shape, "moving", motion]

    def test_args_validated(self):
        with pytest.raises(ValueError):
            gen_synthetic(2, 1, 32, seed=0)
        with pytest.raises(ValueError):
            gen_synthetic(2, 4, 8, seed=0)


class TestTiers:
    def test_master_tier_bit_exact(self):
        ds = gen_synthetic(4, 2, 32, seed=0)
        tiered = build_tiers(ds, [16, 32])
        assert torch.equal(tiered.tier(32), ds.videos)

    def test_constant_background_constant_at_every_tier(self):
        ds = gen_synthetic(2, 2, 32, seed=3)
        blank = data_mod.VideoDataset(
            videos=torch.full_like(ds.videos, BACKGROUND),
            captions=ds.captions, vocab=ds.vocab,
            tiers={32: torch.full_like(ds.videos, BACKGROUND)})
        tiered = build_tiers(blank, [8, 16])
        for res in (8, 16):
            assert float((tiered.tier(res) - BACKGROUND).abs().max()) < 1e-6

    def test_tier_shapes(self):
        ds = build_tiers(gen_synthetic(3, 2, 32, seed=1), [8, 16, 32])
        for res in (8, 16, 32):
            assert ds.tier(res).shape == (3, 2, 3, res, res)

    def test_tier_exceeding_master_rejected(self):
        ds = gen_synthetic(2, 2, 32, seed=0)
        with pytest.raises(ValueError, match="exceeds master"):
            build_tiers(ds, [64])

    def test_missing_tier_named(self):
        ds = gen_synthetic(2, 2, 32, seed=0)
        with pytest.raises(KeyError, match="no 16px tier"):
            ds.tier(16)


class TestSnv:
    def test_round_trip_bit_identical(self, tmp_path, tiny_dataset):
        path = tmp_path / "data.snv"
        write_snv(tiny_dataset, path)
        back = read_snv(path)
        assert torch.equal(back.videos, tiny_dataset.videos)
        assert torch.equal(back.captions, tiny_dataset.captions)
        assert back.vocab == tiny_dataset.vocab

    def test_tier_round_trip(self, tmp_path, tiny_dataset):
        path = tmp_path / "tier.snv"
        write_snv(tiny_dataset, path, resolution=16)
        back = read_snv(path)
        assert torch.equal(back.videos, tiny_dataset.tier(16))

    def test_bad_magic(self, tmp_path, tiny_dataset):
        path = tmp_path / "data.snv"
        write_snv(tiny_dataset, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(SnvFormatError, match="bad magic"):
            read_snv(path)

    def test_truncated_payload(self, tmp_path, tiny_dataset):
        path = tmp_path / "data.snv"
        write_snv(tiny_dataset, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(SnvFormatError, match="truncated payload"):
            read_snv(path)

    def test_trailing_bytes(self, tmp_path, tiny_dataset):
        path = tmp_path / "data.snv"
        write_snv(tiny_dataset, path)
        with open(path, "ab") as fh:
            fh.write(b"\x00" * 3)
        with pytest.raises(SnvFormatError, match="size disagreement"):
            read_snv(path)


class TestBatches:
    def test_single_batch_covers_everything(self, tiny_dataset):
        batch = next(batches(tiny_dataset, 16, tiny_dataset.n, seed=0))
        assert batch.videos.shape[0] == tiny_dataset.n

    def test_same_seed_same_order(self, tiny_dataset):
        a = batches(tiny_dataset, 16, 4, seed=7)
        b = batches(tiny_dataset, 16, 4, seed=7)
        for _ in range(6):
            ba, bb = next(a), next(b)
            assert torch.equal(ba.videos, bb.videos)
            assert torch.equal(ba.captions, bb.captions)

    def test_each_sample_once_per_epoch(self, tiny_dataset):
        stream = batches(tiny_dataset, 16, 5, seed=1)
        seen = []
        taken = 0
        while taken < tiny_dataset.n:
            batch = next(stream)
            seen.append(batch.captions)
            taken += batch.videos.shape[0]
        got = torch.cat(seen)[:tiny_dataset.n]
        want = tiny_dataset.captions
        assert sorted(map(tuple, got.tolist())) == sorted(map(tuple, want.tolist()))

    def test_ssr_pairing_halves_resolution(self, tiny_dataset):
        batch = next(batches(tiny_dataset, 32, 4, seed=0, pair_low=True))
        assert batch.low_res.shape[-1] == 16
        assert batch.videos.shape[-1] == 32

    def test_missing_tier(self, tiny_dataset):
        with pytest.raises(KeyError):
            next(batches(tiny_dataset, 64, 4, seed=0))


class TestRandomCaptions:
    def test_shape_and_validity(self):
        caps = random_captions(10, seed=3)
        vocab = CaptionVocab.default()
        assert caps.shape == (10, 5)
        for row in caps.tolist():
            words = vocab.decode(row)
            assert words[0] == "a" and words[3] == "moving"
            assert words[1] in COLORS and words[2] in SHAPES and words[4] in MOTIONS

    def test_deterministic(self):
        assert torch.equal(random_captions(6, 1), random_captions(6, 1))
