"""Differentiable kernels shared by the elastic U-Net and the evaluation metrics.

Everything here operates on plain ``torch.Tensor`` values (CPU, float32 for
training, float64 for gradient checking). The heavy lifting (convolution,
matmul, autograd graph) is delegated to torch; this module pins down the exact
semantics the rest of the package relies on: shape validation with named
dimensions, the antialiased triangle-filter resize, the symmetric PSD square
root, and a finite-difference gradient checker that stays independent of the
autograd path it verifies.
"""
from __future__ import annotations

import functools
import math
from typing import Callable

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class Tape:
    """Records the tensors marked for differentiation during one forward pass.

    ``watch`` registers a leaf that aliases the storage of ``source`` (no
    copy); ``gradients`` runs reverse mode and returns gradients for exactly
    the watched tensors, keyed by the name given at ``watch`` time. Gradients
    of unwatched tensors are never retained.
    """

    def __init__(self) -> None:
        self._names: list[str] = []
        self._leaves: list[Tensor] = []

    def watch(self, source: Tensor, name: str) -> Tensor:
        if name in self._names:
            raise ValueError(f"tape already watches a tensor named {name!r}")
        leaf = source.detach().requires_grad_(True)
        self._names.append(name)
        self._leaves.append(leaf)
        return leaf

    @property
    def watched(self) -> tuple[str, ...]:
        return tuple(self._names)

    def gradients(self, loss: Tensor) -> dict[str, Tensor]:
        if loss.numel() != 1:
            raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if not self._leaves:
            return {}
        grads = torch.autograd.grad(loss, self._leaves)
        return {name: g for name, g in zip(self._names, grads)}


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of [B, C_in, H, W] with [C_out, C_in, k, k] kernels."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D [B,C,H,W], got {tuple(x.shape)}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got {tuple(weight.shape)}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ValueError(
            f"conv2d: input channels {x.shape[1]} != weight in_channels {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(
            f"conv2d: bias length {tuple(bias.shape)} != out_channels {c_out}")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map over the trailing axis: x @ weight.T + bias."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(
            f"linear: trailing dimension {x.shape[-1]} != weight in_features {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ValueError(f"linear: bias length {tuple(bias.shape)} != out_features {d_out}")
    return F.linear(x, weight, bias)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-group normalization over [B, C, ...] followed by a per-channel affine."""
    if x.ndim < 2:
        raise ValueError(f"group_norm: input must be at least 2-D, got {tuple(x.shape)}")
    c = x.shape[1]
    if c % groups != 0:
        raise ValueError(f"group_norm: groups {groups} does not divide channels {c}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"group_norm: affine params must have shape ({c},), got "
            f"{tuple(gamma.shape)} and {tuple(beta.shape)}")
    if eps <= 0:
        raise ValueError("group_norm: eps must be > 0")
    return F.group_norm(x, groups, gamma, beta, eps)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over the M axis, heads concatenated.

    q: [B, N, d], k/v: [B, M, d]. Per-head scaling is 1/sqrt(d/heads).
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("attention: q, k, v must be 3-D [batch, tokens, dim]")
    b, n, d = q.shape
    if d % heads != 0:
        raise ValueError(f"attention: heads {heads} does not divide model dim {d}")
    if k.shape != v.shape:
        raise ValueError(f"attention: k shape {tuple(k.shape)} != v shape {tuple(v.shape)}")
    if k.shape[0] != b or k.shape[2] != d:
        raise ValueError(
            f"attention: k/v must be [{b}, M, {d}], got {tuple(k.shape)}")
    dh = d // heads
    qh = q.view(b, n, heads, dh).transpose(1, 2)
    kh = k.view(b, k.shape[1], heads, dh).transpose(1, 2)
    vh = v.view(b, v.shape[1], heads, dh).transpose(1, 2)
    out = F.scaled_dot_product_attention(qh, kh, vh)
    return out.transpose(1, 2).reshape(b, n, d)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def softmax(x: Tensor, axis: int) -> Tensor:
    return F.softmax(x, dim=axis)


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int, dtype: torch.dtype) -> Tensor:
    """[n_out, n_in] triangle-filter weights, half-pixel centers, rows sum to 1.

    On downscale the filter support widens by the scale factor (antialiasing);
    out-of-range taps are simply absent, so edge rows renormalize over the
    taps that exist.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (torch.arange(n_out, dtype=torch.float64) + 0.5) * scale
    pos = torch.arange(n_in, dtype=torch.float64) + 0.5
    w = (1.0 - (pos[None, :] - centers[:, None]).abs() / support).clamp(min=0.0)
    w = w / w.sum(dim=1, keepdim=True)
    return w.to(dtype)


def resize_bilinear_antialiased(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Triangle-filter resampling of the trailing two axes of x."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize: output size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2], x.shape[-1]
    if (out_h, out_w) == (h, w):
        return x.clone()
    mh = _resize_matrix(h, out_h, x.dtype)
    mw = _resize_matrix(w, out_w, x.dtype)
    lead = x.shape[:-2]
    y = x.reshape(-1, h, w)
    y = torch.einsum("oh,bhw,pw->bop", mh, y, mw)
    return y.reshape(*lead, out_h, out_w)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Runs in 64-bit; the analytic side comes from the tape, the numeric side
    from two-sided probing of every element of x.
    """
    if x.dtype != torch.float64:
        raise ValueError("grad_check requires a float64 tensor")
    x = x.detach().clone()
    tape = Tape()
    leaf = tape.watch(x, "x")
    analytic = tape.gradients(f(leaf))["x"].reshape(-1)

    flat = x.reshape(-1)
    numeric = torch.empty_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(
                f"grad_check: non-finite value while probing element {i}")
        numeric[i] = (hi - lo) / (2.0 * eps)
    rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8)
    return float(rel.max())


def sym_psd_sqrt(a: Tensor) -> Tensor:
    """Symmetric PSD square root via eigendecomposition: S @ S = a."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_psd_sqrt: input must be square, got {tuple(a.shape)}")
    asym = float((a - a.T).abs().max())
    if asym > 1e-6:
        raise ValueError(f"sym_psd_sqrt: input asymmetric by {asym:.3g} (tolerance 1e-6)")
    sym = (a + a.T) / 2
    evals, evecs = torch.linalg.eigh(sym)
    low = float(evals.min())
    if low < -1e-8 * max(1.0, float(evals.abs().max())):
        raise ValueError(f"sym_psd_sqrt: eigenvalue {low:.3g} below -1e-8, not PSD")
    root = evals.clamp(min=0.0).sqrt()
    return (evecs * root[None, :]) @ evecs.T
