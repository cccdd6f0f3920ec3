"""Tensor kernels, the seeded generator, and the finite-difference gradient oracle.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. The kernels here add the explicit shape and mask checks the
rest of the package relies on, and do their reductions in float64.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable

import numpy as np
import torch

from .errors import DimensionError, MaskError, NumericError

Tensor = torch.Tensor
DTYPE = torch.float32


class Rng:
    """Seeded, splittable PCG64 stream.

    Children are derived from (seed, name) through numpy's SeedSequence spawn
    keys, so ``Rng(7).child("data")`` is the same stream on every platform no
    matter what the parent has already drawn.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(name.encode()),))

    # draws -----------------------------------------------------------------
    def normal(self, shape, std: float = 1.0) -> Tensor:
        x = self._gen.standard_normal(size=tuple(shape), dtype=np.float32)
        if std != 1.0:
            x = x * np.float32(std)
        return torch.from_numpy(np.ascontiguousarray(x))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None):
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())

    # checkpointing ---------------------------------------------------------
    def get_state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng


def _check_finite(x: Tensor, what: str) -> None:
    if torch.isnan(x).any():
        raise NumericError(f"NaN in {what}")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction; reductions in float64."""
    if x.dim() < 1:
        raise DimensionError("softmax_rows needs at least one axis")
    _check_finite(x, "softmax input")
    x64 = x.double()
    shifted = x64 - x64.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return (e / e.sum(dim=-1, keepdim=True)).to(x.dtype)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},), got {tuple(gain.shape)}, {tuple(bias.shape)}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x64 = x.double()
    mean = x64.mean(dim=-1, keepdim=True)
    centered = x64 - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = (centered / torch.sqrt(var + eps)).to(x.dtype)
    return y * gain + bias


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(D) + mask) v over the last two axes.

    Leading (batch/head) axes of q, k, v must match exactly. ``mask`` holds 0
    for visible and -inf for blocked entries; it is either the full score
    shape or a single (L_q, L_k) matrix shared by every leading index.
    """
    if q.dim() < 2 or k.dim() != q.dim() or v.dim() != q.dim():
        raise DimensionError(f"attention rank mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d:
        raise DimensionError(f"attention key width {k.shape[-1]} does not match query width {d}")
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    if mask is not None:
        lq, lk = scores.shape[-2:]
        if mask.shape != scores.shape and mask.shape != (lq, lk):
            raise DimensionError(f"mask shape {tuple(mask.shape)} fits neither {tuple(scores.shape)} nor ({lq}, {lk})")
        if torch.isneginf(mask).all(dim=-1).any():
            raise MaskError("a mask row blocks every key")
        scores = scores + mask
    return softmax_rows(scores) @ v


def causal_mask(n: int, dtype=DTYPE) -> Tensor:
    return torch.triu(torch.full((n, n), float("-inf"), dtype=dtype), diagonal=1)


def key_padding_mask(lengths: Tensor, n_queries: int, n_keys: int, dtype=DTYPE) -> Tensor:
    """(B, 1, L_q, L_k) additive mask blocking keys at positions >= lengths[b]."""
    pos = torch.arange(n_keys)
    blocked = pos[None, :] >= lengths[:, None]
    m = torch.zeros(blocked.shape, dtype=dtype).masked_fill(blocked, float("-inf"))
    return m[:, None, None, :].expand(-1, 1, n_queries, n_keys)


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a time.

    Test-only oracle; evaluates ``f`` under no_grad on perturbed copies of x.
    """
    base = x.detach().clone().contiguous()
    flat = base.reshape(-1)
    grad = torch.zeros(flat.numel(), dtype=torch.float64)

    def evaluate(point: Tensor) -> float:
        with torch.no_grad():
            val = f(point)
        val = float(val)
        if not math.isfinite(val):
            raise NumericError(f"non-finite function value {val} during finite differences")
        return val

    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape).to(x.dtype)


def gradient_error(analytic: Tensor, numeric: Tensor, atol: float = 1e-4, rtol: float = 1e-3) -> tuple[float, bool]:
    """Worst relative error, and whether every entry is within max(atol, rtol*|numeric|)."""
    a = analytic.detach().double()
    n = numeric.detach().double()
    diff = (a - n).abs()
    bound = torch.clamp(rtol * n.abs(), min=atol)
    rel = (diff / n.abs().clamp(min=atol)).max().item() if diff.numel() else 0.0
    return rel, bool((diff <= bound).all())
