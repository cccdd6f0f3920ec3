"""Building blocks shared by the backbone, the BiTransformer and the denoiser."""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import DTYPE, Rng, Tensor, layer_norm, scaled_dot_product_attention

INIT_STD = 0.02
TAU_INIT = 0.07


class Linear(nn.Module):
    """Affine map x W^T + b that can carry a low-rank adapter (W + scale * B A)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None
        self.lora_A: nn.Parameter | None = None
        self.lora_B: nn.Parameter | None = None
        self.lora_scale = 0.0

    def effective_weight(self) -> Tensor:
        if self.lora_A is None:
            return self.weight
        return self.weight + self.lora_scale * (self.lora_B @ self.lora_A)

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.effective_weight().t()
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_kv: int | None = None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"width {d_model} not divisible by {n_heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model)
        self.k = Linear(d_kv, d_model)
        self.v = Linear(d_kv, d_model)
        self.o = Linear(d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x: Tensor, kv: Tensor | None = None, mask: Tensor | None = None) -> Tensor:
        """x: (B, L_q, D); kv: (B, L_k, D_kv), defaults to x. mask: (L_q, L_k) or (B, H, L_q, L_k)."""
        kv = x if kv is None else kv
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        out = scaled_dot_product_attention(q, k, v, mask)
        b, h, n, dh = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, h * dh))


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc = Linear(d, hidden)
        self.proj = Linear(hidden, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(torch.nn.functional.gelu(self.fc(x)))


class CausalBlock(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, d: int, n_heads: int, eps: float = 1e-5):
        super().__init__()
        self.ln1 = LayerNorm(d, eps)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = LayerNorm(d, eps)
        self.mlp = MLP(d, 4 * d)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


def sinusoidal_embedding(t: Tensor, dim: int, max_period: float = 10_000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(DTYPE)


def init_parameters(module: nn.Module, rng: Rng, prefix: str = "") -> None:
    """Deterministic init keyed by parameter name, independent of registration order.

    2-D weights, embeddings and query banks ~ N(0, 0.02^2); biases 0; layer-norm
    gains 1; log_tau = log 0.07. Adapter matrices are left alone.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "lora_" in name:
                continue
            full = prefix + name
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf == "log_tau":
                p.fill_(math.log(TAU_INIT))
            elif leaf == "bias" or p.dim() < 2:
                p.zero_()
            else:
                p.copy_(rng.child(full).normal(tuple(p.shape), INIT_STD))

