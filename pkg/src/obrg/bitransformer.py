"""Query-token transformer with sparse cross-attention into backbone hidden states."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, DimensionError, SequenceError
from .layers import MLP, LayerNorm, Linear, MultiHeadAttention
from .numerics import DTYPE, Tensor, causal_mask, key_padding_mask, softmax_rows


@dataclass
class BiTConfig:
    n_layers: int = 6
    d_bit: int = 32
    n_heads: int = 4
    cross_attn_layers: tuple[int, ...] = (0, 2, 4)
    causal: bool = False  # unidirectional ablation
    n_q_img: int = 8
    n_q_text: int = 8
    n_q_gen: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.cross_attn_layers = tuple(sorted(set(int(i) for i in self.cross_attn_layers)))
        if any(not 0 <= i < self.n_layers for i in self.cross_attn_layers):
            raise ConfigError(f"cross_attn_layers {self.cross_attn_layers} outside [0, {self.n_layers})")
        if self.n_q_text != self.n_q_gen:
            raise ConfigError(f"n_q_text ({self.n_q_text}) and n_q_gen ({self.n_q_gen}) must match: "
                              "text and query conditions are mixed elementwise")
        if self.d_bit % self.n_heads:
            raise ConfigError(f"bitransformer.d_bit={self.d_bit} not divisible by n_heads={self.n_heads}")


class DownProjection(Linear):
    """Rowwise affine map from backbone width to BiTransformer width."""

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d_in:
            raise DimensionError(f"hidden width {h.shape[-1]} != {self.d_in}")
        return super().forward(h)


class QueryBank(nn.Module):
    def __init__(self, cfg: BiTConfig):
        super().__init__()
        self.img = nn.Parameter(torch.zeros(cfg.n_q_img, cfg.d_bit, dtype=DTYPE))
        self.text = nn.Parameter(torch.zeros(cfg.n_q_text, cfg.d_bit, dtype=DTYPE))
        self.uncond = nn.Parameter(torch.zeros(cfg.n_q_gen, cfg.d_bit, dtype=DTYPE))
        # per-row positions shared by all banks
        n = max(cfg.n_q_img, cfg.n_q_text, cfg.n_q_gen)
        self.position = nn.Parameter(torch.zeros(n, cfg.d_bit, dtype=DTYPE))

    def __getitem__(self, name: str) -> Tensor:
        q = {"img": self.img, "text": self.text, "uncond": self.uncond}[name]
        return q + self.position[: q.shape[0]]


class BiTLayer(nn.Module):
    def __init__(self, cfg: BiTConfig, cross: bool):
        super().__init__()
        d = cfg.d_bit
        self.ln_self = LayerNorm(d, cfg.ln_eps)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads)
        self.cross = cross
        if cross:
            self.ln_cross = LayerNorm(d, cfg.ln_eps)
            self.ln_kv = LayerNorm(d, cfg.ln_eps)
            self.cross_attn = MultiHeadAttention(d, cfg.n_heads)
        self.ln_ff = LayerNorm(d, cfg.ln_eps)
        self.ff = MLP(d, 4 * d)

    def forward(self, x, kv, self_mask, kv_mask, trace=None):
        x = x + self.self_attn(self.ln_self(x), mask=self_mask)
        if trace is not None:
            trace.append(x)
        if self.cross:
            x = x + self.cross_attn(self.ln_cross(x), self.ln_kv(kv), mask=kv_mask)
        return x + self.ff(self.ln_ff(x))


class BiTransformer(nn.Module):
    def __init__(self, cfg: BiTConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(BiTLayer(cfg, i in cfg.cross_attn_layers) for i in range(cfg.n_layers))
        self.ln_out = LayerNorm(cfg.d_bit, cfg.ln_eps)

    def forward(self, queries: Tensor, kv: Tensor, kv_lengths: Tensor | None = None,
                trace: list | None = None) -> Tensor:
        """queries (B, N_q, D) or (N_q, D); kv (B, L, D) or (L, D).

        A 2-D query bank is shared across a 3-D kv batch. ``kv_lengths`` masks
        right padding in kv. ``trace`` collects each layer's post-self-attention state.
        """
        single = kv.dim() == 2
        if single:
            kv = kv[None]
        if kv.shape[1] == 0:
            raise SequenceError("bit_forward needs at least one key/value row")
        b = kv.shape[0]
        x = queries if queries.dim() == 3 else queries[None].expand(b, -1, -1)
        if x.shape[0] != b or x.shape[-1] != kv.shape[-1]:
            raise DimensionError(f"queries {tuple(x.shape)} incompatible with kv {tuple(kv.shape)}")
        n_q = x.shape[1]
        self_mask = causal_mask(n_q, x.dtype) if self.cfg.causal else None
        kv_mask = None
        if kv_lengths is not None:
            kv_mask = key_padding_mask(kv_lengths, n_q, kv.shape[1], x.dtype).expand(
                b, self.cfg.n_heads, n_q, kv.shape[1])
        for layer in self.layers:
            x = layer(x, kv, self_mask, kv_mask, trace)
        out = self.ln_out(x)
        return out[0] if single else out


def bit_forward(bit: BiTransformer, queries: Tensor, kv: Tensor, kv_lengths: Tensor | None = None) -> Tensor:
    return bit(queries, kv, kv_lengths)


class AttentionPool(nn.Module):
    """softmax(tokens . q_p / sqrt(D)) weighted sum of token rows."""

    def __init__(self, d: int):
        super().__init__()
        self.probe = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, tokens: Tensor, lengths: Tensor | None = None) -> Tensor:
        return attention_pool(tokens, self.probe, lengths)


def attention_pool(tokens: Tensor, probe: Tensor, lengths: Tensor | None = None) -> Tensor:
    """tokens (N, D) -> (D,), or (B, N, D) -> (B, D) with optional right-padding lengths."""
    if tokens.shape[-2] == 0:
        raise SequenceError("attention_pool needs at least one token")
    if probe.shape != (tokens.shape[-1],):
        raise DimensionError(f"probe {tuple(probe.shape)} does not match token width {tokens.shape[-1]}")
    scores = tokens @ probe / math.sqrt(tokens.shape[-1])
    if lengths is not None:
        pos = torch.arange(tokens.shape[-2])
        scores = scores.masked_fill(pos[None, :] >= lengths[:, None], float("-inf"))
    w = softmax_rows(scores)
    return (w[..., None] * tokens).sum(dim=-2)

