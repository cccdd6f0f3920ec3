"""Dual-path retrieval head: BiTransformer path + direct pooled path, sigmoid-weighted fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bitransformer import AttentionPool
from .errors import DegenerateEmbeddingError, DimensionError, LossError
from .layers import TAU_INIT
from .numerics import DTYPE, Tensor

MODALITIES = ("img", "text")


@dataclass
class RetrievalConfig:
    tau_init: float = TAU_INIT
    tau_min: float = 0.01
    tau_max: float = 1.0


class FusionHead(nn.Module):
    def __init__(self, d_bit: int, cfg: RetrievalConfig | None = None):
        super().__init__()
        self.cfg = cfg or RetrievalConfig()
        self.alpha_img = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.alpha_text = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.pool_bit_img = AttentionPool(d_bit)
        self.pool_bit_text = AttentionPool(d_bit)
        self.pool_llm_img = AttentionPool(d_bit)
        self.pool_llm_text = AttentionPool(d_bit)
        self.log_tau = nn.Parameter(torch.tensor(math.log(self.cfg.tau_init), dtype=DTYPE))

    def alpha(self, modality: str) -> Tensor:
        return self.alpha_img if modality == "img" else self.alpha_text

    def pools(self, modality: str) -> tuple[AttentionPool, AttentionPool]:
        if modality == "img":
            return self.pool_bit_img, self.pool_llm_img
        return self.pool_bit_text, self.pool_llm_text

    def tau(self) -> Tensor:
        return torch.exp(self.log_tau)

    @torch.no_grad()
    def clamp_tau(self) -> None:
        self.log_tau.clamp_(math.log(self.cfg.tau_min), math.log(self.cfg.tau_max))


def encode(model, modality: str, hidden: Tensor, lengths: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Backbone hidden states (B, L, D_emb) -> (e_bit, e_llm), each (B, D_bit).

    ``model`` needs ``down``, ``bit``, ``queries`` and ``fusion`` (see model.OmniBridge).
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    if hidden.shape[-2] == 0:
        raise DimensionError("encode needs non-empty hidden states")
    kv = model.down(hidden)
    pool_bit, pool_llm = model.fusion.pools(modality)
    z = model.bit(model.queries[modality], kv, lengths)
    return pool_bit(z), pool_llm(kv, lengths)


def fuse(e_bit: Tensor, e_llm: Tensor, alpha: Tensor | float) -> Tensor:
    """sigma(alpha) e_bit + (1 - sigma(alpha)) e_llm, L2-normalised along the last axis."""
    if e_bit.shape != e_llm.shape:
        raise DimensionError(f"path embeddings differ in shape: {tuple(e_bit.shape)} vs {tuple(e_llm.shape)}")
    w = torch.sigmoid(torch.as_tensor(alpha, dtype=e_bit.dtype))
    e = w * e_bit + (1 - w) * e_llm
    norm = torch.linalg.vector_norm(e.double(), dim=-1, keepdim=True)
    if (norm < 1e-12).any():
        raise DegenerateEmbeddingError("fused embedding has (near-)zero norm")
    return e / norm.to(e.dtype)


def embed(model, modality: str, hidden: Tensor, lengths: Tensor | None = None) -> Tensor:
    e_bit, e_llm = encode(model, modality, hidden, lengths)
    return fuse(e_bit, e_llm, model.fusion.alpha(modality))


def info_nce_loss(e_img: Tensor, e_text: Tensor, tau: Tensor | float) -> Tensor:
    """Symmetric in-batch InfoNCE; row i of each matrix is a positive pair."""
    if e_img.shape != e_text.shape or e_img.dim() != 2:
        raise DimensionError(f"embedding matrices must match: {tuple(e_img.shape)} vs {tuple(e_text.shape)}")
    n = e_img.shape[0]
    if n == 0:
        raise LossError("info_nce_loss needs at least one pair")
    s = (e_img.double() @ e_text.double().t()) / torch.as_tensor(tau, dtype=torch.float64)
    idx = torch.arange(n)
    i2t = -torch.log_softmax(s, dim=1)[idx, idx].mean()
    t2i = -torch.log_softmax(s, dim=0)[idx, idx].mean()
    return (0.5 * (i2t + t2i)).to(e_img.dtype)


def recall_from_similarity(sim, truth, k: int) -> float:
    """Fraction of rows whose true column ranks within the top k; ties go to the lower index."""
    s = np.asarray(sim.detach().double() if isinstance(sim, Tensor) else sim, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    m, g = s.shape
    if not 1 <= k <= g:
        raise ValueError(f"k={k} outside [1, {g}]")
    if truth.shape != (m,) or (truth < 0).any() or (truth >= g).any():
        raise IndexError("truth index out of range")
    target = s[np.arange(m), truth][:, None]
    cols = np.arange(g)[None, :]
    ahead = (s > target) | ((s == target) & (cols < truth[:, None]))
    rank = ahead.sum(axis=1)
    return float((rank < k).mean())


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a = a.double()
    b = b.double()
    a = a / torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    b = b / torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    return a @ b.t()


def recall_at_k(e_query: Tensor, e_gallery: Tensor, truth, k: int) -> float:
    return recall_from_similarity(cosine_similarity(e_query, e_gallery), truth, k)


def recall_report(e_img: Tensor, e_text: Tensor, e_text_short: Tensor, ks=(1, 5, 10)) -> dict:
    """R@k for image->text, text->image and short-text->long-text; pairs share row index."""
    n = e_img.shape[0]
    truth = np.arange(n)
    blocks = {
        "i2t": cosine_similarity(e_img, e_text),
        "t2i": cosine_similarity(e_text, e_img),
        "t2t": cosine_similarity(e_text_short, e_text),
    }
    return {
        name: {f"R@{k}": recall_from_similarity(sim, truth, min(k, n)) for k in ks}
        for name, sim in blocks.items()
    }
