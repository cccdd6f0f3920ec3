"""Small causal transformer over interleaved token / visual-feature sequences."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import torch
from torch import nn

from . import synthdata as sd
from .errors import ConfigError, LossError, SequenceError
from .layers import CausalBlock, LayerNorm, Linear
from .numerics import DTYPE, Rng, Tensor, causal_mask


@dataclass
class BackboneConfig:
    vocab_size: int = len(sd.VOCAB)
    d_emb: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 128
    d_vis: int = sd.D_VIS
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ConfigError(f"backbone.d_emb={self.d_emb} not divisible by n_heads={self.n_heads}")


@dataclass
class VisualSpan:
    start: int
    features: Tensor  # (P, D_vis)


@dataclass
class MultimodalSequence:
    """token_ids has one entry per position; visual positions hold <pad> placeholders.

    context_len counts the leading positions that are conditioning only.
    """

    token_ids: list[int]
    visual_spans: list[VisualSpan] = field(default_factory=list)
    context_len: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)

    def validate(self, cfg: BackboneConfig | None = None) -> None:
        n = len(self.token_ids)
        if n == 0:
            raise SequenceError("empty sequence")
        covered: set[int] = set()
        for span in self.visual_spans:
            p = span.features.shape[0]
            if span.start < 0 or span.start + p > n:
                raise SequenceError(f"visual span [{span.start}, {span.start + p}) overflows length {n}")
            rows = set(range(span.start, span.start + p))
            if rows & covered:
                raise SequenceError(f"visual span at {span.start} overlaps another span")
            covered |= rows
            if cfg is not None and span.features.shape[1] != cfg.d_vis:
                raise SequenceError(f"visual features width {span.features.shape[1]} != d_vis {cfg.d_vis}")
        if not 0 <= self.context_len < n:
            raise SequenceError(f"context_len {self.context_len} outside [0, {n})")
        if cfg is not None:
            if n > cfg.max_len:
                raise SequenceError(f"sequence length {n} exceeds max_len {cfg.max_len}")
            bad = [t for t in self.token_ids if not 0 <= t < cfg.vocab_size]
            if bad:
                raise SequenceError(f"token ids out of range: {bad[:5]}")


@dataclass
class Batch:
    tokens: Tensor  # (B, L) long
    visual: Tensor  # (B, L, D_vis)
    visual_mask: Tensor  # (B, L) bool
    lengths: Tensor  # (B,) long
    context_lens: Tensor  # (B,) long

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(seqs: list[MultimodalSequence], cfg: BackboneConfig) -> Batch:
    """Right-pad to the longest sequence. Causal attention makes padding invisible to real positions."""
    for s in seqs:
        s.validate(cfg)
    width = max(len(s) for s in seqs)
    b = len(seqs)
    tokens = torch.full((b, width), sd.PAD, dtype=torch.long)
    visual = torch.zeros(b, width, cfg.d_vis, dtype=DTYPE)
    vmask = torch.zeros(b, width, dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.tensor(s.token_ids, dtype=torch.long)
        for span in s.visual_spans:
            p = span.features.shape[0]
            visual[i, span.start : span.start + p] = span.features
            vmask[i, span.start : span.start + p] = True
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    ctx = torch.tensor([s.context_len for s in seqs], dtype=torch.long)
    return Batch(tokens, visual, vmask, lengths, ctx)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, cfg.d_emb, dtype=DTYPE))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.d_emb, dtype=DTYPE))
        self.vis_proj = Linear(cfg.d_vis, cfg.d_emb)
        self.blocks = nn.ModuleList(CausalBlock(cfg.d_emb, cfg.n_heads, cfg.ln_eps) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_emb, cfg.ln_eps)
        self.lm_head = Linear(cfg.d_emb, cfg.vocab_size)

    def embed(self, batch: Batch, add_positions: bool = True) -> Tensor:
        tok = self.tok_emb[batch.tokens]
        vis = self.vis_proj(batch.visual)
        x = torch.where(batch.visual_mask[..., None], vis, tok)
        if add_positions:
            x = x + self.pos_emb[: x.shape[1]][None]
        return x

    def embed_sequence(self, seq: MultimodalSequence, add_positions: bool = True) -> Tensor:
        return self.embed(collate([seq], self.cfg), add_positions)[0]

    def forward_causal(self, emb: Tensor) -> tuple[Tensor, Tensor]:
        """emb (B, L, D) or (L, D) -> (final hidden states, logits), same leading shape."""
        single = emb.dim() == 2
        x = emb[None] if single else emb
        n = x.shape[1]
        if n > self.cfg.max_len:
            raise SequenceError(f"length {n} exceeds max_len {self.cfg.max_len}")
        mask = causal_mask(n, x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        h = self.ln_f(x)
        logits = self.lm_head(h)
        return (h[0], logits[0]) if single else (h, logits)

    def forward(self, batch: Batch) -> tuple[Tensor, Tensor]:
        return self.forward_causal(self.embed(batch))


def prediction_mask(batch: Batch) -> Tensor:
    """(B, L) bool: logits row p is scored iff context_len - 1 <= p <= length - 2.

    Row p predicts token p + 1, so this is the window of predicted tokens
    context_len .. length - 1 (0-indexed).
    """
    pos = torch.arange(batch.tokens.shape[1])[None, :]
    return (pos >= (batch.context_lens[:, None] - 1)) & (pos <= batch.lengths[:, None] - 2)


def autoregressive_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean next-token negative log-likelihood over every scored position in the batch."""
    if logits.dim() == 2:
        logits = logits[None]
    if batch.context_lens.min().item() < 1:
        raise LossError("context_len must be >= 1: the first token has no prediction")
    mask = prediction_mask(batch)
    if not mask.any():
        raise LossError("empty prediction window")
    targets = torch.roll(batch.tokens, shifts=-1, dims=1)
    logp = torch.log_softmax(logits.double(), dim=-1)
    nll = -logp.gather(-1, targets[..., None])[..., 0]
    return (nll * mask).sum().to(logits.dtype) / mask.sum()


def sequence_loss(backbone: Backbone, seq: MultimodalSequence) -> Tensor:
    batch = collate([seq], backbone.cfg)
    _, logits = backbone(batch)
    return autoregressive_loss(logits, batch)


@torch.no_grad()
def generate_tokens(backbone: Backbone, prefixes: list[MultimodalSequence] | MultimodalSequence,
                    max_new: int) -> list[int] | list[list[int]]:
    """Greedy decoding; each sequence stops at <eos> (not returned) or after max_new tokens.

    Prefixes in one call must share a length. A prefix ending in <eos> yields [].
    """
    single = isinstance(prefixes, MultimodalSequence)
    seqs = [prefixes] if single else list(prefixes)
    n0 = len(seqs[0])
    if any(len(s) != n0 for s in seqs):
        raise SequenceError("batched generation needs equal-length prefixes")
    if n0 + max_new > backbone.cfg.max_len:
        raise SequenceError(f"prefix {n0} + max_new {max_new} exceeds max_len {backbone.cfg.max_len}")
    batch = collate(seqs, backbone.cfg)
    x = backbone.embed(batch, add_positions=False)
    out: list[list[int]] = [[] for _ in seqs]
    done = [s.token_ids[-1] == sd.EOS for s in seqs]
    for _ in range(max_new):
        if all(done):
            break
        n = x.shape[1]
        _, logits = backbone.forward_causal(x + backbone.pos_emb[:n][None])
        nxt = logits[:, -1].argmax(dim=-1)
        for i, t in enumerate(nxt.tolist()):
            if done[i]:
                continue
            if t == sd.EOS:
                done[i] = True
            else:
                out[i].append(t)
        x = torch.cat([x, backbone.tok_emb[nxt][:, None]], dim=1)
    return out[0] if single else out


class LowRankAdapter:
    """Handle for low-rank adapters attached to a set of Linear layers."""

    def __init__(self, layers: dict[str, Linear]):
        self.layers = layers

    def parameters(self) -> list[nn.Parameter]:
        return [p for lin in self.layers.values() for p in (lin.lora_A, lin.lora_B)]

    def named_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for name, lin in self.layers.items():
            out[f"{name}.lora_A"] = lin.lora_A
            out[f"{name}.lora_B"] = lin.lora_B
        return out

    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def merge(self) -> None:
        """Fold scale*B*A into W, then drop the adapters."""
        for lin in self.layers.values():
            lin.weight.copy_(lin.effective_weight())
        self.remove()

    def remove(self) -> None:
        for lin in self.layers.values():
            lin.lora_A = None
            lin.lora_B = None
            lin.lora_scale = 0.0
            lin.weight.requires_grad_(True)
        self.layers = {}


def adapt_low_rank(model: nn.Module, targets: list[str], r: int, scale: float, rng: Rng) -> LowRankAdapter:
    """Attach adapters to every Linear whose weight name matches one of ``targets`` (fnmatch).

    A ~ N(0, 1/r), B = 0, so the adapted model starts bit-identical to the base.
    Base weights stop requiring grad while the adapter is attached.
    """
    matched: dict[str, Linear] = {}
    for name, mod in model.named_modules():
        if isinstance(mod, Linear) and any(fnmatch.fnmatchcase(f"{name}.weight", pat) for pat in targets):
            matched[name] = mod
    if not matched:
        raise ConfigError(f"adapter targets {targets} match no 2-D weight")
    for name, lin in sorted(matched.items()):
        a = rng.child(name).normal((r, lin.d_in), std=1.0 / r)
        lin.lora_A = nn.Parameter(a)
        lin.lora_B = nn.Parameter(torch.zeros(lin.d_out, r, dtype=DTYPE))
        lin.lora_scale = float(scale)
        lin.weight.requires_grad_(False)
    return LowRankAdapter(matched)


# sequence builders ----------------------------------------------------------

def _image_block(scene: sd.Scene, featurizer_seed: int) -> tuple[list[int], VisualSpan]:
    feats = sd.scene_features(scene, featurizer_seed)
    return [sd.PAD] * sd.N_CELLS, VisualSpan(1, feats)


def caption_sequence(scene: sd.Scene, featurizer_seed: int = 0, with_target: bool = True) -> MultimodalSequence:
    """<bos> [image] <caption> long-caption <eos>; context = everything up to <caption>."""
    vis_tokens, span = _image_block(scene, featurizer_seed)
    prefix = [sd.BOS] + vis_tokens + [sd.TASK_CAPTION]
    tokens = prefix + (sd.caption_of(scene, "long") + [sd.EOS] if with_target else [])
    return MultimodalSequence(tokens, [span], len(prefix) if with_target else 0)


def edit_sequence(scene: sd.Scene, edit: sd.Edit, featurizer_seed: int = 0) -> MultimodalSequence:
    """<bos> [image] <edit> instruction <sep> post-edit long caption <eos>."""
    vis_tokens, span = _image_block(scene, featurizer_seed)
    prefix = [sd.BOS] + vis_tokens + [sd.TASK_EDIT] + sd.edit_instruction(scene, edit) + [sd.SEP]
    target = sd.rewrite_caption(sd.caption_of(sd.apply_edit(scene, edit), "long"))
    return MultimodalSequence(prefix + target + [sd.EOS], [span], len(prefix))


def generation_sequence(caption: list[int]) -> MultimodalSequence:
    """<bos> <gen> prompt <sep> <img> rewritten prompt </img> <eos>."""
    prefix = [sd.BOS, sd.TASK_GEN] + list(caption) + [sd.SEP]
    target = [sd.IMG_OPEN] + sd.rewrite_caption(caption) + [sd.IMG_CLOSE, sd.EOS]
    return MultimodalSequence(prefix + target, [], len(prefix))


def conditioning_sequence(caption: list[int]) -> MultimodalSequence:
    """Generation-conditioning text: <bos> <img> caption </img>."""
    return MultimodalSequence([sd.BOS, sd.IMG_OPEN] + list(caption) + [sd.IMG_CLOSE])


def text_retrieval_sequence(caption: list[int]) -> MultimodalSequence:
    """Retrieval text carries no <img> markup: <bos> caption <eos>."""
    return MultimodalSequence([sd.BOS] + list(caption) + [sd.EOS])


def image_retrieval_sequence(scene: sd.Scene, featurizer_seed: int = 0) -> MultimodalSequence:
    vis_tokens, span = _image_block(scene, featurizer_seed)
    return MultimodalSequence([sd.BOS] + vis_tokens + [sd.EOS], [span])

