"""Conditional latent denoiser and the text-to-query replacement schedule.

The denoiser works on the 63-dim scene latent viewed as 9 cell tokens of 7
channels, cross-attending to the condition tokens produced by the
BiTransformer. Conditioning starts mostly text-driven (Q_text output) and is
annealed towards the learned unconditional-query output (Q_uncond).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import synthdata as sd
from .errors import DimensionError, ScheduleError
from .layers import MLP, LayerNorm, Linear, MultiHeadAttention, sinusoidal_embedding
from .numerics import DTYPE, Rng, Tensor

CONTINUOUS = "continuous_mix"
BERNOULLI = "per_sample_bernoulli"


@dataclass
class GenerationConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1
    d_model: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    objective: str = "x0"  # "x0" (clean-latent regression) or "eps" (noise regression)
    clip_x0: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.objective not in ("eps", "x0"):
            raise ValueError(f"generation.objective must be 'eps' or 'x0', got {self.objective!r}")


class NoiseSchedule:
    """Variance-preserving forward process with a linear variance schedule, steps 1..T."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0 or (betas <= 0).any() or (betas >= 1).any():
            raise ScheduleError("betas must be a non-empty vector in (0, 1)")
        self.T = len(betas)
        # index 0 is the clean latent: alpha_bar[0] = 1
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-3, beta_end: float = 0.1) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T))

    @classmethod
    def from_config(cls, cfg: GenerationConfig) -> "NoiseSchedule":
        return cls.linear(cfg.T, cfg.beta_start, cfg.beta_end)

    def posterior(self, t: int) -> tuple[float, float, float]:
        """Coefficients (c_x0, c_xt, variance) of q(z_{t-1} | z_t, z_0)."""
        ab, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        c0 = math.sqrt(ab_prev) * self.betas[t] / (1 - ab)
        ct = math.sqrt(self.alphas[t]) * (1 - ab_prev) / (1 - ab)
        var = self.betas[t] * (1 - ab_prev) / (1 - ab)
        return c0, ct, var


def noise_latent(z0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps; t is an int or a (B,) tensor."""
    t = torch.as_tensor(t)
    if ((t < 1) | (t > sched.T)).any():
        raise ScheduleError(f"t must lie in [1, {sched.T}]")
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float64)[t]
    if ab.dim() == 1:
        ab = ab[:, None]
    return (torch.sqrt(ab) * z0.double() + torch.sqrt(1 - ab) * eps.double()).to(z0.dtype)


@dataclass
class ReplacementSchedule:
    total_steps: int
    initial_frac: float = 0.1
    progressive_frac: float = 0.7
    r_initial: float = 0.15
    r_progressive_end: float = 0.75
    r_final: float = 1.0
    mode: str = CONTINUOUS

    def __post_init__(self):
        if self.total_steps < 1:
            raise ScheduleError("total_steps must be >= 1")
        if self.initial_frac <= 0 or self.progressive_frac <= 0 or self.initial_frac + self.progressive_frac > 1:
            raise ScheduleError(
                f"stage fractions must be positive with sum <= 1, got {self.initial_frac}, {self.progressive_frac}")
        if not 0 <= self.r_initial <= self.r_progressive_end <= self.r_final <= 1:
            raise ScheduleError("replacement ratios must be non-decreasing within [0, 1]")
        if self.mode not in (CONTINUOUS, BERNOULLI):
            raise ScheduleError(f"unknown replacement mode {self.mode!r}")

    @property
    def boundaries(self) -> tuple[float, float]:
        a = self.initial_frac * self.total_steps
        return a, a + self.progressive_frac * self.total_steps


def replacement_ratio(step: int, sched: ReplacementSchedule) -> float:
    """r(step): flat, then linear, then a jump to the final ratio."""
    if not 0 <= step <= sched.total_steps:
        raise ScheduleError(f"step {step} outside [0, {sched.total_steps}]")
    a, b = sched.boundaries
    if step < a:
        return sched.r_initial
    if step < b:
        f = (step - a) / (b - a)
        return sched.r_initial * (1 - f) + sched.r_progressive_end * f
    return sched.r_final


def mixing_beta(step: int, sched: ReplacementSchedule) -> float:
    return 1.0 - replacement_ratio(step, sched)


def mix_condition(z_text: Tensor, z_query: Tensor, beta: float, mode: str = CONTINUOUS,
                  rng: Rng | None = None) -> Tensor:
    """beta * z_text + (1 - beta) * z_query, or per-sample selection of z_query with
    probability 1 - beta (leading axis = batch) in per_sample_bernoulli mode."""
    if z_text.shape != z_query.shape:
        raise DimensionError(f"condition shapes differ: {tuple(z_text.shape)} vs {tuple(z_query.shape)}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta {beta} outside [0, 1]")
    if mode == CONTINUOUS:
        if beta == 1.0:
            return z_text
        if beta == 0.0:
            return z_query
        return beta * z_text + (1 - beta) * z_query
    if mode == BERNOULLI:
        if rng is None:
            raise ValueError("per_sample_bernoulli mixing needs an rng")
        if z_text.dim() < 3:
            raise DimensionError("per_sample_bernoulli mixing needs a batch axis")
        use_query = torch.from_numpy(rng.uniform((z_text.shape[0],)) < (1.0 - beta))
        return torch.where(use_query[:, None, None], z_query, z_text)
    raise ValueError(f"unknown mixing mode {mode!r}")


class DenoiserBlock(nn.Module):
    def __init__(self, d: int, d_cond: int, n_heads: int, eps: float):
        super().__init__()
        self.ln_self = LayerNorm(d, eps)
        self.self_attn = MultiHeadAttention(d, n_heads)
        self.ln_cross = LayerNorm(d, eps)
        self.cross_attn = MultiHeadAttention(d, n_heads, d_kv=d_cond)
        self.ln_ff = LayerNorm(d, eps)
        self.ff = MLP(d, 4 * d)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln_self(x))
        x = x + self.cross_attn(self.ln_cross(x), cond)
        return x + self.ff(self.ln_ff(x))


class Denoiser(nn.Module):
    """(z_t, t, condition tokens) -> prediction with the latent's shape.

    Each latent cell is a token. The condition reaches the cells two ways:
    a linear map from the flattened condition to a per-cell offset (added at
    the input) and cross-attention in every block.
    """

    def __init__(self, cfg: GenerationConfig, d_cond: int, n_cond: int):
        super().__init__()
        self.cfg = cfg
        self.n_cond = n_cond
        d = cfg.d_model
        self.inp = Linear(sd.N_CHANNELS, d)
        self.cell_pos = nn.Parameter(torch.zeros(sd.N_CELLS, d, dtype=DTYPE))
        self.time_mlp = MLP(d, 2 * d)
        self.ln_cond = LayerNorm(d_cond, cfg.ln_eps)
        self.cond_proj = Linear(n_cond * d_cond, sd.N_CELLS * d)
        self.blocks = nn.ModuleList(DenoiserBlock(d, d_cond, cfg.n_heads, cfg.ln_eps) for _ in range(cfg.n_blocks))
        self.ln_out = LayerNorm(d, cfg.ln_eps)
        self.out = Linear(d, sd.N_CHANNELS)

    @property
    def objective(self) -> str:
        return self.cfg.objective

    def forward(self, z_t: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        if z_t.shape[-1] != sd.LATENT_DIM:
            raise DimensionError(f"latent width {z_t.shape[-1]} != {sd.LATENT_DIM}")
        if cond.shape[-2] != self.n_cond:
            raise DimensionError(f"expected {self.n_cond} condition tokens, got {cond.shape[-2]}")
        b = z_t.shape[0]
        c = self.ln_cond(cond)
        x = self.inp(z_t.reshape(b, sd.N_CELLS, sd.N_CHANNELS)) + self.cell_pos[None]
        x = x + self.cond_proj(c.reshape(b, -1)).reshape(b, sd.N_CELLS, -1)
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.d_model).to(z_t.dtype))
        x = x + temb[:, None, :]
        for block in self.blocks:
            x = block(x, c)
        return self.out(self.ln_out(x)).reshape(b, sd.LATENT_DIM)


def condition_tokens(model, hidden: Tensor, lengths: Tensor | None, bank: str) -> Tensor:
    """BiTransformer output for one query bank over conditioning hidden states."""
    return model.bit(model.queries[bank], model.down(hidden), lengths)


def gen_loss(model, z0: Tensor, hidden: Tensor, lengths: Tensor | None, step: int,
             replacement: ReplacementSchedule, noise: NoiseSchedule, rng: Rng,
             denoiser=None) -> tuple[Tensor, dict]:
    """Denoising loss with the condition mixed at the schedule's beta for ``step``.

    eps objective: mean (eps_hat - eps)^2. x0 objective: mean (z0_hat - z0)^2.
    """
    b = z0.shape[0]
    denoiser = model.denoiser if denoiser is None else denoiser
    t = torch.from_numpy(rng.integers(1, noise.T + 1, size=b))
    eps = rng.normal((b, sd.LATENT_DIM)).to(z0.dtype)
    z_t = noise_latent(z0, t, eps, noise)
    r = replacement_ratio(step, replacement)
    beta = 1.0 - r
    z_text = condition_tokens(model, hidden, lengths, "text") if beta > 0 or replacement.mode == BERNOULLI else None
    z_query = condition_tokens(model, hidden, lengths, "uncond") if beta < 1 else None
    if z_text is None:
        z_cond = z_query
    elif z_query is None:
        z_cond = z_text
    else:
        z_cond = mix_condition(z_text, z_query, beta, replacement.mode, rng)
    pred = denoiser(z_t, t, z_cond)
    target = eps if denoiser.objective == "eps" else z0
    loss = ((pred.double() - target.double()) ** 2).mean().to(z0.dtype)
    return loss, {"beta": beta, "r": r}


@torch.no_grad()
def sample_latent(denoiser, cond: Tensor, sched: NoiseSchedule, rng: Rng, objective: str = "eps",
                  clip: bool = True) -> Tensor:
    """Ancestral sampling from pure noise over T steps; cond is (B, N_q, D) -> (B, 63)."""
    b = cond.shape[0]
    z = rng.normal((b, sd.LATENT_DIM)).double()
    for t in range(sched.T, 0, -1):
        tt = torch.full((b,), t, dtype=torch.long)
        pred = denoiser(z.to(DTYPE), tt, cond).double()
        ab = sched.alpha_bar[t]
        if objective == "eps":
            x0 = (z - math.sqrt(1 - ab) * pred) / math.sqrt(ab)
        else:
            x0 = pred
        if clip:
            x0 = x0.clamp(0.0, 1.0)
        c0, ct, var = sched.posterior(t)
        z = c0 * x0 + ct * z
        if t > 1:
            z = z + math.sqrt(var) * rng.normal((b, sd.LATENT_DIM)).double()
    return z.to(DTYPE)


class OracleDenoiser:
    """Returns the exact noise (or clean latent) for known targets; used to check the sampler."""

    def __init__(self, z0: Tensor, sched: NoiseSchedule, objective: str = "eps"):
        self.z0 = z0.double()
        self.sched = sched
        self.objective = objective

    def __call__(self, z_t: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        if self.objective == "x0":
            return self.z0.to(DTYPE)
        ab = torch.as_tensor(self.sched.alpha_bar, dtype=torch.float64)[t][:, None]
        eps = (z_t.double() - torch.sqrt(ab) * self.z0) / torch.sqrt(1 - ab)
        return eps.to(DTYPE)


CATEGORIES = ("colors", "shapes", "counting", "position")


def score_generation(truth: list[sd.Scene], latents) -> dict:
    """Per-category accuracies.

    colors / shapes / position are per true object (an object must be detected
    in its cell; colors and shapes also need the attribute right); counting is
    per scene. overall is the mean of the four.
    """
    hits = {c: 0 for c in CATEGORIES}
    n_obj = 0
    for scene, z in zip(truth, latents):
        det = sd.classify_latent(np.asarray(z))
        found = {o.cell: o for o in det.objects}
        for o in scene.objects:
            n_obj += 1
            g = found.get(o.cell)
            if g is not None:
                hits["position"] += 1
                hits["colors"] += g.color == o.color
                hits["shapes"] += g.shape == o.shape
        hits["counting"] += det.count == len(scene.objects)
    report = {
        "colors": hits["colors"] / max(n_obj, 1),
        "shapes": hits["shapes"] / max(n_obj, 1),
        "position": hits["position"] / max(n_obj, 1),
        "counting": hits["counting"] / max(len(truth), 1),
    }
    report["overall"] = sum(report[c] for c in CATEGORIES) / len(CATEGORIES)
    return report


@torch.no_grad()
def eval_generation(model, scenes: list[sd.Scene], hidden: Tensor, lengths: Tensor | None, mode: str,
                    sched: NoiseSchedule, seed: int, denoiser=None, batch_size: int = 256) -> dict:
    """Condition on each scene's caption hidden states, sample, grade with classify_latent.

    mode "text" uses the Q_text BiTransformer output as the condition, "query_only"
    the Q_uncond output (the beta = 0 path).
    """
    if mode not in ("text", "query_only"):
        raise ValueError(f"unknown generation eval mode {mode!r}")
    bank = "text" if mode == "text" else "uncond"
    denoiser = model.denoiser if denoiser is None else denoiser
    rng = Rng(seed).child(f"eval-generation-{mode}")
    latents = []
    for i in range(0, len(scenes), batch_size):
        h = hidden[i:i + batch_size]
        ln = None if lengths is None else lengths[i:i + batch_size]
        cond = condition_tokens(model, h, ln, bank)
        den = denoiser
        if isinstance(denoiser, OracleDenoiser):
            den = OracleDenoiser(denoiser.z0[i:i + batch_size], sched, denoiser.objective)
        latents.append(sample_latent(den, cond, sched, rng, denoiser.objective, model.denoiser.cfg.clip_x0))
    z = torch.cat(latents).numpy()
    report = score_generation(scenes, z)
    return {"mode": mode, **report, "n_samples": len(scenes), "seed": seed}
