"""Invariant suites behind ``obrg verify``.

Each suite returns ``{"suite", "passed", "checks": [...]}`` where every check
records a name, a pass flag and whatever numbers justify it.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import synthdata as sd
from .backbone import Backbone, BackboneConfig, MultimodalSequence, VisualSpan, autoregressive_loss, collate
from .config import parse_config
from .generation import (
    NoiseSchedule, ReplacementSchedule, gen_loss, mix_condition, mixing_beta, replacement_ratio,
)
from .layers import LayerNorm, MultiHeadAttention, init_parameters
from .model import ALIGNMENT_GROUPS, build_model
from .numerics import Rng, finite_difference_gradient, gradient_error, layer_norm, scaled_dot_product_attention
from .retrieval import embed, info_nce_loss
from .trainer import load_model_state, run_stage1, run_stage2

SUITES = ("grad", "freeze", "schedule", "oracle")
# both gradient routes run in float64, where h = 1e-4 keeps truncation error
# well below tolerance without cancellation noise
FD_STEP = 1e-4


def _check(name: str, passed: bool, **info) -> dict:
    return {"name": name, "passed": bool(passed), **info}


def _summary(suite: str, checks: list[dict], t0: float) -> dict:
    return {"suite": suite, "passed": all(c["passed"] for c in checks), "checks": checks,
            "seconds": round(time.perf_counter() - t0, 2)}


# grad -------------------------------------------------------------------------

def tiny_config(**extra):
    """Small dimensions for finite-difference checks and quick end-to-end runs."""
    overrides = {
        "backbone.d_emb": "8", "backbone.n_layers": "1", "backbone.n_heads": "2",
        "bitransformer.n_layers": "2", "bitransformer.d_bit": "8", "bitransformer.n_heads": "2",
        "bitransformer.cross_attn_layers": "(0,)", "bitransformer.n_q_img": "2",
        "bitransformer.n_q_text": "2", "bitransformer.n_q_gen": "2",
        "generation.d_model": "8", "generation.n_blocks": "1", "generation.n_heads": "2", "generation.T": "10",
    }
    overrides.update({k: str(v) for k, v in extra.items()})
    return parse_config("", overrides)


def param_gradient_check(loss_fn, params: dict[str, torch.nn.Parameter], max_entries: int = 24,
                         h: float = FD_STEP) -> dict:
    """Autograd vs central differences for each named parameter (float64).

    At most ``max_entries`` coordinates per tensor are compared, chosen by a
    fixed stride so the check stays cheap.
    """
    worst, ok = 0.0, True
    for name, p in params.items():
        for q in params.values():
            q.grad = None
        loss_fn().backward()
        analytic = p.grad.detach().clone().reshape(-1)
        keep = torch.arange(0, p.numel(), max(1, p.numel() // max_entries))[:max_entries]
        saved = p.detach().clone()
        flat_saved = saved.reshape(-1)

        def f(sub):
            with torch.no_grad():
                full = flat_saved.clone()
                full[keep] = sub
                p.copy_(full.reshape(p.shape))
                return loss_fn()

        numeric = finite_difference_gradient(f, flat_saved[keep].clone(), h)
        with torch.no_grad():
            p.copy_(saved)
        err, good = gradient_error(analytic[keep], numeric)
        worst = max(worst, err)
        ok = ok and good
    return {"max_rel_error": worst, "passed": ok}


def _grad_attention() -> dict:
    rng = Rng(11).child("grad-attention")
    q, k, v = (rng.normal((2, 3, 4)).double().requires_grad_() for _ in range(3))
    w = rng.normal((2, 3, 4)).double()
    mask = torch.zeros(3, 3, dtype=torch.float64)
    mask[0, 2] = float("-inf")
    params = {"q": q, "k": k, "v": v}
    res = param_gradient_check(lambda: (scaled_dot_product_attention(q, k, v, mask) * w).sum(), params)
    mha = MultiHeadAttention(8, 2).double()
    x = rng.normal((2, 3, 8)).double()
    res2 = param_gradient_check(lambda: (mha(x) * x).sum(), dict(mha.named_parameters()))
    return {"max_rel_error": max(res["max_rel_error"], res2["max_rel_error"]),
            "passed": res["passed"] and res2["passed"]}


def _grad_layer_norm() -> dict:
    rng = Rng(11).child("grad-layer-norm")
    x = rng.normal((3, 5)).double().requires_grad_()
    ln = LayerNorm(5).double()
    with torch.no_grad():
        ln.gain.copy_(1 + 0.1 * rng.normal((5,)).double())
        ln.bias.copy_(0.1 * rng.normal((5,)).double())
    w = rng.normal((3, 5)).double()
    return param_gradient_check(lambda: (layer_norm(x, ln.gain, ln.bias) * w).sum(),
                                {"x": x, **dict(ln.named_parameters())})


def _grad_ar_loss() -> dict:
    cfg = BackboneConfig(vocab_size=8, d_emb=16, n_layers=1, n_heads=2, max_len=8)
    model = Backbone(cfg).double()
    init_parameters(model, Rng(11).child("grad-ar"))
    with torch.no_grad():
        for p in model.parameters():
            if p.dim() >= 2:
                p.mul_(10)  # larger weights so the gradient is not vanishingly small
    feats = Rng(11).child("grad-ar-visual").normal((2, cfg.d_vis))
    seqs = [
        MultimodalSequence([1, 0, 0, 3, 4, 5, 6, 2], [VisualSpan(1, feats)], context_len=4),
        MultimodalSequence([1, 7, 5, 4, 2], context_len=2),
    ]
    batch = collate(seqs, cfg)
    batch.visual = batch.visual.double()

    def loss():
        _, logits = model(batch)
        return autoregressive_loss(logits, batch)

    return param_gradient_check(loss, dict(model.named_parameters()), max_entries=8)


def _retrieval_inputs(cfg, n=3):
    rng = Rng(11).child("grad-retrieval")
    return (rng.normal((n, 5, cfg.backbone.d_emb)).double(), torch.tensor([5, 3, 4][:n]),
            rng.normal((n, 6, cfg.backbone.d_emb)).double(), torch.tensor([6, 2, 5][:n]))


def _grad_fusion_infonce() -> dict:
    cfg = tiny_config()
    model = build_model(cfg, Rng(11).child("grad-model")).double()
    with torch.no_grad():
        model.fusion.alpha_img.fill_(0.3)
        model.fusion.alpha_text.fill_(-0.4)
    h_img, l_img, h_txt, l_txt = _retrieval_inputs(cfg)

    def loss():
        return info_nce_loss(embed(model, "img", h_img, l_img), embed(model, "text", h_txt, l_txt),
                             model.fusion.tau())

    params = {n: p for n, p in model.named_parameters()
              if n.startswith(("fusion.", "queries.img", "queries.text", "down.", "bit.layers.0.cross"))}
    return param_gradient_check(loss, params, max_entries=6)


def _grad_gen_loss(objective: str) -> dict:
    cfg = tiny_config(**{"generation.objective": objective})
    model = build_model(cfg, Rng(11).child("grad-model")).double()
    h, lengths, _, _ = _retrieval_inputs(cfg)
    scenes = [sd.Scene.of(("circle", "red", 0)), sd.Scene.of(("square", "green", 4), ("triangle", "blue", 8)),
              sd.Scene.of(("circle", "blue", 2))]
    z0 = torch.from_numpy(np.stack([sd.render_latent(s) for s in scenes])).double()
    noise = NoiseSchedule.from_config(cfg.generation)
    replacement = ReplacementSchedule(100)

    def loss():
        value, aux = gen_loss(model, z0, h, lengths, 45, replacement, noise, Rng(5).child("gen-loss"))
        assert 0 < aux["beta"] < 1  # both condition paths contribute
        return value

    params = {n: p for n, p in model.named_parameters()
              if n.startswith(("queries.text", "queries.uncond", "denoiser.", "bit.layers.1"))}
    return param_gradient_check(loss, params, max_entries=4)


def _bit_visibility(causal: bool) -> dict:
    """Gradient of query i's output w.r.t. query j: zero for j > i iff causal."""
    cfg = tiny_config(**{"bitransformer.causal": str(causal)})
    model = build_model(cfg, Rng(11).child("grad-model")).double()
    q = model.queries["text"].detach().clone().requires_grad_()
    kv = model.down(_retrieval_inputs(cfg)[0][:1])
    n = q.shape[0]
    w = Rng(11).child("grad-visibility").normal((cfg.bitransformer.d_bit,)).double()
    vis = torch.zeros(n, n, dtype=torch.bool)
    for i in range(n):
        out = model.bit(q, kv)
        (g,) = torch.autograd.grad(out[0, i] @ w, q)
        vis[i] = g.abs().sum(dim=-1) > 0
    future = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    if causal:
        passed = not vis[future].any() and vis[~future].all()
    else:
        passed = bool(vis.all())
    return {"passed": passed, "visibility": vis.int().tolist()}


GRAD_CHECKS = {
    "attention": _grad_attention,
    "layer_norm": _grad_layer_norm,
    "ar_loss": _grad_ar_loss,
    "fusion_infonce": _grad_fusion_infonce,
    "eps_loss_mix_condition": lambda: _grad_gen_loss("eps"),
    "x0_loss_mix_condition": lambda: _grad_gen_loss("x0"),
}


def grad_suite() -> dict:
    t0 = time.perf_counter()
    checks = []
    for name, fn in GRAD_CHECKS.items():
        checks.append(_check(name, **fn()))
    checks.append(_check("bit_visibility_bidirectional", **_bit_visibility(False)))
    checks.append(_check("bit_visibility_causal", **_bit_visibility(True)))
    return _summary("grad", checks, t0)


# freeze -----------------------------------------------------------------------

def quick_config(**extra):
    """Tiny model, few steps: enough to exercise every training code path."""
    base = {"trainer.stage1_steps": 12, "trainer.stage2_steps": 12, "trainer.stage1_batch": 8,
            "trainer.gen_batch": 8, "trainer.itc_batch": 8, "trainer.log_every": 3, "trainer.warmup_steps": 2,
            "data.n_train": 48, "data.n_test": 16}
    base.update(extra)
    return tiny_config(**base)


def _changed(before: dict, after: dict) -> dict[str, bool]:
    return {g: before[g] != after[g] for g in before}


def freeze_suite(workdir: str | Path | None = None) -> dict:
    from .pipeline import make_split

    t0 = time.perf_counter()
    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir or tmp)
        cfg = quick_config()
        train, _ = make_split(cfg)

        s1 = run_stage1(cfg, train, root / "s1")
        changed = _changed(s1.checksums_before, s1.checksums_after)
        checks.append(_check("stage1_alignment_bit_identical",
                             not any(changed[g] for g in ALIGNMENT_GROUPS) and changed["backbone"],
                             changed=changed))

        snapshot = {k: v.clone() for k, v in s1.model.state_dict().items()}
        s2 = run_stage2(cfg, train, root / "s2a", s1.model)
        changed = _changed(s2.checksums_before, s2.checksums_after)
        checks.append(_check("stage2_backbone_bit_identical",
                             not changed["backbone"] and all(changed[g] for g in ALIGNMENT_GROUPS),
                             changed=changed))

        # a different stage-1 history, then the same backbone snapshot loaded on top
        cfg_b = quick_config(**{"trainer.stage1_steps": 5, "trainer.stage1_lr": 5e-3})
        other = run_stage1(cfg_b, train, root / "s1b")
        load_model_state(other.model, {f"model/{k}": v for k, v in snapshot.items()})
        s2b = run_stage2(cfg, train, root / "s2b", other.model)
        same_traj = s2.metrics == s2b.metrics and s2.checksums_after == s2b.checksums_after
        checks.append(_check("stage2_independent_of_stage1_history", same_traj))

        # a genuinely different backbone: same schedule and metric schema
        s2c = run_stage2(cfg, train, root / "s2c", build_model(cfg))  # random backbone
        same_trace = ([(m["step"], m["beta"], m["r"]) for m in s2.metrics]
                      == [(m["step"], m["beta"], m["r"]) for m in s2c.metrics]
                      and [sorted(m) for m in s2.metrics] == [sorted(m) for m in s2c.metrics])
        checks.append(_check("stage2_schedule_independent_of_backbone", same_trace))

        cfg_noitc = quick_config(**{"trainer.itc_weight": 0.0})
        s1n = run_stage1(cfg_noitc, train, root / "s1n")
        fusion_before = {n: p.clone() for n, p in s1n.model.fusion.named_parameters()}
        run_stage2(cfg_noitc, train, root / "s2n", s1n.model)
        untouched = all(torch.equal(fusion_before[n], p) for n, p in s1n.model.fusion.named_parameters())
        checks.append(_check("itc_weight_zero_leaves_retrieval_head", untouched))
    return _summary("freeze", checks, t0)


# schedule ---------------------------------------------------------------------

def schedule_suite() -> dict:
    t0 = time.perf_counter()
    checks = []
    for total in (10, 100, 1000, 3000):
        s = ReplacementSchedule(total)
        a, b = s.boundaries
        checks.append(_check(f"beta_endpoints_T{total}",
                             mixing_beta(0, s) == 0.85 and mixing_beta(total, s) == 0.0,
                             beta_start=mixing_beta(0, s), beta_end=mixing_beta(total, s)))
        rs = [replacement_ratio(t, s) for t in range(total + 1)]
        initial = all(r == 0.15 for t, r in enumerate(rs) if t < a)
        final = all(r == 1.0 for t, r in enumerate(rs) if t >= b)
        prog = [(t, r) for t, r in enumerate(rs) if a <= t < b]
        linear = all(abs(r - (0.15 + 0.6 * (t - a) / (b - a))) <= 1e-12 for t, r in prog)
        monotone = all(x <= y for x, y in zip(rs, rs[1:]))
        in_range = all(0.15 <= r < 0.75 for _, r in prog)
        checks.append(_check(f"replacement_shape_T{total}", initial and final and linear and monotone and in_range))
    mid = ReplacementSchedule(1000)
    checks.append(_check("progressive_midpoint", abs(replacement_ratio(450, mid) - 0.45) <= 1e-12,
                         r=replacement_ratio(450, mid)))

    rng = Rng(3).child("schedule-suite")
    zt, zq = rng.normal((4, 3, 5)), rng.normal((4, 3, 5))
    checks.append(_check("mix_beta_one_is_text", torch.equal(mix_condition(zt, zq, 1.0), zt)))
    checks.append(_check("mix_beta_zero_is_query", torch.equal(mix_condition(zt, zq, 0.0), zq)))
    lin = max((mix_condition(zt, zq, b) - (b * zt + (1 - b) * zq)).abs().max().item()
              for b in np.linspace(0.05, 0.95, 19))
    checks.append(_check("mix_linearity", lin <= 1e-6, max_abs_error=lin))
    b1, b2, lam = 0.2, 0.7, 0.3
    combo = mix_condition(zt, zq, lam * b1 + (1 - lam) * b2)
    affine = lam * mix_condition(zt, zq, b1) + (1 - lam) * mix_condition(zt, zq, b2)
    err = (combo - affine).abs().max().item()
    checks.append(_check("mix_affine_in_beta", err <= 1e-6, max_abs_error=err))
    return _summary("schedule", checks, t0)


# oracle -----------------------------------------------------------------------

def oracle_suite(n_multi: int = 1000) -> dict:
    t0 = time.perf_counter()
    checks = []
    singles = list(sd.enumerate_scenes(1))
    bad = [s.id for s in singles if sd.classify_latent(sd.render_latent(s)).scene != s]
    checks.append(_check("classify_render_one_object", len(singles) == 81 and not bad, n=len(singles), failures=bad))

    rng = Rng(7).child("oracle-suite")
    multi = []
    while len(multi) < n_multi:
        s = sd.make_scene(rng)
        if len(s.objects) > 1:
            multi.append(s)
    bad = [s.id for s in multi if sd.classify_latent(sd.render_latent(s)).scene != s]
    checks.append(_check("classify_render_multi_object", not bad, n=len(multi), failures=bad[:10]))

    scenes = singles + multi
    bad_long = [s.id for s in scenes if sd.parse_caption(sd.caption_of(s, "long")).scene() != s]
    bad_short = [s.id for s in scenes if not sd.parse_caption(sd.caption_of(s, "short")).consistent_with(s)]
    checks.append(_check("caption_round_trip", not bad_long and not bad_short,
                         long_failures=bad_long[:10], short_failures=bad_short[:10]))

    bad_rw = []
    for s in scenes:
        for style in ("short", "long"):
            once = sd.rewrite_caption(sd.caption_of(s, style), s)
            if sd.rewrite_caption(once, s) != once or not sd.parse_caption(once).consistent_with(s):
                bad_rw.append((s.id, style))
    checks.append(_check("rewrite_idempotent", not bad_rw, failures=bad_rw[:10]))
    return _summary("oracle", checks, t0)


def run_suite(name: str) -> dict:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return {"grad": grad_suite, "freeze": freeze_suite, "schedule": schedule_suite, "oracle": oracle_suite}[name]()
