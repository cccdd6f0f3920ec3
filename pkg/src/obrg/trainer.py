"""Two-stage decoupled training.

Stage 1 trains only the backbone on the autoregressive loss; Stage 2 freezes
the backbone and trains the alignment modules, alternating a generation batch
and a contrastive batch. Freezing is enforced twice: frozen parameters have
requires_grad off and are absent from the optimizer.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import synthdata as sd
from .backbone import (
    LowRankAdapter, MultimodalSequence, adapt_low_rank, autoregressive_loss, caption_sequence,
    collate, conditioning_sequence, edit_sequence, generation_sequence, image_retrieval_sequence,
    text_retrieval_sequence,
)
from .errors import ConfigError, NumericError
from .generation import NoiseSchedule, ReplacementSchedule, gen_loss, replacement_ratio
from .model import ALIGNMENT_GROUPS, GROUPS, OmniBridge, build_model, group_checksums, group_of
from .numerics import Rng, Tensor
from .retrieval import embed, info_nce_loss

log = logging.getLogger(__name__)

LOSSES = ("AR", "Gen", "ITC")


@dataclass
class StagePlan:
    stage: int
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]
    losses: dict[str, float]
    steps: int
    batch_size: int
    lr: float
    seed: int

    def validate(self) -> None:
        t, f = set(self.trainable), set(self.frozen)
        if t & f:
            raise ConfigError(f"groups both trainable and frozen: {sorted(t & f)}")
        if t | f != set(GROUPS):
            raise ConfigError(f"plan does not cover every parameter group: missing {sorted(set(GROUPS) - t - f)}")
        if self.stage == 1:
            if set(self.losses) != {"AR"}:
                raise ConfigError(f"stage 1 uses only the AR loss, plan has {sorted(self.losses)}")
            if not set(ALIGNMENT_GROUPS) <= f:
                raise ConfigError("stage 1 must freeze every alignment module")
        elif self.stage == 2:
            if not set(self.losses) <= {"Gen", "ITC"} or not self.losses:
                raise ConfigError(f"stage 2 losses must be a non-empty subset of Gen/ITC, got {sorted(self.losses)}")
            if "backbone" not in f:
                raise ConfigError("stage 2 must freeze the backbone")
        else:
            raise ConfigError(f"unknown stage {self.stage}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps, batch size and learning rate must be positive")


def stage1_plan(cfg) -> StagePlan:
    tc = cfg.trainer
    return StagePlan(1, ("backbone",), ALIGNMENT_GROUPS, {"AR": 1.0}, tc.stage1_steps, tc.stage1_batch,
                     tc.stage1_lr, cfg.seeds.root)


def stage2_plan(cfg) -> StagePlan:
    tc = cfg.trainer
    losses = {k: w for k, w in (("Gen", tc.gen_weight), ("ITC", tc.itc_weight)) if w > 0}
    return StagePlan(2, ALIGNMENT_GROUPS, ("backbone",), losses, tc.stage2_steps, tc.gen_batch,
                     tc.stage2_lr, cfg.seeds.root)


# optimizer ------------------------------------------------------------------

def optimizer_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: dict, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction.

    ``state`` holds ``t`` and per-name first/second moments ``m``/``v``; it is
    created on first use. Raises NumericError naming the first non-finite gradient.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not torch.isfinite(g).all():
            raise NumericError("non-finite gradient", name=name)
    state.setdefault("m", {})
    state.setdefault("v", {})
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state["m"].setdefault(name, torch.zeros_like(p))
            v = state["v"].setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


# data -----------------------------------------------------------------------

def stage1_sequences(records: list[sd.Record], featurizer_seed: int) -> dict[str, list[MultimodalSequence]]:
    caption = [caption_sequence(r.scene, featurizer_seed) for r in records]
    edit = [edit_sequence(r.scene, r.edit, featurizer_seed) if r.edit else None for r in records]
    gen_short = [generation_sequence(r.caption_short) for r in records]
    gen_long = [generation_sequence(r.caption_long) for r in records]
    return {"caption": caption, "edit": edit, "gen_short": gen_short, "gen_long": gen_long}


@dataclass
class HiddenStates:
    """Frozen-backbone hidden states for one corpus split."""

    img: Tensor
    img_len: Tensor
    text: Tensor
    text_len: Tensor
    text_short: Tensor
    text_short_len: Tensor
    cond: Tensor
    cond_len: Tensor
    z0: Tensor
    scenes: list = field(default_factory=list)


@torch.no_grad()
def _hidden(backbone, seqs, chunk=256) -> tuple[Tensor, Tensor]:
    width = max(len(s) for s in seqs)
    out = torch.zeros(len(seqs), width, backbone.cfg.d_emb)
    for i in range(0, len(seqs), chunk):
        batch = collate(seqs[i:i + chunk], backbone.cfg)
        h, _ = backbone(batch)
        out[i:i + chunk, : h.shape[1]] = h
    return out, torch.tensor([len(s) for s in seqs], dtype=torch.long)


@torch.no_grad()
def encode_corpus(backbone, records: list[sd.Record], featurizer_seed: int) -> HiddenStates:
    scenes = [r.scene for r in records]
    img, img_len = _hidden(backbone, [image_retrieval_sequence(s, featurizer_seed) for s in scenes])
    text, text_len = _hidden(backbone, [text_retrieval_sequence(sd.caption_of(s, "long")) for s in scenes])
    short, short_len = _hidden(backbone, [text_retrieval_sequence(sd.caption_of(s, "short")) for s in scenes])
    cond, cond_len = _hidden(
        backbone, [conditioning_sequence(sd.rewrite_caption(sd.caption_of(s, "long"))) for s in scenes])
    z0 = torch.from_numpy(np.stack([sd.render_latent(s) for s in scenes]))
    return HiddenStates(img, img_len, text, text_len, short, short_len, cond, cond_len, z0, scenes)


def _distinct_batch(rng: Rng, ids: list[int], size: int) -> np.ndarray:
    """Random indices with no repeated scene (in-batch negatives must be true negatives)."""
    order = rng.permutation(len(ids))
    picked, seen = [], set()
    for i in order:
        if ids[i] in seen:
            continue
        seen.add(ids[i])
        picked.append(int(i))
        if len(picked) == size:
            break
    return np.asarray(picked)


# run bookkeeping ------------------------------------------------------------

class MetricsWriter:
    """Append-only JSON-lines metrics; records are written with sorted keys."""

    def __init__(self, path: Path, resume_from_step: int | None = None):
        self.path = path
        if resume_from_step is None:
            path.write_text("")
        else:
            kept = []
            if path.exists():
                for line in path.read_text().splitlines():
                    if line and json.loads(line)["step"] < resume_from_step:
                        kept.append(line + "\n")
            path.write_text("".join(kept))
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def _lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(1.0, (step + 1) / warmup) if warmup > 0 else base


def training_state(model: OmniBridge, opt_state: dict, rng: Rng, meta: dict) -> tuple[dict, dict]:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for kind in ("m", "v"):
        for k, v in opt_state.get(kind, {}).items():
            tensors[f"opt/{kind}/{k}"] = v
    meta = dict(meta, opt_t=opt_state.get("t", 0), rng=rng.get_state())
    return tensors, meta


def save_training_state(path, model, opt_state, rng, cfg, stage, step, complete) -> None:
    meta = {
        "format_version": ckpt.VERSION,
        "fingerprint": cfg.fingerprint(),
        "stage": stage,
        "step": step,
        "complete": complete,
        "lora": bool(_lora_layers(model)),
        "config": cfg.dumps(),
    }
    tensors, meta = training_state(model, opt_state, rng, meta)
    ckpt.save(path, tensors, meta)


def _lora_layers(model) -> list[str]:
    return [n for n, _ in model.named_parameters() if "lora_" in n]


def load_model_state(model: OmniBridge, tensors: dict) -> None:
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    missing = set(model.state_dict()) - set(state)
    extra = set(state) - set(model.state_dict())
    if missing or extra:
        raise ckpt.CompatibilityError(
            f"checkpoint parameters do not match model: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    with torch.no_grad():
        for k, p in model.state_dict().items():
            p.copy_(state[k])


def load_optimizer_state(tensors: dict, meta: dict) -> dict:
    state = {"t": meta.get("opt_t", 0), "m": {}, "v": {}}
    for k, v in tensors.items():
        for kind in ("m", "v"):
            prefix = f"opt/{kind}/"
            if k.startswith(prefix):
                state[kind][k[len(prefix):]] = v.clone()
    return state


@dataclass
class StageResult:
    model: OmniBridge
    metrics: list[dict]
    checkpoint: Path | None
    checksums_before: dict[str, str]
    checksums_after: dict[str, str]


def _set_trainable(model: OmniBridge, plan: StagePlan) -> dict[str, torch.nn.Parameter]:
    trainable = set(plan.trainable)
    params = {}
    for name, p in model.named_parameters():
        on = group_of(name) in trainable
        p.requires_grad_(on)
        if on:
            params[name] = p
    return params


def _finish_record(rec: dict, cfg, t0: float) -> dict:
    rec["wall_ms"] = round((time.perf_counter() - t0) * 1000, 1) if cfg.trainer.log_wall_time else None
    return rec


# stage 1 ----------------------------------------------------------------------

def run_stage1(cfg, records: list[sd.Record], out_dir, model: OmniBridge | None = None,
               resume: str | Path | None = None, plan: StagePlan | None = None) -> StageResult:
    plan = plan or stage1_plan(cfg)
    plan.validate()
    tc = cfg.trainer
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = model or build_model(cfg)
    adapter: LowRankAdapter | None = None
    if tc.stage1_mode == "lora":
        adapter = adapt_low_rank(model, list(tc.lora_targets), tc.lora_r, tc.lora_scale,
                                 Rng(cfg.seeds.root).child("lora"))
    rng = Rng(plan.seed).child("stage1")
    opt_state: dict = {}
    start = 0
    if resume is not None:
        tensors, meta = ckpt.load(resume, cfg.fingerprint())
        if meta["stage"] != 1:
            raise ConfigError(f"--resume checkpoint is from stage {meta['stage']}, not stage 1")
        load_model_state(model, tensors)
        opt_state = load_optimizer_state(tensors, meta)
        rng = Rng.from_state(meta["rng"])
        start = meta["step"]
    params = _set_trainable(model, plan)
    if adapter is not None:
        params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    before = group_checksums(model)
    seqs = stage1_sequences(records, cfg.data.featurizer_seed)
    n = len(records)
    if n == 0 and plan.steps > start:
        raise ConfigError("stage 1 needs a non-empty training corpus")
    mix = np.asarray(tc.task_mix, dtype=np.float64)
    mix = mix / mix.sum()
    metrics = MetricsWriter(out / "metrics.jsonl", resume_from_step=start if resume else None)
    t0 = time.perf_counter()
    window: list[float] = []
    model.train()
    for step in range(start, plan.steps):
        idx = rng.integers(0, n, size=plan.batch_size)
        tasks = rng.uniform((plan.batch_size,))
        flips = rng.uniform((plan.batch_size,))
        batch_seqs = []
        for i, u, f in zip(idx, tasks, flips):
            if u < mix[0] or (u < mix[0] + mix[1] and seqs["edit"][i] is None):
                batch_seqs.append(seqs["caption"][i])
            elif u < mix[0] + mix[1]:
                batch_seqs.append(seqs["edit"][i])
            else:
                batch_seqs.append(seqs["gen_short"][i] if f < 0.5 else seqs["gen_long"][i])
        batch = collate(batch_seqs, model.backbone.cfg)
        _, logits = model.backbone(batch)
        loss = autoregressive_loss(logits, batch) * plan.losses["AR"]
        for p in params.values():
            p.grad = None
        loss.backward()
        clip_gradients(params, tc.grad_clip)
        lr = _lr_at(step, plan.lr, tc.warmup_steps)
        optimizer_step(params, {k: p.grad for k, p in params.items()}, opt_state, lr,
                       tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
        window.append(loss.item())
        done = step + 1
        if done % tc.log_every == 0 or done == plan.steps or step == start:
            metrics.write(_finish_record({
                "step": done, "stage": 1, "loss_AR": float(np.mean(window)),
                "beta": None, "r": None, "lr": lr}, cfg, t0))
            window = []
        if tc.checkpoint_every and done % tc.checkpoint_every == 0 and done < plan.steps:
            save_training_state(out / f"stage1-step{done}.obrg", model, opt_state, rng, cfg, 1, done, False)
    model.eval()
    if adapter is not None:
        adapter.merge()
    for p in model.parameters():
        p.requires_grad_(False)
    after = group_checksums(model)
    path = out / "stage1.obrg"
    save_training_state(path, model, {}, rng, cfg, 1, plan.steps, True)
    return StageResult(model, metrics.records, path, before, after)


# stage 2 ----------------------------------------------------------------------

def stage2_schedule(cfg, plan: StagePlan) -> ReplacementSchedule:
    sc = cfg.schedules
    gen_batches = max(1, math.ceil(plan.steps / 2)) if "Gen" in plan.losses and "ITC" in plan.losses \
        else max(1, plan.steps)
    return ReplacementSchedule(gen_batches, sc.initial_frac, sc.progressive_frac, sc.r_initial,
                               sc.r_progressive_end, sc.r_final, sc.mode)


def batch_kind(step: int, plan: StagePlan) -> str:
    if "Gen" in plan.losses and "ITC" in plan.losses:
        return "Gen" if step % 2 == 0 else "ITC"
    return next(iter(plan.losses))


def gen_steps_before(step: int, plan: StagePlan) -> int:
    """Number of Gen batches that precede global step ``step``."""
    if "Gen" not in plan.losses:
        return 0
    if "ITC" in plan.losses:
        return (step + 1) // 2
    return step


def run_stage2(cfg, records: list[sd.Record], out_dir, model: OmniBridge,
               resume: str | Path | None = None, plan: StagePlan | None = None,
               hidden: HiddenStates | None = None) -> StageResult:
    """``model`` carries the frozen backbone (from a stage-1 checkpoint or a random init)."""
    plan = plan or stage2_plan(cfg)
    plan.validate()
    tc = cfg.trainer
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(plan.seed).child("stage2")
    opt_state: dict = {}
    start = 0
    if resume is not None:
        tensors, meta = ckpt.load(resume, cfg.fingerprint())
        if meta["stage"] != 2:
            raise ConfigError(f"--resume checkpoint is from stage {meta['stage']}, not stage 2")
        load_model_state(model, tensors)
        opt_state = load_optimizer_state(tensors, meta)
        rng = Rng.from_state(meta["rng"])
        start = meta["step"]
    if _lora_layers(model):
        raise ConfigError("stage 2 needs a merged backbone; found unmerged adapters")
    params = _set_trainable(model, plan)
    before = group_checksums(model)
    model.eval()
    hs = hidden if hidden is not None else encode_corpus(model.backbone, records, cfg.data.featurizer_seed)
    ids = [s.id for s in hs.scenes]
    replacement = stage2_schedule(cfg, plan)
    noise = NoiseSchedule.from_config(cfg.generation)
    metrics = MetricsWriter(out / "metrics.jsonl", resume_from_step=start if resume else None)
    t0 = time.perf_counter()
    window: dict[str, list[float]] = {"Gen": [], "ITC": []}
    init_steps = int(tc.init_frac * plan.steps)
    for step in range(start, plan.steps):
        kind = batch_kind(step, plan)
        g = min(gen_steps_before(step, plan), replacement.total_steps)
        for p in params.values():
            p.grad = None
        if kind == "Gen":
            idx = torch.from_numpy(rng.integers(0, len(ids), size=tc.gen_batch))
            loss, aux = gen_loss(model, hs.z0[idx], hs.cond[idx], hs.cond_len[idx], g, replacement, noise, rng)
            loss = loss * plan.losses["Gen"]
        else:
            idx = torch.from_numpy(_distinct_batch(rng, ids, tc.itc_batch))
            e_img = embed(model, "img", hs.img[idx], hs.img_len[idx])
            e_txt = embed(model, "text", hs.text[idx], hs.text_len[idx])
            loss = info_nce_loss(e_img, e_txt, model.fusion.tau()) * plan.losses["ITC"]
        loss.backward()
        clip_gradients(params, tc.grad_clip)
        lr = _lr_at(step, plan.lr, tc.warmup_steps)
        if step < init_steps:
            lr *= tc.init_lr_factor
        optimizer_step(params, {k: p.grad for k, p in params.items()}, opt_state, lr,
                       tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
        model.fusion.clamp_tau()
        window[kind].append(loss.item())
        done = step + 1
        if done % tc.log_every == 0 or done == plan.steps or step == start:
            r = replacement_ratio(g, replacement)
            rec = {"step": done, "stage": 2, "gen_step": g, "beta": 1.0 - r, "r": r, "lr": lr,
                   "tau": model.fusion.tau().item()}
            for k in ("Gen", "ITC"):
                if window[k]:
                    rec[f"loss_{k}"] = float(np.mean(window[k]))
            metrics.write(_finish_record(rec, cfg, t0))
            window = {"Gen": [], "ITC": []}
        if tc.checkpoint_every and done % tc.checkpoint_every == 0 and done < plan.steps:
            save_training_state(out / f"stage2-step{done}.obrg", model, opt_state, rng, cfg, 2, done, False)
    for p in model.parameters():
        p.requires_grad_(False)
    after = group_checksums(model)
    path = out / "stage2.obrg"
    save_training_state(path, model, {}, rng, cfg, 2, plan.steps, True)
    return StageResult(model, metrics.records, path, before, after)


def load_model(cfg, path, expect_stage: int | None = None) -> tuple[OmniBridge, dict]:
    """Build a model and fill it from a completed checkpoint."""
    tensors, meta = ckpt.load(path, cfg.fingerprint())
    if expect_stage is not None and meta["stage"] != expect_stage:
        raise ConfigError(f"checkpoint {path} is from stage {meta['stage']}, expected {expect_stage}")
    model = build_model(cfg)
    if meta.get("lora"):
        tc = cfg.trainer
        adapt_low_rank(model, list(tc.lora_targets), tc.lora_r, tc.lora_scale, Rng(cfg.seeds.root).child("lora"))
    load_model_state(model, tensors)
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model, meta
