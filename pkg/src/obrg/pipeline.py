"""End-to-end desk-scale run: data split, both stages, and every report."""

from __future__ import annotations

import json
import time
from pathlib import Path

from . import synthdata as sd
from .evaluate import caption_report, generation_gap, retrieval_report
from .model import build_model
from .numerics import Rng
from .trainer import encode_corpus, run_stage1, run_stage2


def make_split(cfg) -> tuple[list[sd.Record], list[sd.Record]]:
    """Train split plus a held-out split of distinct scenes never seen in training."""
    rng = Rng(cfg.seeds.data)
    train = sd.make_corpus(rng.child("train"), cfg.data.n_train, edit_prob=cfg.data.edit_prob)
    test = sd.make_corpus(rng.child("test"), cfg.data.n_test, exclude={r.scene.id for r in train},
                          distinct=True, edit_prob=cfg.data.edit_prob)
    return train, test


def untrained_retrieval(cfg, test) -> dict:
    model = build_model(cfg)
    model.eval()
    return retrieval_report(model, encode_corpus(model.backbone, test, cfg.data.featurizer_seed))


def run_pipeline(cfg, out_dir, eval_seed: int | None = None, log=print) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds.root if eval_seed is None else eval_seed
    timings = {}
    t = time.perf_counter()
    train, test = make_split(cfg)
    timings["data"] = time.perf_counter() - t

    t = time.perf_counter()
    s1 = run_stage1(cfg, train, out / "stage1")
    timings["stage1"] = time.perf_counter() - t
    log(f"stage 1 done in {timings['stage1']:.0f}s, final AR loss {s1.metrics[-1]['loss_AR']:.4f}")

    t = time.perf_counter()
    s2 = run_stage2(cfg, train, out / "stage2", s1.model)
    timings["stage2"] = time.perf_counter() - t
    log(f"stage 2 done in {timings['stage2']:.0f}s")

    t = time.perf_counter()
    model = s2.model
    hs = encode_corpus(model.backbone, test, cfg.data.featurizer_seed)
    report = {
        "retrieval": retrieval_report(model, hs),
        "retrieval_untrained": untrained_retrieval(cfg, test),
        "generation": generation_gap(model, hs, seed),
        "caption": caption_report(model, [r.scene for r in test], cfg.data.featurizer_seed),
        "stage1_loss": [s1.metrics[0]["loss_AR"], s1.metrics[-1]["loss_AR"]],
    }
    timings["eval"] = time.perf_counter() - t
    report["timings"] = timings
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    report["stage1"] = s1
    report["stage2"] = s2
    return report
