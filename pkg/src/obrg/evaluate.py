"""Report builders for the three evaluation tasks."""

from __future__ import annotations

import torch

from . import synthdata as sd
from .backbone import caption_sequence, generate_tokens
from .errors import CaptionParseError
from .generation import NoiseSchedule, eval_generation
from .retrieval import embed, recall_report

CAPTION_MAX_NEW = 40


@torch.no_grad()
def retrieval_embeddings(model, hs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    e_img = embed(model, "img", hs.img, hs.img_len)
    e_txt = embed(model, "text", hs.text, hs.text_len)
    e_short = embed(model, "text", hs.text_short, hs.text_short_len)
    return e_img, e_txt, e_short


def retrieval_report(model, hs) -> dict:
    """Nine R@k cells: image->text, text->image, text->text (long query, short gallery)."""
    report = recall_report(*retrieval_embeddings(model, hs))
    report["n"] = len(hs.scenes)
    return report


def generation_report(model, hs, mode: str, seed: int) -> dict:
    sched = NoiseSchedule.from_config(model.cfg.generation)
    return eval_generation(model, hs.scenes, hs.cond, hs.cond_len, mode, sched, seed)


def generation_gap(model, hs, seed: int) -> dict:
    """Both conditioning modes and the signed text-minus-query gap per category."""
    text = generation_report(model, hs, "text", seed)
    query = generation_report(model, hs, "query_only", seed)
    gap = {k: text[k] - query[k] for k in ("colors", "shapes", "counting", "position", "overall")}
    return {"text": text, "query_only": query, "gap": gap}


@torch.no_grad()
def caption_report(model, scenes: list[sd.Scene], featurizer_seed: int, batch_size: int = 256) -> dict:
    """Greedy captions from the image prefix, graded by parsing them back.

    ``parsed`` counts captions that satisfy the grammar; ``exact`` counts those
    whose parsed content matches the scene.
    """
    parsed = exact = 0
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        prefixes = [caption_sequence(s, featurizer_seed, with_target=False) for s in chunk]
        outputs = generate_tokens(model.backbone, prefixes, CAPTION_MAX_NEW)
        for scene, ids in zip(chunk, outputs):
            try:
                cap = sd.parse_caption(ids)
            except CaptionParseError:
                continue
            parsed += 1
            exact += cap.consistent_with(scene)
    n = len(scenes)
    return {"n": n, "parse_rate": parsed / max(n, 1), "accuracy": exact / max(n, 1)}
