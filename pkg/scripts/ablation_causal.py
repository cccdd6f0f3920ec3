"""Bidirectional vs causal BiTransformer ablation on a shared stage-1 backbone.

    python3 scripts/ablation_causal.py --stage1 runs/desk/stage1/stage1.obrg --out runs/ablation \
        [--set trainer.stage2_steps=1500]

Trains stage 2 once per setting and prints the text-mode generation scores of both.
"""

import argparse
import json
from pathlib import Path

import torch

from obrg.config import load_config
from obrg.evaluate import generation_gap
from obrg.model import build_model
from obrg.pipeline import make_split
from obrg.trainer import encode_corpus, load_model, run_stage2


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--stage1", required=True, help="stage-1 checkpoint shared by both arms")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()
    torch.set_num_threads(1)
    overrides = dict(kv.split("=", 1) for kv in args.set)
    base = load_config(args.config, overrides)
    stage1, _ = load_model(base, args.stage1, expect_stage=1)
    train, test = make_split(base)
    results = {}
    for causal in (False, True):
        cfg = load_config(args.config, {**overrides, "bitransformer.causal": str(causal).lower()})
        model = build_model(cfg)
        model.load_state_dict(stage1.state_dict())
        model.eval()
        res = run_stage2(cfg, train, Path(args.out) / ("causal" if causal else "bidirectional"), model)
        hs = encode_corpus(res.model.backbone, test, cfg.data.featurizer_seed)
        results["causal" if causal else "bidirectional"] = generation_gap(res.model, hs, cfg.seeds.root)["text"]
    print(json.dumps(results, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
