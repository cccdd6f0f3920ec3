"""Full desk-scale run (both stages) and its evaluation reports.

    python3 scripts/desk_run.py --out runs/desk [--config my.ini] [--set trainer.stage2_steps=2000]
"""

import argparse
import json

import torch

from obrg.config import load_config
from obrg.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config, dict(kv.split("=", 1) for kv in args.set))
    report = run_pipeline(cfg, args.out)
    for key in ("stage1", "stage2"):
        report.pop(key)
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
