"""``obrg`` command line: gen-data, train, eval, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 IO or corruption error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import torch

from . import synthdata as sd
from .config import Config, load_config, parse_config
from .errors import ConfigError, ObrgError
from .evaluate import caption_report, generation_report, retrieval_report
from .model import build_model
from .pipeline import make_split
from .trainer import encode_corpus, load_model, run_stage1, run_stage2

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(ObrgError):
    exit_code = EXIT_USAGE


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for kv in pairs:
        if "=" not in kv:
            raise ConfigError(f"--set expects section.key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        out[k.strip()] = v
    return out


def _announce(cfg: Config) -> None:
    print("# effective config", file=sys.stderr)
    print(cfg.dumps(), file=sys.stderr)


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _records(cfg: Config, data_dir: str | None, split: str) -> list[sd.Record]:
    """Read a split written by gen-data, or regenerate it from the config seeds."""
    if data_dir is None:
        train, test = make_split(cfg)
        return train if split == "train" else test
    head, records = sd.read_corpus(Path(data_dir) / f"{split}.jsonl")
    if head["featurizer_seed"] != cfg.data.featurizer_seed:
        raise ConfigError(f"corpus featurizer_seed {head['featurizer_seed']} != data.featurizer_seed "
                          f"{cfg.data.featurizer_seed}")
    return records


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    overrides = _overrides(args.set)
    for key, value in (("seeds.data", args.seed), ("data.n_train", args.n_train), ("data.n_test", args.n_test)):
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides)
    _announce(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_split(cfg)
    sums = {
        "train": sd.write_corpus(out / "train.jsonl", train, cfg.data.featurizer_seed),
        "test": sd.write_corpus(out / "test.jsonl", test, cfg.data.featurizer_seed),
    }
    sums["corpus"] = hashlib.sha256((sums["train"] + sums["test"]).encode()).hexdigest()
    _emit({"out": str(out), "n_train": len(train), "n_test": len(test), "sha256": sums}, None)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    _announce(cfg)
    torch.set_num_threads(1)
    train = _records(cfg, args.data, "train")
    out = Path(args.out)
    if args.stage == 1:
        if args.init or args.random_backbone:
            raise UsageError("--init and --random-backbone only apply to --stage 2")
        result = run_stage1(cfg, train, out, resume=args.resume)
    else:
        if args.init and args.random_backbone:
            raise UsageError("pass either --init or --random-backbone, not both")
        if args.init:
            model, _ = load_model(cfg, args.init, expect_stage=1)
        elif args.random_backbone:
            model = build_model(cfg)
            model.eval()
        else:
            raise UsageError("stage 2 needs a frozen backbone: pass --init <stage-1 checkpoint> "
                             "(or --random-backbone for the ablation)")
        result = run_stage2(cfg, train, out, model, resume=args.resume)
    _emit({"stage": args.stage, "checkpoint": str(result.checkpoint), "metrics": str(out / "metrics.jsonl"),
           "final": result.metrics[-1] if result.metrics else None}, None)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load as load_checkpoint

    _, meta = load_checkpoint(args.checkpoint)
    if args.config is None and "config" in meta:
        cfg = parse_config(meta["config"], _overrides(args.set))
    else:
        cfg = load_config(args.config, _overrides(args.set))
    _announce(cfg)
    torch.set_num_threads(max(1, int(os.environ.get("OBRG_THREADS", "1"))))
    if args.mode is not None and args.task != "generation":
        raise UsageError("--mode only applies to --task generation")
    model, meta = load_model(cfg, args.checkpoint)
    test = _records(cfg, args.data, "test")
    seed = cfg.seeds.root if args.seed is None else args.seed
    report: dict = {"task": args.task, "checkpoint": str(args.checkpoint), "stage": meta["stage"]}
    if args.task == "caption":
        report.update(caption_report(model, [r.scene for r in test], cfg.data.featurizer_seed))
    else:
        hs = encode_corpus(model.backbone, test, cfg.data.featurizer_seed)
        if args.task == "retrieval":
            report.update(retrieval_report(model, hs))
        else:
            report.update(generation_report(model, hs, args.mode or "text", seed))
    _emit(report, args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    torch.set_num_threads(1)
    summary = run_suite(args.suite)
    _emit(summary, args.out)
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


# parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="obrg", description="Desk-scale multimodal alignment experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file (missing keys take defaults)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key; repeatable")

    p = sub.add_parser("gen-data", help="write the train/test synthetic corpus")
    common(p)
    p.add_argument("--seed", type=int, help="data seed (default: seeds.data)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True, help="run directory (checkpoint + metrics.jsonl)")
    p.add_argument("--data", help="corpus directory from gen-data (default: regenerate from seeds)")
    p.add_argument("--resume", help="intermediate checkpoint of the same stage to continue from")
    p.add_argument("--init", help="stage-1 checkpoint supplying the frozen backbone (stage 2)")
    p.add_argument("--random-backbone", action="store_true", help="stage 2 on an untrained backbone (ablation)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(p)
    p.add_argument("--task", choices=("retrieval", "generation", "caption"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("text", "query_only"), help="generation conditioning (default text)")
    p.add_argument("--data", help="corpus directory from gen-data (default: regenerate from seeds)")
    p.add_argument("--seed", type=int, help="sampling seed for generation (default: seeds.root)")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run an invariant suite")
    p.add_argument("--suite", choices=("grad", "freeze", "schedule", "oracle"), required=True)
    p.add_argument("--out", help="also write the summary to this file")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ObrgError as exc:
        print(f"obrg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"obrg: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
