"""Command line entry point: ``aread {synth,train,eval,analyze-masks}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import config as _config
from .hei import write_masks, read_masks
from .runner import RunConfig, analyze_masks, eval_run, run
from .synth import SynthConfig, generate

HEMP_FLAGS = ("z", "k", "s0", "s", "alpha", "lr-u", "update-interval")


def _synth_config(value: str | None) -> SynthConfig:
    if value is None or value == "default":
        return SynthConfig()
    return SynthConfig.from_file(value)


def _build_config(args) -> RunConfig:
    flat = _config.read_flat(args.config) if args.config else {}
    cfg = RunConfig.from_flat(flat)
    if args.synth_config is not None:
        cfg.synth = _synth_config(args.synth_config)
    if args.data is not None:
        cfg.data = args.data
    if args.ablation is not None:
        cfg.train.ablation = args.ablation
    if args.seed is not None:
        cfg.seed = args.seed
    for name in ("lr", "epochs", "batch_size"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg.train, name, v)
    if args.r_aug is not None:
        cfg.aug.r_aug = args.r_aug
    for flag in HEMP_FLAGS:
        v = getattr(args, "hemp_" + flag.replace("-", "_"))
        if v is not None:
            setattr(cfg.hemp, flag.replace("-", "_"), v)
    # re-run validation after the overrides
    return RunConfig.from_flat(cfg.to_flat())


def cmd_synth(args) -> int:
    cfg = _synth_config(args.synth_config)
    if args.seed is not None:
        cfg.seed = args.seed
    generate(cfg).to_csv(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    report = run(cfg, out, dump_aug=args.dump_aug)
    if args.checkpoint:
        shutil.copyfile(out / "checkpoint.bin", args.checkpoint)
    if args.report:
        shutil.copyfile(out / "report.json", args.report)
    if args.dump_masks and (out / "masks").is_dir():
        write_masks(args.dump_masks, read_masks(out / "masks"))
    t = report["test"]
    print(f"test AUC {t['auc']:.4f}  DomainAUC {t['domain_auc']:.4f}  run dir {out}")
    return 0


def cmd_eval(args) -> int:
    rep = eval_run(args.run, args.data, args.checkpoint, args.masks, args.all_ones)
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_analyze(args) -> int:
    mat = analyze_masks(args.masks, args.out, args.layer)
    if args.out is None:
        for row in mat:
            print(",".join(f"{v:.4f}" for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aread", description="Multi-domain CTR with hierarchical experts and mask pruning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    s.add_argument("--synth-config", default="default", help="'default' or a key = value file")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one ablation variant and write a run directory")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data", help="CSV file, or directory with train/valid/test.csv")
    src.add_argument("--synth-config", help="'default' or a key = value file")
    t.add_argument("--config", help="flat run config file")
    t.add_argument("--ablation", choices=["base-only", "+hei", "+hemp", "full"])
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--r-aug", type=float)
    for flag in HEMP_FLAGS:
        kind = float if flag in ("s0", "s", "alpha", "lr-u") else int
        t.add_argument(f"--hemp.{flag}", dest="hemp_" + flag.replace("-", "_"), type=kind)
    t.add_argument("--out", default="run", help="run directory (default: ./run)")
    t.add_argument("--checkpoint", help="extra copy of the checkpoint")
    t.add_argument("--report", help="extra copy of report.json")
    t.add_argument("--dump-masks", help="extra mask dump directory")
    t.add_argument("--dump-aug", action="store_true", help="write augmented per-domain sets to <out>/aug")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score test data with a trained run")
    e.add_argument("--run", required=True, help="run directory")
    e.add_argument("--data", help="CSV to score instead of the run's test split")
    e.add_argument("--checkpoint")
    e.add_argument("--masks")
    e.add_argument("--all-ones", action="store_true", help="replace every mask by the full mask")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze-masks", help="pairwise overlap ratio matrix of a mask dump")
    a.add_argument("--masks", required=True)
    a.add_argument("--layer", type=int)
    a.add_argument("--out", help="CSV output path")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("AREAD_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
