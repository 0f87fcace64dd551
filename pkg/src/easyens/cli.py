"""Command-line front end: data generation, training, trials, certification.

Subcommands:

* ``synth-data``         generate and cache a synthetic train/test dataset
* ``train``              train one model, optionally saving a checkpoint
* ``eval``               evaluate a checkpoint on a cached dataset
* ``trials``             multi-seed trials with CSV rows and a JSON summary
* ``equivalence-check``  certify grouped-vs-merged model equivalence
* ``ablate``             run the ablation grid (GGN, CGN, GG1, GLN, CL1, ...)

Options come from an optional JSON config file plus flag overrides; results
go to CSV (one row per trial) and JSON (summary).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import load_datasets, make_synth_dataset, save_datasets, write_csv, synth_generate
from .ensemble import (ArchitectureSpec, build, build_ablation_variant,
                       load_checkpoint, preset_spec, save_checkpoint)
from .training import (PRESETS, TrainConfig, equivalence_check, evaluate_accuracy,
                       run_trials, summarize_trials, train)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="easyens",
                                     description="grouped-ensemble experiments "
                                                 "on 1-D sensor time series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset cache")
    p.add_argument("--out", required=True, help="output .bin dataset cache")
    p.add_argument("--subjects", type=int, default=16)
    p.add_argument("--train-subjects", type=int, default=8)
    p.add_argument("--test-subjects", type=int, default=8)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv-dir", default=None,
                   help="also write raw recordings as CSV + manifest here")

    for name in ("train", "trials", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--data", required=True, help="dataset cache from synth-data")
        p.add_argument("--mode", default=None, choices=["bl", "pe", "me", "ee"])
        p.add_argument("--n", type=int, default=None, help="ensemble count")
        p.add_argument("--arch", default=None, help="architecture preset name")
        p.add_argument("--filter-multiplier", type=float, default=None)
        p.add_argument("--preset", default=None, choices=sorted(PRESETS))
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--dtype", default=None, choices=["float32", "float64"])
        p.add_argument("--augmentation", default=None,
                       help="JSON list of pipeline stages, e.g. "
                            "'[\"rotation\", {\"repeat\": 4}]'")
        if name == "train":
            p.add_argument("--out", default=None, help="checkpoint output path")
        else:
            p.add_argument("--trials", type=int, default=None)
            p.add_argument("--csv", default=None, help="per-trial CSV output")
            p.add_argument("--json", dest="json_out", default=None,
                           help="summary JSON output")
        if name == "ablate":
            p.add_argument("--codes", default="GGN,CGN,GG1,GLN,CL1")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("equivalence-check")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--arch", default="vgg8-desk")
    p.add_argument("--depth", type=int, default=None, help="number of blocks")
    p.add_argument("--width", type=int, default=64, help="input width")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--grad-tol", type=float, default=1e-8)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_config(args) -> TrainConfig:
    raw: dict = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    preset_name = args.preset or raw.pop("preset", None)
    cfg = TrainConfig()
    if preset_name:
        for key, value in PRESETS[preset_name].items():
            if key != "trials":
                setattr(cfg, key, value)
    spec = None
    if "ensemble" in raw:
        spec = ArchitectureSpec.from_dict(raw.pop("ensemble"))
    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise SystemExit(f"unknown config field {key!r}")
        setattr(cfg, key, value)

    if args.arch or spec is None:
        arch = args.arch or "vgg8-desk"
        spec = preset_spec(arch)
    mode = (args.mode or spec.ensemble_mode).upper()
    n = args.n if args.n is not None else (spec.n_ensemble if mode != "BL" else 1)
    if mode == "BL":
        n = 1
    spec = spec.replace(ensemble_mode=mode, n_ensemble=n)
    if args.filter_multiplier is not None:
        spec = spec.replace(filter_multiplier=args.filter_multiplier)
    cfg.ensemble = spec

    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dtype is not None:
        cfg.dtype = args.dtype
    if args.augmentation is not None:
        cfg.augmentation = json.loads(args.augmentation)
    return cfg


def _load_split(path: str, split: str):
    splits = load_datasets(path)
    if split not in splits:
        raise SystemExit(f"dataset cache {path} has splits {sorted(splits)}, "
                         f"no {split!r}")
    return splits[split]


CSV_COLUMNS = ["trial_id", "mode", "N", "params", "epochs", "test_accuracy",
               "converged", "seconds"]


def _write_trials_csv(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.to_row())


def _cmd_synth_data(args) -> int:
    train_ds, test_ds = make_synth_dataset(
        num_subjects=args.subjects, n_train=args.train_subjects,
        n_test=args.test_subjects, seed=args.seed, classes=args.classes,
        channels=args.channels, width=args.width)
    save_datasets(args.out, {"train": train_ds, "test": test_ds})
    if args.csv_dir:
        recs = synth_generate(args.subjects, classes=args.classes,
                              channels=args.channels, width=args.width,
                              seed=args.seed)
        write_csv(recs, args.csv_dir,
                  classes=[f"class{k}" for k in range(args.classes)])
    print(f"wrote {args.out}: train {len(train_ds)} windows "
          f"({len(train_ds.subject_set())} subjects), test {len(test_ds)} windows "
          f"({len(test_ds.subject_set())} subjects)")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    bundle = build(cfg.ensemble, cfg.seed, dtype=np.dtype(cfg.dtype))
    result = train(bundle, train_ds, cfg, test_dataset=test_ds)
    print(json.dumps(result.to_row()))
    if args.out:
        paths = save_checkpoint(bundle, args.out)
        print(f"checkpoint: {', '.join(str(p) for p in paths)}")
    return 0 if result.converged else 1


def _cmd_eval(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    ds = _load_split(args.data, args.split)
    acc = evaluate_accuracy(bundle, ds)
    print(json.dumps({"split": args.split, "accuracy": acc,
                      "windows": len(ds)}))
    return 0


def _cmd_trials(args) -> int:
    cfg = _load_config(args)
    num = args.trials or PRESETS[args.preset]["trials"] if args.preset else args.trials
    num = num or 10
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    results, summary = run_trials(cfg, num, train_ds, test_ds)
    summary_doc = {"config": {"mode": cfg.ensemble.ensemble_mode,
                              "n": cfg.ensemble.n_ensemble,
                              "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                              "learning_rate": cfg.learning_rate,
                              "seed": cfg.seed}, **summary}
    if args.csv:
        _write_trials_csv(args.csv, results)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(summary_doc, indent=2))
    print(json.dumps(summary_doc))
    return 0 if not summary["failed"] else 1


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    codes = [c.strip().upper() for c in args.codes.split(",") if c.strip()]
    num = args.trials or 10
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    base_spec = cfg.ensemble.replace(ensemble_mode="EE")
    summaries = []
    all_results = []
    for code in codes:
        def builder(seed: int, _code=code):
            return build_ablation_variant(_code, base_spec, seed,
                                          dtype=np.dtype(cfg.dtype))

        results, summary = run_trials(cfg, num, train_ds, test_ds, builder=builder)
        all_results.extend(results)
        summaries.append({"code": code, **summary})
        print(json.dumps(summaries[-1]))
    if args.csv:
        _write_trials_csv(args.csv, all_results)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(summaries, indent=2))
    return 0


def _cmd_equivalence(args) -> int:
    overrides = {"input_width": args.width}
    if args.depth is not None:
        overrides["num_blocks"] = args.depth
    spec = preset_spec(args.arch, **overrides)
    try:
        report = equivalence_check(spec, args.n, trials=args.trials,
                                   tolerance=args.tol, grad_tolerance=args.grad_tol,
                                   seed=args.seed)
    except ValueError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    print(report.format_table())
    return 0 if report.passed else 1


def cli_main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth-data": _cmd_synth_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "trials": _cmd_trials,
        "ablate": _cmd_ablate,
        "equivalence-check": _cmd_equivalence,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
