"""Command-line entry point: ``pvguard {synth,train,eval,detect,export-patterns,grad-check}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .domain import SPLITS, AttackKind, Season
from .evaluation import THRESHOLD, UndefinedAUC, evaluate
from .formats import (
    ConfigError,
    DataError,
    RunConfig,
    confusion_csv_text,
    history_csv_text,
    load_checkpoint,
    load_run_config,
    read_dataset,
    read_detect_rows,
    report_dict,
    save_checkpoint,
    scores_csv_text,
    seasonal_csv_text,
    theft_example_csv_text,
    write_atomic,
    write_dataset,
)
from .model import assemble_input, init_params, predict_proba, temp_features
from .synth import build_dataset, seasonal_means, theft1, theft2
from .tensor import NumericError
from .train import fit

log = logging.getLogger("pvguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(args, rel: str) -> Path:
    p = Path(rel)
    if p.is_absolute():
        return p
    return Path(args.out or ".") / p


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.command == "synth":
            cfg.synth = replace(cfg.synth, seed=args.seed)
        else:
            cfg.model = replace(cfg.model, seed=args.seed)
            cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    ds = build_dataset(cfg.synth)
    path = _resolve(args, args.dataset or cfg.paths.dataset)
    write_dataset(ds, path)
    counts = ds.meta["class_counts"]
    print(f"wrote {len(ds)} records to {path} (benign {counts['none']}, theft1 {counts['theft1']}, "
          f"theft2 {counts['theft2']}; split {', '.join(f'{k} {len(v)}' for k, v in ds.split.items())})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = read_dataset(_resolve(args, args.dataset or cfg.paths.dataset))
    result = fit(init_params(cfg.model), ds, cfg.train, cfg.model)
    ckpt = _resolve(args, args.checkpoint or cfg.paths.checkpoint)
    hist = _resolve(args, cfg.paths.history)
    save_checkpoint(ckpt, result.params, cfg.model, result.norm, {
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "train_config": cfg.train.to_dict(),
    })
    write_atomic(hist, history_csv_text(result.history))
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss!r}; wrote {ckpt} and {hist}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ck = load_checkpoint(_resolve(args, args.checkpoint or cfg.paths.checkpoint))
    ds = read_dataset(_resolve(args, args.dataset or cfg.paths.dataset))
    idx = ds.split[args.split]
    records = [ds.records[i] for i in idx]
    if not records:
        raise DataError(f"split {args.split!r} is empty")
    metrics, scores = evaluate(ck.params, records, ck.norm, ck.model_config)
    out_dir = _resolve(args, cfg.paths.report_dir)
    report = report_dict(metrics, args.split, THRESHOLD)
    write_atomic(out_dir / f"report_{args.split}.json", json.dumps(report, indent=1) + "\n")
    write_atomic(out_dir / f"scores_{args.split}.csv", scores_csv_text(records, idx, scores))
    write_atomic(out_dir / f"confusion_{args.split}.csv", confusion_csv_text(metrics))
    print(f"split {args.split}")
    print(metrics.table())
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    ck = load_checkpoint(_resolve(args, args.checkpoint or cfg.paths.checkpoint))
    rows = read_detect_rows(args.input)
    X = np.stack([assemble_input(SimpleNamespace(**series), ck.norm) for series, _ in rows])
    Tf = np.stack([temp_features(temp, ck.norm) for _, temp in rows])
    probs = predict_proba(ck.params, X, Tf, ck.model_config)[:, 1]
    for i, p in enumerate(probs, start=1):
        verdict = "theft" if p >= THRESHOLD else "benign"
        print(f"row {i}: p_theft={p!r} verdict={verdict}")
    return EXIT_OK


def cmd_export_patterns(args) -> int:
    cfg = _config(args)
    ds = read_dataset(_resolve(args, args.dataset or cfg.paths.dataset))
    out_dir = _resolve(args, cfg.paths.report_dir)
    write_atomic(out_dir / "seasonal_patterns.csv", seasonal_csv_text(seasonal_means(ds.records)))

    # the sunniest honest day, shown next to both attacks applied to that same day
    best = max(ds.records, key=lambda r: (float(np.sum(r.actual_gen)), -r.day_index, -r.prosumer_id))
    rng = np.random.default_rng([ds.seed, best.day_index, best.prosumer_id, 0xF16])
    lo1, hi1 = cfg.synth.alpha_range
    lo2, hi2 = cfg.synth.beta_range
    alpha = float(rng.uniform(lo1, hi1))
    betas = rng.uniform(lo2, hi2, best.actual_gen.size)
    rows = [
        (AttackKind.NONE.value, None, best.actual_gen),
        (AttackKind.THEFT1.value, f"alpha={alpha!r}", theft1(best.actual_gen, alpha, cfg.synth.alpha_range)),
        (AttackKind.THEFT2.value, f"beta_mean={float(betas.mean())!r}", theft2(best.actual_gen, betas, cfg.synth.beta_range)),
    ]
    write_atomic(out_dir / "theft_example.csv",
                 theft_example_csv_text(best.prosumer_id, best.day_index, Season(best.season), rows))
    print(f"wrote {out_dir / 'seasonal_patterns.csv'} and {out_dir / 'theft_example.csv'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .verify import run_suite

    results = run_suite(seeds=args.seeds)
    print(f"{'op':<24}{'max rel err':>14}{'limit':>10}{'seeds':>7}{'sec':>7}  status")
    for r in results:
        print(f"{r.op:<24}{r.max_error:>14.3e}{r.threshold:>10.0e}{r.seeds:>7d}{r.seconds:>7.1f}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="run config JSON (defaults apply to missing sections)")
        p.add_argument("--out", help="directory that relative paths in the config resolve against")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth", help="synthesize a labelled dataset")
    common(p)
    p.add_argument("--dataset", help="output CSV path (overrides paths.dataset)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the detector")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p, seed=False)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="score day rows from a CSV")
    common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True, help="CSV in dataset schema; label and actual-generation columns optional")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("export-patterns", help="write seasonal-mean and theft-example CSVs for plotting")
    common(p, seed=False)
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_export_patterns)

    p = sub.add_parser("grad-check", help="finite-difference verification of every op")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_grad_check, config=None, out=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UndefinedAUC as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
