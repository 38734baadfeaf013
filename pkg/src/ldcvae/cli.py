"""Command line entry point: ``ldcvae {simulate,train,eval,cv,check}``.

Log verbosity comes from ``LDCVAE_LOG_LEVEL`` (default WARNING).  Failures
print one JSON object to stderr and exit nonzero: 1 when a check fails,
2 for usage errors, 3 for bad inputs or data files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import CohortSpec, generate_cohort, mask_genomics, read_cohort, read_manifest, write_cohort
from .errors import LdCvaeError
from .model import load_checkpoint
from .oracles import run_checks
from .pipeline import ETA_GRID, TrainConfig, evaluate, run_cv, train_fold

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_INPUT = 3


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def _config_for_cohort(config_path, cohort) -> TrainConfig:
    """Training config with input widths taken from the cohort manifest."""
    config = TrainConfig.from_json(_load_json(config_path))
    manifest = read_manifest(cohort)
    dims = tuple(int(v) for v in manifest["genomic_schema"].values())
    return replace(config, model=replace(config.model, d_path=int(manifest["d_path"]), genomic_dims=dims))


def cmd_simulate(args) -> int:
    spec = CohortSpec.from_json(_load_json(args.spec))
    records = generate_cohort(spec)
    write_cohort(records, args.out, spec)
    print(json.dumps({"patients": len(records), "out": str(args.out)}))
    return 0


def cmd_train(args) -> int:
    config = _config_for_cohort(args.config, args.cohort)
    records = read_cohort(args.cohort)
    if args.fold is not None:
        records = [r for r in records if r.fold != args.fold]
    log_path = args.log or f"{args.out}.loss.jsonl"
    fit = train_fold(records, config, log_path=log_path)
    fit.model.save(args.out, metadata={"bin_edges": fit.edges.tolist(), "train": config.to_json(),
                                       "excluded_fold": args.fold})
    print(json.dumps({"checkpoint": str(args.out), "optimizer_steps": fit.optimizer_steps,
                      "loss_log": str(log_path)}))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    records = read_cohort(args.cohort)
    if args.fold is not None:
        records = [r for r in records if r.fold == args.fold]
    if args.missing_rate:
        records = mask_genomics(records, args.missing_rate, args.seed)
    res = evaluate(model, records)
    high = set(res.high.tolist())
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "risk", "has_genomics", "group"])
        for i, rec in enumerate(records):
            w.writerow([rec.id, repr(float(res.risks[i])), int(rec.has_genomics), "high" if i in high else "low"])
    print(json.dumps({"c_index": res.c_index, "missing_rate": args.missing_rate, "patients": len(records),
                      "logrank_p": res.logrank.p_value if res.logrank else None}))
    return 0


def cmd_cv(args) -> int:
    config = _config_for_cohort(args.config, args.cohort)
    records = read_cohort(args.cohort)
    folds = [int(f) for f in args.folds.split(",")] if args.folds else range(5)
    cv = run_cv(records, config, report_dir=args.report, folds=folds, baseline=args.baseline,
                etas=ETA_GRID if args.sweep else None)
    print(json.dumps({k: {"mean": m, "std": s} for k, (m, s) in cv.summary().items()}))
    return 0


def cmd_check(args) -> int:
    results = run_checks()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        _diagnose("CheckFailed", f"failed: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldcvae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    s.add_argument("--spec", help="JSON cohort spec (defaults for missing fields)")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train on a cohort and write a checkpoint")
    s.add_argument("--cohort", required=True, type=Path)
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--fold", type=int, help="hold this fold out of training")
    s.add_argument("--log", type=Path, help="loss JSON-lines path (default <out>.loss.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a cohort")
    s.add_argument("--cohort", required=True, type=Path)
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--missing-rate", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0, help="seed for choosing masked patients")
    s.add_argument("--fold", type=int, help="evaluate only this fold")
    s.add_argument("--report", required=True, type=Path)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cv", help="5-fold cross-validation")
    s.add_argument("--cohort", required=True, type=Path)
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--report", required=True, type=Path)
    s.add_argument("--folds", help="comma-separated subset of folds")
    s.add_argument("--baseline", action="store_true", help="also train the pathology-only baseline")
    s.add_argument("--sweep", action="store_true", help="evaluate the missing-rate sweep")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("check", help="run the oracle suites")
    s.set_defaults(func=cmd_check)
    return p


def _diagnose(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LDCVAE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        return args.func(args)
    except (LdCvaeError, OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        _diagnose(type(exc).__name__, str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
