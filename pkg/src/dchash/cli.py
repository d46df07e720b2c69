"""Command-line entry point for the full pipeline.

Subcommands: synth, inject, train, eval, sweep, boxplot, inspect.  Every run
prints a one-line JSON summary (including the flags and seeds used) to stdout.
Exit codes: 0 success, 1 usage error, 2 runtime/numeric/file error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from dchash import dataset as dataset_mod
from dchash import model as model_mod
from dchash import retrieval as retrieval_mod
from dchash import trainer as trainer_mod
from dchash.losses import LossSpec
from dchash.trainer import TrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _repro(args: argparse.Namespace) -> dict:
    record = {k: v for k, v in vars(args).items() if k != "func"}
    record["threads"] = os.environ.get("DCMH_THREADS", "")
    return record


def _load_config(args) -> TrainConfig:
    if args.config:
        with open(args.config) as f:
            cfg = TrainConfig.from_json(f.read())
    else:
        cfg = TrainConfig()
    overrides = {}
    for name in ("epochs", "warmup_epochs", "batch_size", "lr", "tau", "k", "variant", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    cfg = replace(cfg, **overrides)
    loss_overrides = {}
    for name in ("alpha", "beta", "gamma", "eta"):
        v = getattr(args, name, None)
        if v is not None:
            loss_overrides[name] = v
    if loss_overrides:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_overrides))
    return cfg


def _cmd_synth(args):
    ds = dataset_mod.generate_synthetic(
        n=args.n, m=args.m, d_x=args.dx, d_y=args.dy,
        labels_per_instance=(args.labels_min, args.labels_max),
        cluster_spread=args.spread, seed=args.seed,
    )
    dataset_mod.save_dataset(ds, args.out)
    if args.csv:
        dataset_mod.export_csv(ds, args.csv)
    _emit({"command": "synth", "n": ds.n, "m": ds.m, "d_x": ds.d_x, "d_y": ds.d_y,
           "out": args.out, "repro": _repro(args)})


def _cmd_inject(args):
    ds = dataset_mod.load_dataset(getattr(args, "in"))
    noisy, mask = dataset_mod.inject_noise(ds, args.tau, args.seed)
    dataset_mod.save_dataset(noisy, args.out)
    dataset_mod.save_mask(mask, args.mask)
    counts = {int(t): int(np.sum(mask.noise_type == t)) for t in range(1, 5)}
    _emit({"command": "inject", "corrupted": int(mask.corrupted.sum()),
           "per_type": counts, "out": args.out, "mask": args.mask, "repro": _repro(args)})


def _cmd_train(args):
    cfg = _load_config(args)
    ds = dataset_mod.load_dataset(args.data)
    mask = dataset_mod.load_mask(args.mask) if args.mask else None
    want_diag = bool(args.filter_diag or args.corrector_diag)
    params, report = trainer_mod.train(ds, cfg, mask=mask, collect_diagnostics=want_diag)
    if args.filter_diag:
        with open(args.filter_diag, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "batch", "instance", "t", "flagged", "true_corrupted"])
            for row in report.filter_rows:
                w.writerow([row[0], row[1], row[2], repr(row[3]), int(row[4]),
                            "" if row[5] is None else int(row[5])])
    if args.corrector_diag:
        with open(args.corrector_diag, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "batch", "instance", "donor_j", "donor_k", "donors_agree", "matches_original"])
            for row in report.corrector_rows:
                w.writerow([row[0], row[1], row[2], row[3], row[4], int(row[5]),
                            "" if row[6] is None else int(row[6])])
    model_mod.save_checkpoint(params, args.ckpt)
    if args.report:
        with open(args.report, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "warmup", "pointwise", "pairwise", "contrastive",
                        "center", "quantization", "total", "n_flagged", "n_corrected",
                        "n_unlabeled", "filter_precision", "filter_recall", "correction_accuracy"])
            for r in report.epochs:
                w.writerow([r.epoch, int(r.warmup), repr(r.pointwise), repr(r.pairwise),
                            repr(r.contrastive), repr(r.center), repr(r.quantization),
                            repr(r.total), r.n_flagged, r.n_corrected, r.n_unlabeled,
                            "" if r.filter_precision is None else repr(r.filter_precision),
                            "" if r.filter_recall is None else repr(r.filter_recall),
                            "" if r.correction_accuracy is None else repr(r.correction_accuracy)])
    _emit({"command": "train", "ckpt": args.ckpt, "config": asdict(cfg),
           **report.summary(), "repro": _repro(args)})


def _cmd_eval(args):
    params = model_mod.load_checkpoint(args.ckpt)
    db = dataset_mod.load_dataset(args.retrieval)
    queries = dataset_mod.load_dataset(args.test)
    for name, d in (("retrieval", db), ("test", queries)):
        if d.d_x != params.d_x or d.d_y != params.d_y:
            raise ValueError(
                f"{name} set dims ({d.d_x}, {d.d_y}) do not match checkpoint ({params.d_x}, {params.d_y})"
            )
    db_codes = model_mod.binarize(trainer_mod._forward_all(params, db))
    q_codes = model_mod.binarize(trainer_mod._forward_all(params, queries))
    index = retrieval_mod.build_index(db_codes, db.labels)
    if args.index_out:
        retrieval_mod.save_index(index, args.index_out)
    rankings = [retrieval_mod.rank(q_codes[i], index) for i in range(queries.n)]
    rel = retrieval_mod.relevance_matrix(queries.labels, db.labels)
    result = {"map": retrieval_mod.mean_average_precision(rankings, rel)}

    prefix = args.out_prefix
    aps = [retrieval_mod.average_precision(rel[i][rankings[i].order]) for i in range(queries.n)]
    with open(prefix + "_ap.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query", "ap"])
        for i, ap in enumerate(aps):
            w.writerow([i, repr(ap)])
    if args.pn:
        n_list = [int(v) for v in args.pn.split(",")]
        pn = retrieval_mod.precision_at_n(rankings, rel, n_list)
        result["p_at_n"] = {str(n): v for n, v in pn.items()}
        with open(prefix + "_pn.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["n", "precision"])
            for n in n_list:
                w.writerow([n, repr(pn[n])])
    if args.pr:
        rows = retrieval_mod.pr_curve(rankings, rel, params.k)
        with open(prefix + "_pr.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["radius", "precision", "recall"])
            for r, p, rc in rows:
                w.writerow([r, repr(p), repr(rc)])
    with open(prefix + "_summary.json", "w") as f:
        json.dump(result, f, sort_keys=True, indent=2)
    _emit({"command": "eval", **result, "repro": _repro(args)})


def _cmd_sweep(args):
    cfg = _load_config(args)
    clean = dataset_mod.load_dataset(args.data)
    db = dataset_mod.load_dataset(args.retrieval)
    queries = dataset_mod.load_dataset(args.test)
    values = [float(v) for v in args.values.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    rows = trainer_mod.sweep(cfg, clean, db, queries, args.param, values, seeds,
                             noise_seed=args.noise_seed)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["param", "value", "seed", "map", "error"])
        for r in rows:
            w.writerow([r["param"], repr(r["value"]), r["seed"],
                        "" if r["map"] is None else repr(r["map"]), r["error"] or ""])
    failed = sum(1 for r in rows if r["error"])
    _emit({"command": "sweep", "cells": len(rows), "failed": failed,
           "out": args.out, "repro": _repro(args)})


def _cmd_boxplot(args):
    params = model_mod.load_checkpoint(args.ckpt)
    ds = dataset_mod.load_dataset(args.data)
    mask = dataset_mod.load_mask(args.mask)
    codes = trainer_mod._forward_all(params, ds)
    if args.binary:
        codes = model_mod.binarize(codes)
    stats = retrieval_mod.boxplot_stats(codes, params.centers, ds.labels, mask.noise_type)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "min", "q1", "median", "q3", "max"])
        for group, q in stats.items():
            w.writerow([group] + [repr(q[key]) for key in ("min", "q1", "median", "q3", "max")])
    _emit({"command": "boxplot", "groups": sorted(stats), "out": args.out, "repro": _repro(args)})


def _cmd_inspect(args):
    path = getattr(args, "in")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == dataset_mod.DATASET_MAGIC:
        ds = dataset_mod.load_dataset(path)
        info = {"kind": "dataset", "n": ds.n, "d_x": ds.d_x, "d_y": ds.d_y, "m": ds.m, "seed": ds.seed}
    elif magic == dataset_mod.MASK_MAGIC:
        mask = dataset_mod.load_mask(path)
        info = {"kind": "mask", "n": mask.n, "corrupted": int(mask.corrupted.sum())}
    elif magic == model_mod.CHECKPOINT_MAGIC:
        p = model_mod.load_checkpoint(path)
        info = {"kind": "checkpoint", "d_x": p.d_x, "d_y": p.d_y, "h": p.h, "p": p.p, "k": p.k, "m": p.m}
    elif magic == retrieval_mod.INDEX_MAGIC:
        idx = retrieval_mod.load_index(path)
        info = {"kind": "index", "n": idx.n, "k": idx.k, "m": idx.labels.shape[1]}
    else:
        raise dataset_mod.FormatError(f"unrecognized magic {magic!r} at offset 0 in {path}")
    _emit({"command": "inspect", **info, "repro": _repro(args)})


def build_parser() -> _Parser:
    parser = _Parser(prog="dchash", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--dx", type=int, default=32)
    p.add_argument("--dy", type=int, default=32)
    p.add_argument("--labels-min", type=int, default=1)
    p.add_argument("--labels-max", type=int, default=3)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="optional inspection CSV")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("inject", help="inject label noise")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", required=True)
    p.set_defaults(func=_cmd_inject)

    p = sub.add_parser("train", help="train the hashing network")
    p.add_argument("--config", default=None, help="JSON config mirroring TrainConfig")
    p.add_argument("--data", required=True)
    p.add_argument("--mask", default=None, help="noise mask for diagnostics only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", default=None, help="per-epoch CSV report")
    p.add_argument("--filter-diag", default=None, help="per-instance filter diagnostic CSV")
    p.add_argument("--corrector-diag", default=None, help="per-instance corrector diagnostic CSV")
    for name, typ in (("epochs", int), ("warmup-epochs", int), ("batch-size", int),
                      ("lr", float), ("tau", float), ("k", int), ("seed", int),
                      ("alpha", float), ("beta", float), ("gamma", float), ("eta", float)):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--variant", choices=trainer_mod.VARIANTS, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="hash, rank and score a retrieval/test pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--retrieval", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--pn", default=None, help="comma-separated top-N list")
    p.add_argument("--pr", action="store_true", help="emit the Hamming-radius PR curve")
    p.add_argument("--index-out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep over tau or a hyperparameter")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="clean training dataset")
    p.add_argument("--retrieval", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated settings")
    p.add_argument("--seeds", required=True, help="comma-separated training seeds")
    p.add_argument("--noise-seed", type=int, required=True)
    p.add_argument("--out", required=True)
    for name, typ in (("epochs", int), ("warmup-epochs", int), ("batch-size", int),
                      ("lr", float), ("tau", float), ("k", int)):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("boxplot", help="in/out-category score quartiles per clean/noisy subset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true", help="use sign-binarized codes")
    p.set_defaults(func=_cmd_boxplot)

    p = sub.add_parser("inspect", help="print the header of any artifact file")
    p.add_argument("--in", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except (OSError, ValueError, model_mod.NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
