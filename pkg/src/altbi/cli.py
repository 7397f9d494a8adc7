"""Command-line entry point: ``altbi <command> ...``.

Every training command runs once per seed and writes

    <out>/seed_<s>/scores.csv   sample_index,score
    <out>/seed_<s>/trace.csv    t,n_t,tau,kept,kept_outlier_frac,mean_loss,auc  (ALTBI commands)
    <out>/report.json

``report.json`` is written with sorted keys; two runs with the same
arguments differ only in ``wall_clock_seconds``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import OdimConfig, odim_train_and_score, plain_hyperparams, plain_score
from .core import TRACE_COLUMNS, HyperParams, TrainingError, score_heldout, train
from .data import DataError, SynthSpec, gen_synthetic, load_csv, minmax_scale, save_csv, split_ssod
from .metrics import evaluate
from .optim import DpConfig

SCHEMA_VERSION = 1
SWEEPABLE = {"n0": int, "gamma": float, "rho": float, "T0": int, "T1": int, "T2": int, "K": int, "lr": float}


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError("seeds must be a non-empty list without repeats")
    return seeds


def _unit_interval(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {v}")
    return v


def _at_least_one(text):
    v = float(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a value >= 1, got {v}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _add_data_args(p, ssod=True):
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--label", help="name (or index) of the 0/1 label column; 1 = outlier")
    p.add_argument("--no-scale", dest="scale", action="store_false", help="skip min-max scaling")
    if ssod:
        p.add_argument("--ssod", action="store_true",
                       help="train on 70%% of the inliers, score the remaining rows (needs --label)")
        p.add_argument("--ssod-ratio", type=_unit_interval, default=0.7)


def _add_run_args(p):
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2], help="comma-separated, default 0,1,2")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=_positive_int, default=1, help="seeds run in parallel processes")


def _add_model_args(p):
    p.add_argument("--K", type=_positive_int, default=2, help="importance samples per row")
    p.add_argument("--score-K", type=_positive_int, default=None, help="importance samples when scoring")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--latent-dim", type=_positive_int, default=None, help="default clamp(ceil(D/4), 2, 32)")


def _add_schedule_args(p):
    p.add_argument("--n0", type=_positive_int, default=128, help="initial batch size")
    p.add_argument("--gamma", type=_at_least_one, default=1.03, help="batch growth per update")
    p.add_argument("--rho", type=_unit_interval, default=0.92, help="kept quantile of batch losses")
    p.add_argument("--T0", type=int, default=10, help="warm-up updates")
    p.add_argument("--T1", type=int, default=60, help="updates before scoring starts")
    p.add_argument("--T2", type=int, default=80, help="truncated updates")


def _add_dp_args(p):
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--noise-multiplier", type=float, default=0.7)
    p.add_argument("--no-shift", dest="shift_threshold", action="store_false",
                   help="threshold each batch by its own quantile instead of the previous one")


def build_parser():
    ap = argparse.ArgumentParser(prog="altbi", description="Outlier detection with truncated IWAE training.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="ALTBI training and scoring")
    _add_data_args(p), _add_run_args(p), _add_schedule_args(p), _add_model_args(p)

    p = sub.add_parser("dp-train", help="ALTBI with clipped, noised per-sample gradients")
    _add_data_args(p), _add_run_args(p), _add_schedule_args(p), _add_model_args(p), _add_dp_args(p)

    p = sub.add_parser("plain", help="fixed-batch training on the untruncated loss")
    _add_data_args(p), _add_run_args(p), _add_model_args(p)
    p.add_argument("--n0", type=_positive_int, default=128, help="batch size")
    p.add_argument("--updates", type=int, default=100, help="score after this many updates")

    p = sub.add_parser("odim", help="ODIM ensemble baseline")
    _add_data_args(p), _add_run_args(p), _add_model_args(p)
    p.add_argument("--models", type=_positive_int, default=3)
    p.add_argument("--max-updates", type=_positive_int, default=100)
    p.add_argument("--batch-size", type=_positive_int, default=128)

    p = sub.add_parser("sweep", help="ALTBI over several values of one hyperparameter")
    _add_data_args(p), _add_run_args(p), _add_schedule_args(p), _add_model_args(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEPABLE))
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("eval", help="ROC-AUC and PR-AUC of a scores file")
    p.add_argument("--scores", required=True, help="CSV with columns sample_index,score")
    p.add_argument("--labels", required=True, help="CSV holding the 0/1 labels")
    p.add_argument("--label", default=None, help="label column in --labels (default: the last column)")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=_positive_int, default=2000)
    p.add_argument("--d", type=_positive_int, default=10)
    p.add_argument("--alpha", type=float, default=0.05, help="outlier fraction")
    p.add_argument("--components", type=_positive_int, default=2)
    p.add_argument("--mode", choices=("uniform-box", "shifted-gaussian"), default="uniform-box")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")
    return ap


def hyperparams_from(args, seed):
    """HyperParams for one seed; flags a command does not define keep their defaults."""
    fields = {name: getattr(args, name) for name in ("n0", "gamma", "rho", "T0", "T1", "T2", "K", "lr")
              if hasattr(args, name)}
    dp = DpConfig()
    if args.command == "dp-train":
        dp = DpConfig(True, args.clip_norm, args.noise_multiplier, args.shift_threshold)
    return HyperParams(**fields, seed=seed, score_K=args.score_K, latent_dim=args.latent_dim, dp=dp)


def _load(args, seed):
    """Returns (train rows, rows to score, their original indices, their labels)."""
    ds = load_csv(args.data, label_column=args.label)
    if args.ssod:
        if ds.labels is None:
            raise DataError("--ssod needs --label")
        train_ds, test_ds, _, test_idx = split_ssod(ds, args.ssod_ratio, seed)
        if args.scale:
            train_ds = minmax_scale(train_ds)
            test_ds = minmax_scale(test_ds, reference=train_ds)
        return train_ds, test_ds, test_idx, test_ds.labels
    if args.scale:
        ds = minmax_scale(ds)
    return ds, None, np.arange(ds.n), ds.labels


def _write_scores(path, index, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "score"])
        for i, s in zip(index, scores):
            w.writerow([int(i), _fmt(s)])


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace.rows:
            w.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])


def run_seed(args, seed, out):
    """Train and score for one seed; returns the per-seed report entry."""
    out = Path(out)
    seed_dir = out / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, index, labels = _load(args, seed)
    entry = {"seed": seed, "scores": f"seed_{seed}/scores.csv"}
    hp = hyperparams_from(args, seed)
    trace_labels = train_ds.labels if test_ds is None else None
    if args.command in ("train", "dp-train", "sweep"):
        result = train(train_ds.X, hp, labels=trace_labels, keep_snapshots=test_ds is not None)
        scores = result.scores if test_ds is None else score_heldout(result, test_ds.X)
        _write_trace(seed_dir / "trace.csv", result.trace)
        entry["trace"] = f"seed_{seed}/trace.csv"
    elif args.command == "plain":
        if test_ds is not None:
            raise DataError("--ssod is not supported by 'plain'")
        scores = plain_score(train_ds.X, plain_hyperparams(hp, n0=args.n0), at_update=args.updates)
    elif args.command == "odim":
        cfg = OdimConfig(args.models, args.max_updates, args.batch_size)
        res = odim_train_and_score(train_ds.X, cfg, hp)
        scores = res.scores if test_ds is None else res.score(test_ds.X)
        entry["selected_updates"] = res.selected_updates
    else:
        raise ValueError(f"not a training command: {args.command}")
    if not np.all(np.isfinite(scores)):
        raise ValueError(f"seed {seed}: non-finite scores")
    _write_scores(seed_dir / "scores.csv", index, scores)
    if labels is not None and 0 < labels.sum() < len(labels):
        entry.update(evaluate(scores, labels).as_dict())
    return entry


def _summary(entries):
    out = {}
    for key in ("auc", "prauc"):
        vals = [e[key] for e in entries if key in e]
        if vals:
            out[f"{key}_mean"] = float(np.mean(vals))
            out[f"{key}_std"] = float(np.std(vals))
    return out


def _run_seeds(args, out):
    if args.jobs > 1 and len(args.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(args.seeds))) as pool:
            entries = list(pool.map(run_seed, [args] * len(args.seeds), args.seeds, [out] * len(args.seeds)))
    else:
        entries = [run_seed(args, s, out) for s in args.seeds]
    return sorted(entries, key=lambda e: e["seed"])


def _config_echo(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("jobs", "out", "values", "param")}
    if args.command in ("train", "dp-train", "sweep"):
        hp = hyperparams_from(args, seed=0)
        cfg["effective"] = {k: v for k, v in asdict(hp).items() if k != "seed"}
        cfg["effective"]["encoder_hidden"] = list(hp.encoder_hidden)
        cfg["effective"]["decoder_hidden"] = list(hp.decoder_hidden)
    return cfg


def write_report(out, report):
    Path(out).mkdir(parents=True, exist_ok=True)
    with open(Path(out) / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def cmd_run(args):
    config = _config_echo(args)
    start = time.perf_counter()
    entries = _run_seeds(args, args.out)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "config": config,
        "seeds": entries,
        "summary": _summary(entries),
        "wall_clock_seconds": time.perf_counter() - start,
    }
    write_report(args.out, report)
    _print_summary(args.command, report["summary"], len(entries))
    return 0


def cmd_sweep(args):
    cast = SWEEPABLE[args.param]
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise DataError(f"--values must be {cast.__name__}s, got {args.values!r}") from None
    start = time.perf_counter()
    runs = []
    for v in values:
        sub = argparse.Namespace(**vars(args))
        setattr(sub, args.param, v)
        hyperparams_from(sub, seed=0)  # rejects out-of-range values before any training
        subdir = f"{args.param}={v}"
        entries = _run_seeds(sub, Path(args.out) / subdir)
        for e in entries:
            for key in ("scores", "trace"):
                if key in e:
                    e[key] = f"{subdir}/{e[key]}"
        runs.append({"value": v, "seeds": entries, "summary": _summary(entries)})
        print(f"{args.param}={v}: " + _summary_line(runs[-1]["summary"]))
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "sweep",
        "config": _config_echo(args) | {"param": args.param, "values": values},
        "runs": runs,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    write_report(args.out, report)
    return 0


def _summary_line(summary):
    if not summary:
        return "no labels, no metrics"
    return f"auc {summary['auc_mean']:.4f} +/- {summary['auc_std']:.4f}  prauc {summary['prauc_mean']:.4f}"


def _print_summary(command, summary, n_seeds):
    print(f"{command}: {n_seeds} seed(s); " + _summary_line(summary))


def _read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "score" not in rows[0]:
        raise DataError(f"{path}: expected a header with a 'score' column")
    try:
        index = [int(r["sample_index"]) for r in rows] if "sample_index" in rows[0] else None
        scores = np.array([float(r["score"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return index, scores


def cmd_eval(args):
    index, scores = _read_scores(args.scores)
    labels = load_csv(args.labels, label_column=args.label if args.label is not None else -1).labels
    if len(labels) != len(scores) and index is not None and max(index) < len(labels):
        # scores of a subset (e.g. an SSOD test split) against the full label file
        labels = labels[np.asarray(index)]
    if len(labels) != len(scores):
        raise DataError(f"{len(scores)} scores but {len(labels)} labels")
    result = evaluate(scores, labels)
    if args.json:
        print(json.dumps(result.as_dict(), sort_keys=True))
    else:
        print(f"auc {result.auc:.6f}\nprauc {result.prauc:.6f}\nn_pos {result.n_pos}\nn_neg {result.n_neg}")
    return 0


def cmd_synth(args):
    spec = SynthSpec(n=args.n, D=args.d, alpha=args.alpha, n_components=args.components,
                     outlier_mode=args.mode, seed=args.seed)
    ds = gen_synthetic(spec)
    save_csv(ds, args.out)
    print(f"wrote {args.out}: {ds.n} rows, {int(ds.labels.sum())} outliers")
    return 0


COMMANDS = {"train": cmd_run, "dp-train": cmd_run, "plain": cmd_run, "odim": cmd_run,
            "sweep": cmd_sweep, "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "ssod", False) and args.label is None:
        print("altbi: error: --ssod needs --label", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (DataError, TrainingError, ValueError, OSError) as exc:
        print(f"altbi: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
