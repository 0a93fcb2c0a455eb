"""Command-line entry point: ``plants <subcommand> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataio import TimeSeriesDataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, NumericError, PeriodDetectionError, ShapeError
from .evaluation import (
    BenchRecord,
    anomaly_scores,
    auroc,
    bench_similarity,
    classify_probe,
    default_hmm_spec,
    difference,
    forecast_probe,
    gen_hmm_mts,
    trajectory_pca,
    window_features,
)
from .model import load_checkpoint
from .periodicity import amplitude_spectrum, top_k_periods
from .training import TrainingConfig, sweep, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("plants")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _csv_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _load(path, fmt=None) -> TimeSeriesDataset:
    ds = load_dataset(path, fmt)
    ds.check_finite()
    return ds


def _write_rows(rows: list[dict], out, stream=None) -> None:
    if not rows:
        return
    fields = list(rows[0].keys())
    if out:
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    if stream is not None:
        writer = csv.DictWriter(stream, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_periods(args) -> int:
    ds = _load(args.input, args.format)
    ps = top_k_periods(amplitude_spectrum(ds.values), args.k)
    print(f"{'f':>6} {'amplitude':>14} {'w':>6}")
    for f, amp, w in ps.rows():
        print(f"{f:>6d} {amp:>14.6f} {w:>6d}")
    return EXIT_OK


def _training_config(args) -> tuple[TrainingConfig, dict[str, str]]:
    extra: dict[str, str] = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg, extra = TrainingConfig.from_text(text)
    else:
        cfg = TrainingConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        parsed = TrainingConfig.from_mapping({key: value})
        overrides[key] = getattr(parsed, key)
        if key == "windows" and parsed.windows is not None:
            overrides["k"] = None
    for key in ("alpha", "lam", "k", "batch_size", "lr", "epochs", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.threads_flag is not None:
        overrides["threads"] = args.threads_flag
    if getattr(args, "windows", None):
        overrides["windows"] = tuple(_csv_ints(args.windows))
        overrides["k"] = None
    unknown = set(extra) - {"input", "output_dir", "format"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = cfg.updated(**overrides)
    cfg.validate()
    return cfg, extra


def cmd_train(args) -> int:
    cfg, extra = _training_config(args)
    input_path = args.input or extra.get("input")
    out_dir = args.out or extra.get("output_dir")
    if not input_path or not out_dir:
        raise UsageError("train needs --input and --out (or input / output_dir in the config)")
    ds = _load(input_path, args.format or extra.get("format"))
    run = train(cfg, ds.values, out_dir=out_dir)
    last = run.history[-1]
    print(f"trained {len(run.history)} epochs; final loss {last['total']:.6f}; "
          f"windows {list(run.period_set.windows)}")
    print(f"checkpoint: {run.checkpoint_path}")
    print(f"loss log:   {run.loss_log_path}")
    print(f"manifest:   {run.manifest_path}")
    return EXIT_OK


def _instance_out(out: Path) -> Path:
    return out.with_name(out.stem + ".instance" + (out.suffix or ".bin"))


def cmd_encode(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load(args.input, args.format)
    if ds.channels != model.config.input_dims:
        raise DataError(f"checkpoint expects {model.config.input_dims} channels, data has {ds.channels}")
    z = model.encode_full(model.preprocess(ds.values))
    out = Path(args.out)
    save_dataset(TimeSeriesDataset(z), out, "binary")
    inst_out = Path(args.instance_out) if args.instance_out else _instance_out(out)
    save_dataset(TimeSeriesDataset(z.max(axis=1, keepdims=True)), inst_out, "binary")
    print(f"wrote {z.shape} representations to {out} and instance vectors to {inst_out}")
    return EXIT_OK


def _probe_features(model, ds: TimeSeriesDataset, window):
    x = model.preprocess(ds.values)
    if ds.labels is None:
        raise DataError("classification probe needs labels")
    if ds.labels.ndim == 2 and window:
        feats, y, inst = window_features(model, x, ds.labels, window)
        return feats, y, inst
    return model.instance_vector(x), ds.instance_labels(), np.arange(ds.n)


def cmd_probe(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load(args.input, args.format)
    if ds.channels != model.config.input_dims:
        raise DataError(f"checkpoint expects {model.config.input_dims} channels, data has {ds.channels}")
    reports = []
    if args.task == "classify":
        feats, y, inst = _probe_features(model, ds, args.window)
        if args.test:
            test = _load(args.test, args.format)
            tf, ty, _ = _probe_features(model, test, args.window)
            reports.append(classify_probe(feats, y, tf, ty, kind=args.kind, seed=args.seed))
        else:
            cut = int(round(args.train_frac * ds.n))
            tr, te = inst < cut, inst >= cut
            reports.append(classify_probe(feats[tr], y[tr], feats[te], y[te], kind=args.kind, seed=args.seed))
    else:
        x = model.preprocess(ds.values)
        z = model.encode_full(x)
        for h in _csv_ints(args.horizons):
            reports.append(forecast_probe(z, x, h, lookback=args.lookback, reg=args.ridge, seed=args.seed))
    rows = [row for r in reports for row in r.rows()]
    _write_rows(rows, args.out, sys.stdout)
    for r in reports:
        summary = ", ".join(f"{k}={v:.4f} (baseline {r.baseline.get(k, float('nan')):.4f})"
                            for k, v in r.metrics.items())
        print(f"# {r.task}: {summary}; {r.note}", file=sys.stderr)
    return EXIT_OK


def cmd_anomaly(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load(args.input, args.format)
    if ds.channels != model.config.input_dims:
        raise DataError(f"checkpoint expects {model.config.input_dims} channels, data has {ds.channels}")
    values = difference(ds.values, args.diff) if args.diff else ds.values
    x = model.preprocess(values)
    instances = range(ds.n) if args.instance is None else [args.instance]
    rows, pos_scores, neg_scores = [], [], []
    for i in instances:
        if not 0 <= i < ds.n:
            raise DataError(f"instance {i} outside [0, {ds.n})")
        scores = anomaly_scores(model, x[i])
        for t, s in enumerate(scores):
            rows.append({"instance": i, "t": t + args.diff, "score": float(s)})
        if args.auroc:
            if ds.labels is None or ds.labels.ndim != 2:
                raise DataError("--auroc needs per-timestep labels (nonzero = anomaly)")
            lab = ds.labels[i, args.diff :] > 0
            pos_scores.extend(scores[lab])
            neg_scores.extend(scores[~lab])
    _write_rows(rows, args.out, None if args.out else sys.stdout)
    if pos_scores and neg_scores:
        print(f"# AUROC vs labels: {auroc(pos_scores, neg_scores):.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    rec = bench_similarity(args.l, args.n, args.c, args.kernel, repeats=args.repeats,
                           batch_size=args.batch_size, window=args.window, seed=args.seed,
                           threads=args.threads)
    row = rec.as_row()
    if args.out:
        path = Path(args.out)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(BenchRecord.FIELDS))
            if new:
                writer.writeheader()
            writer.writerow(row)
    _write_rows([row], None, sys.stdout)
    print(f"# {rec.kernel}: precompute {rec.precompute_mean:.3f}±{rec.precompute_std:.3f}s, "
          f"epoch {rec.epoch_mean:.3f}±{rec.epoch_std:.3f}s", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = default_hmm_spec(args.c, n_states=args.states, dwell=args.dwell, stay=args.stay, noise=args.noise)
    ds = gen_hmm_mts(spec, args.n, args.l, args.c, seed=args.seed)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {ds.values.shape} series with per-step state labels to {args.out}")
    return EXIT_OK


def cmd_traj(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load(args.input, args.format)
    if not 0 <= args.instance < ds.n:
        raise DataError(f"instance {args.instance} outside [0, {ds.n})")
    z = model.encode_full(model.preprocess(ds.values[args.instance]))
    proj, ratios = trajectory_pca(z, 3)
    rows = []
    for t in range(proj.shape[0]):
        row = {"t": t}
        for j in range(3):
            row[f"pc{j + 1}"] = float(proj[t, j]) if j < proj.shape[1] else 0.0
        label = ""
        if ds.labels is not None:
            label = int(ds.labels[args.instance, t]) if ds.labels.ndim == 2 else int(ds.labels[args.instance])
        row["state_label"] = label
        rows.append(row)
    _write_rows(rows, args.out, None if args.out else sys.stdout)
    print("# explained variance ratios: " + ", ".join(f"{r:.4f}" for r in ratios), file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, extra = _training_config(args)
    input_path = args.input or extra.get("input")
    if not input_path:
        raise UsageError("sweep needs --input")
    ds = _load(input_path, args.format)

    def metric(run, values):
        x = run.standardization.apply(values)
        z = run.model.encode_full(x)
        return forecast_probe(z, x, args.horizon, lookback=args.lookback).metrics["mse"]

    rows = sweep(cfg, ds.values, _csv_floats(args.alphas), _csv_floats(args.lams), metric)
    _write_rows(rows, args.out, sys.stdout)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of randomness")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default 1, deterministic)")
    common.add_argument("--format", choices=["csv", "binary"], default=None, help="input data format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="plants", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"plants {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("periods", parents=[common], help="dominant periods and window sizes")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_periods)

    def training_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--input")
        p.add_argument("--alpha", type=float)
        p.add_argument("--lam", "--lambda", dest="lam", type=float)
        p.add_argument("--k", type=int)
        p.add_argument("--windows", help="comma-separated explicit window sizes (replaces --k)")
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("train", parents=[common], help="self-supervised training")
    training_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", parents=[common], help="per-step and instance representations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--instance-out", dest="instance_out")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("probe", parents=[common], help="classification / forecasting probes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="training split (or whole set without --test)")
    p.add_argument("--test")
    p.add_argument("--task", choices=["classify", "forecast"], default="classify")
    p.add_argument("--kind", choices=["linear", "knn"], default="linear")
    p.add_argument("--window", type=int, help="window-level probe on per-step labels")
    p.add_argument("--train-frac", dest="train_frac", type=float, default=0.75)
    p.add_argument("--horizons", default="8,16,32")
    p.add_argument("--lookback", type=int, default=16)
    p.add_argument("--ridge", type=float, default=1e-2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("anomaly", parents=[common], help="masked-vs-unmasked anomaly scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--instance", type=int)
    p.add_argument("--diff", type=int, default=0, help="differencing order d")
    p.add_argument("--auroc", action="store_true", help="report AUROC against per-step labels (nonzero = anomaly)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_anomaly)

    p = sub.add_parser("bench", parents=[common], help="similarity-structure runtime benchmark")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--kernel", choices=["mxcorr", "dtw"], required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.add_argument("--window", type=int)
    p.add_argument("--out", help="append the CSV row to this file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="synthetic latent-state series")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--l", type=int, default=400)
    p.add_argument("--c", type=int, default=3)
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--dwell", type=int, default=25)
    p.add_argument("--stay", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("traj", parents=[common], help="top-3 PCA trajectory of one series")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_traj)

    p = sub.add_parser("sweep", parents=[common], help="alpha/lambda grid with relative-change table")
    training_flags(p)
    p.add_argument("--alphas", default="0.1,0.5,0.9")
    p.add_argument("--lams", default="0.1,0.5,0.9")
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--lookback", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage() + "plants: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.threads_flag = args.threads
        args.threads = 1 if args.threads is None else args.threads
        if args.threads < 1:
            raise UsageError("plants: error: --threads must be >= 1")
        if args.seed is None:
            args.seed = 0 if args.command not in ("train", "sweep") else None
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"plants: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PeriodDetectionError as exc:
        print(f"plants: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"plants: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"plants: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
