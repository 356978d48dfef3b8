"""Command-line entry point: ``owdet {run, ablate, etf check, project}``.

Exit codes: 0 success, 1 config error, 2 numerical divergence, 3 I/O error.
"""

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .etf import build_simplex_etf
from .evaluate import pca_project
from .experiment import (ConfigError, ExperimentConfig, format_summary, load_config,
                         parse_sweep, run_ablation, run_experiment, run_sweep)
from .sim import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _resolve(config_path, seed=None, out=None) -> ExperimentConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if out is not None:
        cfg = replace(cfg, out_dir=str(out))
    return cfg


def _guard(fn):
    """Map library exceptions to exit codes."""
    def wrapped(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except DivergenceError as exc:
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_guard
def cmd_run(config_path=None, seed=None, out=None) -> int:
    """Train and evaluate every task, writing reports under the output directory."""
    cfg = _resolve(config_path, seed, out)
    result = run_experiment(cfg, cfg.out_dir)
    print(format_summary(result.reports))
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


@_guard
def cmd_ablate(config_path=None, seed=None, out=None, sweep=None, parallel=1) -> int:
    """Run the 2x2 EUS x EKD grid, or a margin / frame-size sweep."""
    cfg = _resolve(config_path, seed, out)
    if parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    if sweep:
        axis, values = parse_sweep(sweep)
        results = run_sweep(cfg, axis, values, cfg.out_dir, parallel)
        for v, res in results.items():
            print(f"{axis}={v}\n{format_summary(res.reports)}")
        print(f"wrote {Path(cfg.out_dir) / 'sweep.csv'}")
        return EXIT_OK
    results = run_ablation(cfg, cfg.out_dir, parallel)
    for (eus, ekd), res in results.items():
        print(f"EUS {'on' if eus else 'off'}, EKD {'on' if ekd else 'off'}")
        print(format_summary(res.reports))
    print(f"wrote {Path(cfg.out_dir) / 'ablation.csv'}")
    return EXIT_OK


@_guard
def cmd_etf_check(k=128, d=256, seed=0) -> int:
    """Print the frame's maximum Gram deviations as JSON."""
    try:
        frame = build_simplex_etf(k, d, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps(frame.gram_errors()))
    return EXIT_OK


def _read_features(path):
    """Numeric columns are features; a trailing ``label`` column is optional."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ConfigError(f"{path}: empty feature file")
    header = None
    try:
        [float(v) for v in rows[0] if v != ""]
    except ValueError:
        header, rows = rows[0], rows[1:]
    has_label = header is not None and header[-1].strip().lower() == "label"
    try:
        feats = np.array([[float(v) for v in (r[:-1] if has_label else r)] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric feature value ({exc})") from None
    labels = [r[-1] for r in rows] if has_label else None
    return feats, labels


@_guard
def cmd_project(input_path, out=None) -> int:
    """Project a feature CSV onto its top two principal components."""
    feats, labels = _read_features(input_path)
    try:
        xy = pca_project(feats)
    except ValueError as exc:
        raise ConfigError(f"{input_path}: {exc}") from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"] + (["label"] if labels is not None else []))
    for i, (x, y) in enumerate(xy):
        w.writerow([f"{x:.6f}", f"{y:.6f}"] + ([labels[i]] if labels is not None else []))
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="owdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", metavar="{run,ablate,etf,project}")
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="INI file overlaid on the packaged defaults")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--out", help="output directory override")

    run = sub.add_parser("run", help="train and evaluate all tasks")
    common(run)
    abl = sub.add_parser("ablate", help="2x2 EUS x EKD grid, or a sweep")
    common(abl)
    abl.add_argument("--sweep", help="m=0.25,0.5,1.0 or k=32,64,128")
    abl.add_argument("--parallel", type=int, default=1, help="worker processes")
    etf = sub.add_parser("etf", help="ETF frame utilities")
    etf_sub = etf.add_subparsers(dest="etf_command", metavar="{check}")
    etf_sub.required = True
    chk = etf_sub.add_parser("check", help="print max Gram deviations as JSON")
    chk.add_argument("--k", type=int, default=128)
    chk.add_argument("--d", type=int, default=256)
    chk.add_argument("--seed", type=int, default=0)
    proj = sub.add_parser("project", help="2-D PCA projection of a feature CSV")
    proj.add_argument("--input", required=True, help="CSV of features (optional label column)")
    proj.add_argument("--out", help="output CSV (default: stdout)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; 2 is reserved for divergence here.
        return EXIT_OK if not exc.code else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out)
    if args.command == "ablate":
        return cmd_ablate(args.config, args.seed, args.out, args.sweep, args.parallel)
    if args.command == "etf":
        return cmd_etf_check(args.k, args.d, args.seed)
    return cmd_project(args.input, args.out)


if __name__ == "__main__":
    sys.exit(main())
