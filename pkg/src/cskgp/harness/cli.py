"""Command-line entry point.  Exit codes: 0 success, 1 invalid input, 2 numerical failure."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import CSKError, NumericalError, ValidationError

log = logging.getLogger("cskgp")


def parse_grid(text: str) -> np.ndarray:
    """``a:b:n`` -> ``n`` evenly spaced points from ``a`` to ``b``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValidationError(f"grid must look like a:b:n, got {text!r}")
    try:
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ValidationError(f"grid must look like a:b:n, got {text!r}") from None
    if n < 1 or not (np.isfinite(a) and np.isfinite(b)):
        raise ValidationError("grid needs finite ends and at least one point")
    return np.linspace(a, b, n)


def cmd_fit(args) -> int:
    from .checkpoint import save_model
    from .data import load_csv, split_from_file, standardize
    from .experiment import ExperimentConfig, fit

    cfg = ExperimentConfig.load(args.config)
    ds = load_csv(args.data)
    if args.split_file:
        ds = split_from_file(ds, args.split_file)[0]
    train = standardize(ds)
    model = fit(cfg, train)
    save_model(model, args.out)
    print(f"wrote {args.out} ({model.kind}, beta={model.beta:.4g})")
    return 0


def cmd_predict(args) -> int:
    from .checkpoint import load_model
    from .data import load_csv, split_from_file
    from .experiment import predict_original_units, write_metrics, write_predictions

    model = load_model(args.model)
    ds = load_csv(args.data)
    if args.split_file:
        ds = split_from_file(ds, args.split_file)[1]
    res = predict_original_units(model, ds.X, ds.y)
    write_predictions(args.out, ds.X, res, ds.y, ds.columns)
    metrics = {"n_test": ds.n, "test_mse": res["mse"], "test_mean_loglik": res["mean_loglik"]}
    if args.metrics:
        write_metrics(args.metrics, metrics)
    print(f"mse={res['mse']:.6g} mean_loglik={res['mean_loglik']:.6g}")
    return 0


def cmd_spectrogram(args) -> int:
    from .checkpoint import load_model
    from .data import atomic_write_text, format_table
    from .plots import heatmap_svg, model_spectrogram

    model = load_model(args.model)
    g = model_spectrogram(model, parse_grid(args.x_grid))
    atomic_write_text(args.out, format_table(["x", "omega", "value"], g.triples()))
    if args.svg:
        atomic_write_text(args.svg, heatmap_svg(g.x, g.omega, g.values))
    print(f"wrote {len(g.x)} x {len(g.omega)} spectrogram grid to {args.out}")
    return 0


def cmd_sample_prior(args) -> int:
    from ..spectrogram import DgpStackSpec, sample_dgp_prior
    from .data import atomic_write_text, format_table

    grid = parse_grid(args.grid)
    stack = DgpStackSpec(depth=args.depth, family=args.kernel.upper())
    layers = sample_dgp_prior(stack, grid[:, None], np.random.default_rng(args.seed))
    header = ["x"] + [f"f{i}" for i in range(len(layers))]
    atomic_write_text(args.out, format_table(header, np.column_stack([grid] + layers)))
    print(f"wrote {len(layers)} layers on {len(grid)} points to {args.out}")
    return 0


def cmd_chirp_demo(args) -> int:
    from .experiment import run_chirp_demo

    m = run_chirp_demo(args.out_dir, args.inference, args.seed)
    m.pop("_model", None)
    for k in sorted(m):
        print(f"{k}: {m[k]}")
    return 0


def cmd_oracle_suite(args) -> int:
    from .oracle_suite import format_table, run_all

    results = run_all(args.seed)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 2


class _Parser(argparse.ArgumentParser):
    # usage errors are invalid input; 2 is reserved for numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


GRID_FLAGS = ("--grid", "--x-grid")


def _attach_grids(argv):
    """Let ``--grid -1:1:5`` through; argparse would read the value as a flag."""
    out, it = [], iter(argv)
    for tok in it:
        if tok in GRID_FLAGS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cskgp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", help="fit a model to a CSV dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split-file", help="train only on the rows listed in this index file")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="predict with a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.add_argument("--split-file", help="predict only the rows NOT listed in this index file")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("spectrogram", help="spectrogram grid of a saved 1-d model")
    s.add_argument("--model", required=True)
    s.add_argument("--x-grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")
    s.set_defaults(func=cmd_spectrogram)

    s = sub.add_parser("sample-prior", help="draw from a covariance-function deep GP prior")
    s.add_argument("--kernel", choices=["nsq", "csk"], required=True)
    s.add_argument("--depth", type=int, required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_prior)

    s = sub.add_parser("chirp-demo", help="train on a synthetic chirp and write all artifacts")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--inference", choices=["sghmc", "dsvi", "map"], default="sghmc")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_chirp_demo)

    s = sub.add_parser("oracle-suite", help="run the brute-force oracle comparisons")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle_suite)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_attach_grids(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, CSKError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
