"""
Command-line entry point: ``wassgp {distance,fit,predict,benchmark,diagnose}``.

Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 failed
diagnostic.  ``--config FILE`` reads ``key = value`` lines whose keys are the
long option names; explicit flags override them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, io
from .dist_core import (DEFAULT_GRID_SIZE, quantile_from_density, quantile_from_samples,
                        w2_distance)
from .errors import InvalidInputError, NumericError, WassGPError
from .gp_core import (Dataset, FitConfig, dump_model, fit_ml, info_matrix, load_model,
                      predict_many)
from .kernels import LegendreSpec, PcaSpec, legendre_features, pca_features, pca_fit
from .simulation import (SimConfig, beta_config, beta_skewness_experiment, kde_density,
                         table1_benchmark, table2_benchmark)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_DIAGNOSTIC = 0, 2, 3, 4

KERNELS = {"powexp": "POWEXP", "fbm": "FBM", "legendre": "LEGENDRE", "pca": "PCA"}
DENSITY_GRID = 100


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _nugget(text):
    if text in ("fit", "off"):
        return text
    if text.startswith("fixed:"):
        try:
            v = float(text[len("fixed:"):])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad nugget value in {text!r}") from None
        if not v >= 0:
            raise argparse.ArgumentTypeError("fixed nugget must be >= 0")
        return v
    raise argparse.ArgumentTypeError("expected fit, off or fixed:<value>")


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common(p):
    p.add_argument("--config", type=Path, help="key = value defaults file")
    p.add_argument("--grid-size", type=_positive_int, default=DEFAULT_GRID_SIZE,
                   help="quantile grid size m")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)


def _fit_options(p):
    p.add_argument("--kernel", choices=sorted(KERNELS), default="powexp")
    p.add_argument("--order", type=_positive_int, default=5,
                   help="projection order for legendre/pca")
    p.add_argument("--nugget", type=_nugget, default="fit", help="fit, off or fixed:<v>")
    p.add_argument("--starts", type=_positive_int, default=10)
    p.add_argument("--max-evals", type=_positive_int, default=400)
    p.add_argument("--center-targets", type=_on_off, default=True, help="on or off")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wassgp", description="Gaussian processes on 1-D distributions with W2 kernels.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distance", help="W2 distance between two input files")
    _common(p)
    p.add_argument("first", type=Path)
    p.add_argument("second", type=Path)
    p.add_argument("--obs-a", help="obs_id to use from the first file (default: the only one)")
    p.add_argument("--obs-b", help="obs_id to use from the second file")

    p = sub.add_parser("fit", help="fit a GP by maximum likelihood")
    _common(p)
    _fit_options(p)
    p.add_argument("--inputs", type=Path, required=True, help="samples or densities CSV")
    p.add_argument("--targets", type=Path, required=True, help="targets CSV")
    p.add_argument("--model", type=Path, required=True, help="output model JSON")
    p.add_argument("--summary", type=Path, help="fit summary JSON (default: stdout)")

    p = sub.add_parser("predict", help="predict with a fitted model")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--inputs", type=Path, required=True)
    p.add_argument("--out", type=Path, help="output CSV (default: stdout)")

    p = sub.add_parser("benchmark", help="run a simulation benchmark")
    _common(p)
    p.add_argument("which", choices=("table1", "table2", "beta"))
    p.add_argument("--n-train", type=_positive_int)
    p.add_argument("--n-test", type=_positive_int)
    p.add_argument("--samples", type=_positive_int, help="samples per distribution")
    p.add_argument("--orders", default="5,10,15", help="comma-separated projection orders")
    p.add_argument("--starts", type=_positive_int, default=10)
    p.add_argument("--max-evals", type=_positive_int, default=400)
    p.add_argument("--center-targets", type=_on_off, default=True)
    p.add_argument("--out-dir", type=Path, default=Path("."))

    p = sub.add_parser("diagnose", help="kernel validity and identifiability checks")
    _common(p)
    p.add_argument("which", choices=("negdef", "nondegen", "identifiability"))
    p.add_argument("--n", type=_positive_int, default=100,
                   help="input count for identifiability")
    p.add_argument("--out", type=Path, help="report JSON (default: stdout)")
    parser.subcommands = sub.choices
    return parser


def read_config(path: Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"{path}: cannot open: {exc.strerror}") from None
    for k, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}: line {k}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = (k, value)
    return out


def _apply_config(parser, sub, argv, path):
    """Set config values as subparser defaults, converted like the flags would be."""
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, (line, value) in read_config(path).items():
        action = actions.get(key)
        if action is None or key == "config":
            raise InvalidInputError(f"{path}: line {line}: unknown key {key!r}")
        try:
            defaults[key] = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise InvalidInputError(f"{path}: line {line}: {key}: {exc}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise InvalidInputError(f"{path}: line {line}: {key}: invalid choice {value!r}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser.subcommands[args.command]
        args = _apply_config(parser, sub, argv, args.config)
    return args


# ---------------------------------------------------------------------------
# input conversion
# ---------------------------------------------------------------------------

def _quantiles(kind, objs, m):
    if kind == "samples":
        return [quantile_from_samples(e, m) for e in objs]
    return [quantile_from_density(g, m) for g in objs]


def _densities(kind, objs, d=DENSITY_GRID):
    """Densities on [0, 1] for the projection kernels; samples go through a KDE."""
    if kind == "samples":
        return [kde_density(e.samples, grid=(0.0, 1.0, d)) for e in objs]
    for g in objs:
        if g.support_lo != 0.0 or g.support_hi != 1.0:
            raise InvalidInputError("projection kernels need densities on [0, 1]")
    return list(objs)


def _pick(objs: dict, obs, path):
    if obs is None:
        if len(objs) != 1:
            raise InvalidInputError(f"{path}: holds {len(objs)} observations; pass an obs_id")
        return next(iter(objs.values()))
    if obs not in objs:
        raise InvalidInputError(f"{path}: no obs_id {obs!r}")
    return objs[obs]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_distance(args) -> int:
    qs = []
    for path, obs in ((args.first, args.obs_a), (args.second, args.obs_b)):
        kind, objs = io.read_inputs(path)
        qs.append(_quantiles(kind, [_pick(objs, obs, path)], args.grid_size)[0])
    print(io.fmt(w2_distance(*qs)))
    return EXIT_OK


def cmd_fit(args) -> int:
    kind, objs = io.read_inputs(args.inputs)
    ids, inputs, y = io.align(objs, io.read_targets(args.targets), args.inputs, args.targets)
    variant = KERNELS[args.kernel]
    basis = None
    if variant in ("POWEXP", "FBM"):
        features = _quantiles(kind, inputs, args.grid_size)
        meta = [f"empirical({e.size})" if kind == "samples" else "density" for e in inputs]
    else:
        dens = _densities(kind, inputs)
        if variant == "LEGENDRE":
            features = [legendre_features(g, args.order) for g in dens]
        else:
            basis = pca_fit(dens, args.order)
            features = [pca_features(g, basis) for g in dens]
        meta = ["density"] * len(dens)
    config = FitConfig(n_starts=args.starts, max_evals=args.max_evals, seed=args.seed,
                       nugget=args.nugget, center_targets=args.center_targets,
                       threads=args.threads)
    model = fit_ml(Dataset(features, y, meta), variant, config, basis=basis)
    args.model.write_text(dump_model(model) + "\n")
    try:
        info = info_matrix(model)
        eig = [io.fmt(v) for v in info.eigenvalues]
    except WassGPError:
        eig = None
    summary = {
        "kernel": variant,
        "n": model.n,
        "estimates": {n: io.fmt(model.spec.get(n)) for n in model.spec.param_names},
        "free_params": list(model.free_params),
        "L": io.fmt(model.nll),
        "info_eigenvalues": eig,
        "jitter": io.fmt(model.jitter),
        "y_offset": io.fmt(model.y_offset),
        "best_start": model.fit_info.get("best_start"),
    }
    text = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    if args.summary is None:
        sys.stdout.write(text)
    else:
        args.summary.write_text(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        text = args.model.read_text()
    except OSError as exc:
        raise InvalidInputError(f"{args.model}: cannot open: {exc.strerror}") from None
    try:
        model = load_model(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"{args.model}: malformed model file: {exc}") from None
    kind, objs = io.read_inputs(args.inputs)
    ids = list(objs)
    spec = model.spec
    if isinstance(spec, LegendreSpec):
        queries = [legendre_features(g, spec.order) for g in _densities(kind, objs.values())]
    elif isinstance(spec, PcaSpec):
        dens = _densities(kind, objs.values(), spec.basis.d)
        queries = [pca_features(g, spec.basis) for g in dens]
    else:
        m = model.inputs[0].grid_size
        queries = _quantiles(kind, objs.values(), m)
    mean, var = predict_many(model, queries)
    sd = np.sqrt(var)
    if args.out is None:
        io.write_predictions(sys.stdout, ids, mean, sd)
    else:
        with open(args.out, "w", newline="") as fh:
            io.write_predictions(fh, ids, mean, sd)
    return EXIT_OK


def _orders(text):
    try:
        out = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise InvalidInputError(f"--orders: not a list of integers: {text!r}") from None
    if not out or min(out) < 1:
        raise InvalidInputError("--orders must be positive")
    return out


def cmd_benchmark(args) -> int:
    overrides = {"seed": args.seed, "m": args.grid_size, "n_starts": args.starts,
                 "max_evals": args.max_evals, "threads": args.threads,
                 "center_targets": args.center_targets, "orders": _orders(args.orders)}
    for key, flag in (("n_train", "n_train"), ("n_test", "n_test"),
                      ("samples_per_dist", "samples")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if args.which == "beta":
        report = beta_skewness_experiment(beta_config(**overrides))
    elif args.which == "table1":
        report = table1_benchmark(SimConfig(**overrides))
    else:
        report = table2_benchmark(SimConfig(**overrides))
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{report.name}.json").write_text(report.to_json() + "\n")
    (out / f"{report.name}.csv").write_text(report.rows_csv())
    (out / f"{report.name}_pairs.csv").write_text(report.pairs_csv())
    print(report.format_table())
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.which == "negdef":
        report = diagnostics.run_negdef_suite(seed=args.seed)
        config = {"suite": "negdef", "seed": args.seed}
    elif args.which == "nondegen":
        report = diagnostics.run_nondegen_suite(seed=args.seed)
        config = {"suite": "nondegen", "seed": args.seed}
    else:
        report = diagnostics.run_identifiability_suite(n=args.n, seed=args.seed,
                                                       m=args.grid_size)
        config = {"suite": "identifiability", "seed": args.seed, "n": args.n,
                  "grid_size": args.grid_size}
    text = json.dumps({"config": config, **report.to_dict()}, indent=1, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    failed = sum(not c.passed for c in report.checks)
    print(f"{args.which}: {len(report.checks) - failed}/{len(report.checks)} checks passed",
          file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_DIAGNOSTIC


COMMANDS = {"distance": cmd_distance, "fit": cmd_fit, "predict": cmd_predict,
            "benchmark": cmd_benchmark, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except InvalidInputError as exc:
        print(f"wassgp: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"wassgp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
