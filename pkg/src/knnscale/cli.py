"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 precondition violation.
Every run writes a manifest next to its outputs (``manifest.json`` inside an
output directory, ``<file>.manifest.json`` beside a single output file).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, apply_standardizer, fit_standardizer, load_csv, load_features
from .errors import PreconditionError
from .intervals import IntervalSpec, predict_interval
from .knn import set_threads
from .pipeline import PipelineConfig, fit_pipeline, k_grid_for, load_model, plan_splits, save_model
from .roc import RocModel, auc_surface, write_surface_csv
from .simbench import run_grid, write_summary
from .varselect import select_variables

THREADS_ENV = "KNNSCALE_THREADS"
MAX_GRID_POINTS = 100_000


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(path: Path, command: str, config: dict, seed, artifacts: list[Path], started: float):
    _write_json(path, {
        "subcommand": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "artifacts": {a.name: _sha256(a) for a in artifacts},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    })


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PreconditionError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise PreconditionError(f"{path}: config must be a JSON object")
    return doc


def _pipeline_config(args, **overrides) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(_load_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _out_file(path) -> Path:
    out = Path(path)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args, started) -> int:
    cfg = _pipeline_config(args, error_mode=args.error_mode)
    if args.no_selection:
        cfg = replace(cfg, feature_selection=False)
    data = load_csv(args.data, args.target)
    res = fit_pipeline(data, cfg)
    out = _out_dir(args.out)
    files = [out / "model.json", out / "fit_summary.json", out / "split_plan.json"]
    save_model(res.model, files[0])
    _write_json(files[1], res.summary())
    _write_json(files[2], res.plan.to_dict())
    _write_manifest(out / "manifest.json", "fit", cfg.to_dict(), cfg.seed, files, started)
    print(f"mean support: {[data.feature_names[j] for j in res.model.mean.support]}  k1={res.model.mean.k}")
    var = "homoscedastic" if res.model.variance.is_constant else \
        f"{[data.feature_names[j] for j in res.model.variance.support]}  k2={res.model.variance.k}"
    print(f"variance support: {var}")
    return 0


def cmd_predict(args, started) -> int:
    model = load_model(args.model)
    X = load_features(args.data, model.feature_names)
    mean, sd = model.predict(X)
    out = _out_file(args.out)
    _write_rows(out, ["mean", "sd"], zip(mean, sd))
    _write_manifest(Path(f"{out}.manifest.json"), "predict", {"model": _sha256(Path(args.model))},
                    None, [out], started)
    return 0


def cmd_interval(args, started) -> int:
    model = load_model(args.model)
    spec = IntervalSpec(args.alpha, args.interval_mode)
    X = load_features(args.data, model.feature_names)
    mean, lo, hi = predict_interval(model, X, spec)
    out = _out_file(args.out)
    _write_rows(out, ["prediction", "lower", "upper"], zip(mean, lo, hi))
    _write_manifest(Path(f"{out}.manifest.json"), "interval",
                    {"alpha": spec.alpha, "mode": spec.mode, "model": _sha256(Path(args.model))},
                    None, [out], started)
    return 0


def cmd_select(args, started) -> int:
    cfg = _pipeline_config(args, selection_alpha=args.alpha)
    data = load_csv(args.data, args.target)
    plan = plan_splits(data.n, cfg)
    work = data
    if cfg.standardize:
        work = apply_standardizer(fit_standardizer(data, plan["mean_fit"]), data)
    mean_rep, var_rep = select_variables(work, plan, cfg.candidates, cfg.selection_alpha,
                                         k_grid_fn=lambda m: k_grid_for(cfg.k_grid, m))
    out = _out_dir(args.out)
    f = out / "selection.json"
    _write_json(f, {"mean": mean_rep.to_dict(), "variance": var_rep.to_dict()})
    _write_manifest(out / "manifest.json", "select", cfg.to_dict(), cfg.seed, [f], started)
    print(mean_rep.render())
    print()
    print(var_rep.render())
    return 0


def _roc_groups(args) -> tuple[Dataset, Dataset]:
    if args.data is not None:
        if args.group is None:
            raise PreconditionError("--data needs --group naming the 0/1 population column")
        full = load_csv(args.data, args.target)
        if args.group not in full.feature_names:
            raise PreconditionError(f"group column {args.group!r} not in {list(full.feature_names)}")
        g = full.feature_names.index(args.group)
        keep = [j for j in range(full.p) if j != g]
        labels = full.features[:, g]
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise PreconditionError(f"group column {args.group!r} must hold only 0 and 1")
        names = tuple(full.feature_names[j] for j in keep)
        parts = []
        for label in (1.0, 0.0):
            rows = np.flatnonzero(labels == label)
            if rows.size == 0:
                raise PreconditionError(f"no rows with {args.group} == {int(label)}")
            parts.append(Dataset(full.features[rows][:, keep], full.response[rows], names))
        return parts[0], parts[1]
    if args.diseased is None or args.healthy is None:
        raise PreconditionError("roc needs --diseased and --healthy, or --data with --group")
    d = load_csv(args.diseased, args.target)
    h = load_csv(args.healthy, args.target)
    if d.feature_names != h.feature_names:
        raise PreconditionError(f"populations have different covariates: {d.feature_names} vs {h.feature_names}")
    return d, h


def _roc_grid(args, d: Dataset, h: Dataset) -> np.ndarray:
    if args.grid is not None:
        return load_features(args.grid, d.feature_names)
    steps = args.grid_steps
    if steps < 1:
        raise PreconditionError("--grid-steps must be positive")
    if steps ** d.p > MAX_GRID_POINTS:
        raise PreconditionError(f"{steps}^{d.p} grid points exceed {MAX_GRID_POINTS}; pass --grid instead")
    lo = np.minimum(d.features.min(axis=0), h.features.min(axis=0))
    hi = np.maximum(d.features.max(axis=0), h.features.max(axis=0))
    axes = [np.linspace(a, b, steps) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def cmd_roc(args, started) -> int:
    cfg = _pipeline_config(args, error_mode="gaussian")
    d, h = _roc_groups(args)
    roc = RocModel(fit_pipeline(d, cfg).model, fit_pipeline(h, cfg).model)
    surface = auc_surface(roc, _roc_grid(args, d, h))
    out = _out_file(args.out)
    write_surface_csv(surface, out, d.feature_names)
    _write_manifest(Path(f"{out}.manifest.json"), "roc", cfg.to_dict(), cfg.seed, [out], started)
    return 0


def cmd_simulate(args, started) -> int:
    doc = _load_config(args.config)
    doc.setdefault("standardize", False)
    base = PipelineConfig.from_dict(doc)
    fs = {"on": (True,), "off": (False,), "both": (True, False)}[args.fs]
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args.out)
    runs_csv = out / "runs.csv"
    res = run_grid(args.scenario, args.p, args.n, args.runs, fs, seed=seed, n_test=args.n_test,
                   workers=args.threads or 1, csv_path=runs_csv, config=base)
    summary, table = out / "summary.json", out / "table.txt"
    write_summary(res, summary)
    text = res.table()
    table.write_text(text, encoding="utf-8")
    resolved = {"scenario": args.scenario, "p": args.p, "n": args.n, "runs": args.runs, "fs": args.fs,
                "n_test": args.n_test, "pipeline": base.to_dict()}
    _write_manifest(out / "manifest.json", "simulate", resolved, seed, [runs_csv, summary, table], started)
    sys.stdout.write(text)
    failed = sum(s["failed"] for s in res.summary())
    if failed:
        print(f"{failed} run(s) failed; see {runs_csv}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="knnscale", description="kNN conditional mean and variance estimation.")
    parser.add_argument("--version", action="version", version=f"knnscale {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--seed", type=int, default=None, help="master seed for every random choice")
        p.add_argument("--config", default=None, help="JSON file of pipeline settings")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or all cores)")

    p = sub.add_parser("fit", help="fit a model from a CSV file")
    p.add_argument("--data", required=True, help="training CSV with a header row")
    p.add_argument("--target", required=True, help="response column name")
    p.add_argument("--error-mode", choices=("gaussian", "empirical"), default=None,
                   help="interval calibration stored with the model")
    p.add_argument("--no-selection", action="store_true", help="keep every feature (no tests)")
    common(p, "output directory for model.json, fit_summary.json, split_plan.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="conditional mean and sd for each row")
    p.add_argument("--model", required=True, help="model.json written by fit")
    p.add_argument("--data", required=True, help="CSV with the model's feature columns")
    common(p, "output CSV with columns mean,sd")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select", help="run variable selection only")
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--target", required=True, help="response column name")
    p.add_argument("--alpha", type=float, default=None, help="family significance level (default 0.05)")
    common(p, "output directory for selection.json")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("interval", help="prediction intervals for each row")
    p.add_argument("--model", required=True, help="model.json written by fit")
    p.add_argument("--data", required=True, help="CSV with the model's feature columns")
    p.add_argument("--alpha", type=float, default=0.1, help="miscoverage level (default 0.1)")
    p.add_argument("--interval-mode", choices=("empirical", "gaussian"), default="gaussian",
                   help="multiplier from calibration residuals or the normal quantile")
    common(p, "output CSV with columns prediction,lower,upper")
    p.set_defaults(func=cmd_interval)

    p = sub.add_parser("roc", help="conditional AUC over a covariate grid")
    p.add_argument("--diseased", default=None, help="CSV for the diseased population")
    p.add_argument("--healthy", default=None, help="CSV for the healthy population")
    p.add_argument("--data", default=None, help="single CSV holding both populations")
    p.add_argument("--group", default=None, help="0/1 column of --data, 1 = diseased")
    p.add_argument("--target", required=True, help="biomarker column name")
    p.add_argument("--grid", default=None, help="CSV of covariate points")
    p.add_argument("--grid-steps", type=int, default=10,
                   help="points per covariate for a product grid over the data range (default 10)")
    common(p, "output CSV with the covariates and auc")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("simulate", help="Monte Carlo study on the built-in scenarios")
    p.add_argument("--scenario", type=int, nargs="+", required=True, help="scenario ids, 1..9")
    p.add_argument("--p", type=int, nargs="+", required=True, help="covariate dimensions")
    p.add_argument("--n", type=int, nargs="+", required=True, help="sample sizes")
    p.add_argument("--runs", type=int, default=30, help="runs per cell (default 30)")
    p.add_argument("--fs", choices=("on", "off", "both"), default="both", help="feature selection mode")
    p.add_argument("--n-test", type=int, default=2000, help="test rows per run (default 2000)")
    common(p, "output directory for runs.csv, summary.json, table.txt")
    p.set_defaults(func=cmd_simulate)
    return parser


def _resolve_threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise PreconditionError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return None


def main(argv=None) -> int:
    started = time.perf_counter()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.threads = _resolve_threads(args.threads)
        if args.threads is not None and args.threads < 1:
            raise PreconditionError("--threads must be positive")
        set_threads(args.threads)
        return args.func(args, started)
    except PreconditionError as exc:
        print(f"knnscale {args.command}: {exc}", file=sys.stderr)
        return 4
    except (KeyError, TypeError, ValueError) as exc:
        print(f"knnscale {args.command}: invalid input: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"knnscale {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
