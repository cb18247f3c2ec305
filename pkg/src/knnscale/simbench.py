"""Simulation scenarios, Monte Carlo runner and integrated squared-error metrics.

Covariates are U[0,1]^p, errors N(0,1), Y = m(X) + sigma(X) * eps.  Scenario
functions are sums of covariates scaled by 5; indices below are 0-based.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import PreconditionError
from .pipeline import PipelineConfig, fit_pipeline

# id -> (mean covariates, sd covariates or None for sigma = 1)
_SCENARIOS = {
    1: ((1, 2), None),
    2: ((), (0,)),
    3: ((1, 2), (0,)),
    4: ((0, 1, 2, 3), None),
    5: ((), (0, 1, 2, 3)),
    6: ((0, 1, 2), (3, 4)),
    7: ((0, 1, 2, 3), (1, 2, 3, 4)),
    8: (tuple(range(8)), None),
    9: (tuple(range(6)), (7, 8, 9)),
}
REGIMES = {
    "low": ((1, 2, 3), (3, 10, 20, 25)),
    "moderate": ((4, 5, 6, 7), (5, 10, 20, 50)),
    "large": ((8, 9), (10, 25, 50, 100)),
}
COEF = 5.0


def regime_p_values(scenario: int) -> tuple[int, ...]:
    for ids, ps in REGIMES.values():
        if scenario in ids:
            return ps
    raise PreconditionError(f"unknown scenario {scenario}")


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    p: int

    def __post_init__(self):
        if self.id not in _SCENARIOS:
            raise PreconditionError(f"scenario must be one of 1..9, got {self.id}")
        if self.p < self.min_p:
            raise PreconditionError(f"scenario {self.id} uses covariate {self.min_p}, p={self.p} is too small")

    @property
    def mean_support(self) -> tuple[int, ...]:
        return _SCENARIOS[self.id][0]

    @property
    def sd_support(self) -> tuple[int, ...]:
        return _SCENARIOS[self.id][1] or ()

    @property
    def homoscedastic(self) -> bool:
        return _SCENARIOS[self.id][1] is None

    @property
    def min_p(self) -> int:
        used = self.mean_support + self.sd_support
        return max(used) + 1 if used else 1

    def m(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if not self.mean_support:
            return np.zeros(X.shape[0])
        return COEF * X[:, list(self.mean_support)].sum(axis=1)

    def sigma(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.homoscedastic:
            return np.ones(X.shape[0])
        return COEF * X[:, list(self.sd_support)].sum(axis=1)


def generate(spec: ScenarioSpec, n: int, seed) -> Dataset:
    """X ~ U[0,1]^p row by row, then eps ~ N(0,1), both from one PCG64 stream."""
    if n < 1:
        raise PreconditionError(f"n must be positive, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    X = rng.random((n, spec.p))
    eps = rng.standard_normal(n)
    return Dataset(X, spec.m(X) + spec.sigma(X) * eps)


def mss(model, spec: ScenarioSpec, X_test) -> tuple[float, float]:
    """Mean over test rows of (m_hat - m)^2 and (sigma_hat - sigma)^2."""
    mean, sd = model.predict(X_test)
    dm = mean - spec.m(X_test)
    ds = sd - spec.sigma(X_test)
    return float(np.mean(dm * dm)), float(np.mean(ds * ds))


def run_seeds(master: int, scenario: int, p: int, n: int, run: int) -> tuple[int, int, int]:
    """(train data, test data, split) seeds for one run; FS and No-FS share them."""
    state = np.random.SeedSequence([int(master), scenario, p, n, run]).generate_state(3, np.uint64)
    return tuple(int(s) for s in state)


@dataclass(frozen=True)
class Cell:
    scenario: int
    p: int
    n: int
    run: int
    fs: bool


CSV_FIELDS = ("scenario", "p", "n", "fs", "run", "status", "mss_m", "mss_sigma",
              "k1", "k2", "mean_support", "variance_support", "error")


def run_cell(cell: Cell, master_seed: int, n_test: int, base: PipelineConfig) -> dict:
    spec = ScenarioSpec(cell.scenario, cell.p)
    s_train, s_test, s_split = run_seeds(master_seed, cell.scenario, cell.p, cell.n, cell.run)
    row = {"scenario": cell.scenario, "p": cell.p, "n": cell.n, "fs": "FS" if cell.fs else "NoFS",
           "run": cell.run}
    try:
        data = generate(spec, cell.n, s_train)
        cfg = replace(base, seed=s_split, feature_selection=cell.fs)
        res = fit_pipeline(data, cfg)
        X_test = generate(spec, n_test, s_test).features
        m_err, s_err = mss(res.model, spec, X_test)
    except (PreconditionError, ValueError, FloatingPointError) as exc:
        row.update(status="failed", mss_m=math.nan, mss_sigma=math.nan, k1="", k2="",
                   mean_support="", variance_support="", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(status="ok", mss_m=m_err, mss_sigma=s_err, k1=res.model.mean.k, k2=res.model.variance.k,
               mean_support=" ".join(str(j + 1) for j in res.model.mean.support),
               variance_support=" ".join(str(j + 1) for j in res.model.variance.support), error="")
    return row


def _run_packed(args):
    return run_cell(*args)


@dataclass(frozen=True)
class SimResult:
    rows: tuple[dict, ...]

    def summary(self) -> list[dict]:
        """Per (scenario, p, n, fs) aggregates in first-appearance order."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["scenario"], r["p"], r["n"], r["fs"]), []).append(r)
        out = []
        for (sc, p, n, fs), rs in groups.items():
            ok = [r for r in rs if r["status"] == "ok"]
            out.append({
                "scenario": sc, "p": p, "n": n, "fs": fs, "runs": len(rs), "failed": len(rs) - len(ok),
                "mss_m": float(np.mean([r["mss_m"] for r in ok])) if ok else math.nan,
                "mss_sigma": float(np.mean([r["mss_sigma"] for r in ok])) if ok else math.nan,
            })
        return out

    def cell(self, scenario: int, p: int, n: int, fs: bool) -> dict:
        key = "FS" if fs else "NoFS"
        for s in self.summary():
            if (s["scenario"], s["p"], s["n"], s["fs"]) == (scenario, p, n, key):
                return s
        raise KeyError((scenario, p, n, key))

    def table(self) -> str:
        """Text layout: one block per scenario and FS mode, rows n, columns p x (MSS^m, MSS^sigma)."""
        summ = self.summary()
        lines = []
        for sc in dict.fromkeys(s["scenario"] for s in summ):
            for fs in ("FS", "NoFS"):
                block = [s for s in summ if s["scenario"] == sc and s["fs"] == fs]
                if not block:
                    continue
                ps = sorted({s["p"] for s in block})
                ns = sorted({s["n"] for s in block})
                lines.append(f"Scenario {sc}  {'with' if fs == 'FS' else 'without'} feature selection")
                lines.append(f"{'n':>8}" + "".join(f"{'p=' + str(p) + ' MSS^m':>16}{'MSS^sigma':>12}" for p in ps))
                for n in ns:
                    cells = []
                    for p in ps:
                        hit = [s for s in block if s["p"] == p and s["n"] == n]
                        if hit:
                            cells.append(f"{_fmt(hit[0]['mss_m']):>16}{_fmt(hit[0]['mss_sigma']):>12}")
                        else:
                            cells.append(f"{'':>16}{'':>12}")
                    lines.append(f"{n:>8}" + "".join(cells))
                lines.append("")
        return "\n".join(lines).rstrip() + "\n"


def _fmt(v: float) -> str:
    return "NaN" if math.isnan(v) else f"{v:.4f}"


def _cells(scenarios, p_list, n_list, B, fs_modes) -> list[Cell]:
    cells = []
    for sc in scenarios:
        for p in p_list:
            ScenarioSpec(sc, p)
            for n in n_list:
                for fs in fs_modes:
                    for b in range(B):
                        cells.append(Cell(int(sc), int(p), int(n), b, bool(fs)))
    return cells


def run_grid(scenarios: Sequence[int], p_list: Sequence[int], n_list: Sequence[int], B: int,
             fs_modes: Iterable[bool] = (True, False), seed: int = 0, n_test: int = 2000,
             workers: int = 1, csv_path=None, config: PipelineConfig | None = None) -> SimResult:
    """Monte Carlo over every (scenario, p, n, fs, run) cell.

    Standardization is off by default because the covariates already share the
    unit scale.  Rows are produced and written in cell order whatever ``workers`` is,
    and each finished row is flushed to ``csv_path`` immediately.
    """
    if B < 1:
        raise PreconditionError(f"runs must be positive, got {B}")
    base = config or PipelineConfig(standardize=False)
    cells = _cells(scenarios, p_list, n_list, B, tuple(fs_modes))
    jobs = [(c, int(seed), int(n_test), base) for c in cells]
    fh = writer = None
    if csv_path is not None:
        fh = Path(csv_path).open("w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
    rows = []
    try:
        if workers > 1:
            # fork is unsafe once the OpenMP runtime behind the kernels has started
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                stream = pool.map(_run_packed, jobs)
                for row in stream:
                    rows.append(row)
                    _emit(writer, fh, row)
        else:
            for job in jobs:
                row = run_cell(*job)
                rows.append(row)
                _emit(writer, fh, row)
    finally:
        if fh is not None:
            fh.close()
    return SimResult(tuple(rows))


def _emit(writer, fh, row):
    if writer is None:
        return
    writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    fh.flush()


def write_summary(result: SimResult, path) -> None:
    summ = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in s.items()}
            for s in result.summary()]
    Path(path).write_text(json.dumps({"cells": summ}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
