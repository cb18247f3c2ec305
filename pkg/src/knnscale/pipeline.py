"""End-to-end fit: split, select variables, choose k, fit mean, fit variance, calibrate.

Default plan has six equally weighted roles, each consumed by exactly one stage:

    mean_select  LOCO tests for the mean (halved internally into fit/eval)
    mean_k       LOOCV choice of k1 on the selected mean support
    mean_fit     training rows of the mean model (also fits the standardizer)
    var_select   LOCO tests and LOOCV k2 on squared residuals of the mean model
    var_fit      training rows of the variance model
    calibrate    standardized residuals (empirical mode) or held-out evaluation
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, SplitPlan, Standardizer, apply_standardizer, fit_standardizer, make_splits
from .errors import PreconditionError
from .estimators import (ERROR_MODES, KSelectionTrace, ScaleLocModel, compute_residuals, default_k_grid,
                         fit_mean, fit_variance, select_k)
from .intervals import calibrate_empirical, gaussian_multiplier, with_calibration
from .varselect import STAGE_ROLES, SelectionReport, run_selection

K_GRID_POLICIES = ("auto", "full", "geometric")


def k_grid_for(policy, m: int) -> np.ndarray:
    """Candidate k values for LOOCV on m rows, all within [1, m-1]."""
    if m < 2:
        raise PreconditionError(f"LOOCV needs at least 2 rows, got {m}")
    if isinstance(policy, str):
        if policy == "auto":
            return default_k_grid(m)
        if policy == "full":
            return np.arange(1, m, dtype=np.int64)
        if policy == "geometric":
            ks = sorted({math.ceil(1.25 ** j) for j in range(int(math.log(m) / math.log(1.25)) + 2)})
            return np.array([k for k in ks if k <= m - 1], dtype=np.int64)
        raise PreconditionError(f"k_grid must be one of {K_GRID_POLICIES} or a list of integers, got {policy!r}")
    ks = sorted({int(k) for k in policy if 1 <= int(k) <= m - 1})
    if not ks:
        raise PreconditionError(f"explicit k grid {list(policy)} has no value in [1, {m - 1}]")
    return np.array(ks, dtype=np.int64)


@dataclass(frozen=True)
class PipelineConfig:
    roles: tuple[tuple[str, float], ...] = tuple((r, 1.0) for r in STAGE_ROLES)
    selection_alpha: float = 0.05
    interval_alpha: float = 0.1
    k_grid: object = "auto"
    standardize: bool = True
    error_mode: str = "gaussian"
    seed: int = 0
    feature_selection: bool = True
    candidates: tuple[int, ...] | None = None

    def __post_init__(self):
        roles = tuple((str(n), float(w)) for n, w in self.roles)
        object.__setattr__(self, "roles", roles)
        names = [n for n, _ in roles]
        missing = [r for r in STAGE_ROLES if r not in names]
        if missing:
            raise PreconditionError(f"config roles lack {missing}")
        if len(set(names)) != len(names):
            raise PreconditionError(f"duplicate role names {names}")
        if any(not (w > 0 and math.isfinite(w)) for _, w in roles):
            raise PreconditionError("role weights must be positive and finite")
        for name in ("selection_alpha", "interval_alpha"):
            a = float(getattr(self, name))
            if not 0 < a < 1:
                raise PreconditionError(f"{name} must lie in (0, 1), got {a}")
            object.__setattr__(self, name, a)
        if self.error_mode not in ERROR_MODES:
            raise PreconditionError(f"error_mode must be one of {ERROR_MODES}, got {self.error_mode!r}")
        if isinstance(self.k_grid, str):
            if self.k_grid not in K_GRID_POLICIES:
                raise PreconditionError(f"k_grid must be one of {K_GRID_POLICIES} or a list of integers")
        else:
            object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))
        if self.candidates is not None:
            object.__setattr__(self, "candidates", tuple(sorted({int(c) for c in self.candidates})))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roles"] = [[n, w] for n, w in self.roles]
        d["k_grid"] = self.k_grid if isinstance(self.k_grid, str) else list(self.k_grid)
        d["candidates"] = None if self.candidates is None else list(self.candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "roles" in d:
            d["roles"] = tuple(tuple(r) for r in d["roles"])
        return cls(**d)

    def min_rows(self) -> dict[str, int]:
        """Smallest usable size of each stage's role under this configuration."""
        sel = 4 if self.feature_selection else 2
        calib = math.ceil(1 / self.interval_alpha) if self.error_mode == "empirical" else 1
        return {"mean_select": 4 if self.feature_selection else 1, "mean_k": 2, "mean_fit": 1,
                "var_select": sel, "var_fit": 1, "calibrate": calib}


@dataclass(frozen=True)
class PipelineResult:
    model: ScaleLocModel
    mean_report: SelectionReport | None
    variance_report: SelectionReport | None
    k1_trace: KSelectionTrace | None
    k2_trace: KSelectionTrace | None
    plan: SplitPlan
    config: PipelineConfig
    evaluation: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "split_sizes": self.plan.sizes(),
            "mean_support": list(self.model.mean.support),
            "variance_support": list(self.model.variance.support),
            "homoscedastic": bool(self.model.variance.is_constant),
            "k1": int(self.model.mean.k),
            "k2": int(self.model.variance.k),
            "mean_selection": None if self.mean_report is None else self.mean_report.to_dict(),
            "variance_selection": None if self.variance_report is None else self.variance_report.to_dict(),
            "k1_trace": None if self.k1_trace is None else self.k1_trace.to_dict(),
            "k2_trace": None if self.k2_trace is None else self.k2_trace.to_dict(),
            "evaluation": self.evaluation,
        }


def plan_splits(n: int, config: PipelineConfig) -> SplitPlan:
    """Split n rows by the configured weights, naming the first role that falls below its minimum."""
    from .data import split_sizes
    need = config.min_rows()
    names = [r for r, _ in config.roles]
    weights = [w for _, w in config.roles]
    total = sum(weights)
    if n < len(names):
        short = names[len(names) - 1]
        for name, w in zip(names, weights):
            if math.floor(n * w / total) < need.get(name, 1):
                short = name
                break
        raise PreconditionError(
            f"n={n} rows cannot fill {len(names)} roles; role {short!r} needs at least {need.get(short, 1)}")
    sizes = split_sizes(n, weights)
    for name, size in zip(names, sizes):
        if size < need.get(name, 1):
            raise PreconditionError(
                f"role {name!r} gets {size} rows, needs at least {need.get(name, 1)} (n={n})")
    return make_splits(n, config.roles, config.seed)


def fit_pipeline(data: Dataset, config: PipelineConfig = PipelineConfig(), plan: SplitPlan | None = None) -> PipelineResult:
    plan = plan_splits(data.n, config) if plan is None else plan
    roles = {r: r for r in STAGE_ROLES}
    standardizer: Standardizer | None = None
    work = data
    if config.standardize:
        standardizer = fit_standardizer(data, plan["mean_fit"])
        work = apply_standardizer(standardizer, data)
    X, y = work.features, work.response

    def grid(m):
        return k_grid_for(config.k_grid, m)

    candidates = tuple(range(data.p)) if config.candidates is None else config.candidates
    if any(c < 0 or c >= data.p for c in candidates):
        raise PreconditionError(f"candidates {candidates} outside [0, {data.p})")
    r2, r3, r4, r5 = (plan[r] for r in ("mean_k", "mean_fit", "var_select", "var_fit"))

    if config.feature_selection:
        st = run_selection(X, y, plan, candidates, config.selection_alpha, roles, data.feature_names, grid)
        mean_report, var_report = st.mean_report, st.var_report
        k1_trace, mean_model, e4 = st.k1_trace, st.mean_model, st.var_residuals
        B = var_report.selected
    else:
        mean_report = var_report = None
        A = candidates
        k1_trace = select_k(X[r2][:, list(A)], y[r2], grid(r2.size))
        mean_model = fit_mean(X[r3], y[r3], A, min(k1_trace.chosen, r3.size), rows=r3)
        e4 = compute_residuals(mean_model, X[r4], y[r4], rows=r4)
        B = candidates

    k2_trace = None
    if B:
        k2_trace = select_k(X[r4][:, list(B)], e4 * e4, grid(r4.size))
        k2 = min(k2_trace.chosen, r5.size)
    else:
        k2 = 1
    e5 = compute_residuals(mean_model, X[r5], y[r5], rows=r5)
    var_model = fit_variance(e5, X[r5], B, k2, rows=r5)

    model = ScaleLocModel(mean_model, var_model, data.p, "gaussian", standardizer=standardizer,
                          feature_names=data.feature_names)
    r6 = plan["calibrate"]
    Xc, yc = data.features[r6], data.response[r6]
    if config.error_mode == "empirical":
        model = with_calibration(model, calibrate_empirical(model, Xc, yc))
    evaluation = evaluate(model, Xc, yc, config.interval_alpha)
    return PipelineResult(model, mean_report, var_report, k1_trace, k2_trace, plan, config, evaluation)


def evaluate(model: ScaleLocModel, X, y, alpha: float) -> dict:
    """Held-out fit diagnostics on raw (unstandardized) covariates."""
    y = np.asarray(y, dtype=np.float64)
    mean, sd = model.predict(X)
    resid = y - mean
    c = gaussian_multiplier(alpha)
    return {"n": int(y.shape[0]), "mse": float(np.mean(resid * resid)),
            "gaussian_coverage": float(np.mean(np.abs(resid) <= c * sd)), "alpha": float(alpha)}


def predict(model: ScaleLocModel, X):
    """(mean, sd) arrays; a single row may be passed as a 1-d vector."""
    X = np.asarray(X, dtype=np.float64)
    return model.predict(X.reshape(1, -1) if X.ndim == 1 else X)


def predict_dataset(model: ScaleLocModel, data: Dataset):
    if data.p != model.p:
        raise PreconditionError(f"model expects {model.p} features, data has {data.p}")
    return model.predict(data.features)


def save_model(model: ScaleLocModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> ScaleLocModel:
    return ScaleLocModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def no_fs(config: PipelineConfig) -> PipelineConfig:
    return replace(config, feature_selection=False)
