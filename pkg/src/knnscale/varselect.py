"""Leave-one-covariate-out variable selection with one-sided t-tests and Bonferroni control.

For each candidate feature j, a kNN fit with all candidates and one without j
are trained on one half of a split and compared on the other half through the
pointwise loss difference  W_j(x, y) = (y - m_{-j}(x))^2 - (y - m(x))^2.
A feature is kept when the mean of W_j is significantly positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .data import Dataset, SplitPlan
from .errors import PreconditionError
from .estimators import KSelectionTrace, MeanModel, compute_residuals, fit_mean, select_k

DEFAULT_ALPHA = 0.05
STAGE_ROLES = ("mean_select", "mean_k", "mean_fit", "var_select", "var_fit", "calibrate")


@dataclass(frozen=True)
class FeatureTest:
    feature: int
    name: str
    w_mean: float
    sd: float
    t: float
    p_value: float
    df: int
    selected: bool
    k_full: int
    k_reduced: int


@dataclass(frozen=True)
class SelectionReport:
    target: str
    alpha: float
    n_tests: int
    n_eval: int
    tests: tuple[FeatureTest, ...]

    @property
    def threshold(self) -> float:
        return self.alpha / self.n_tests

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(t.feature for t in self.tests if t.selected)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "alpha": self.alpha,
            "n_tests": self.n_tests,
            "n_eval": self.n_eval,
            "threshold": self.threshold,
            "selected": list(self.selected),
            "features": [
                {"feature": t.feature, "name": t.name, "w_mean": t.w_mean, "sd": t.sd, "t": t.t,
                 "p_value": t.p_value, "df": t.df, "selected": t.selected,
                 "k_full": t.k_full, "k_reduced": t.k_reduced}
                for t in self.tests
            ],
        }

    def render(self) -> str:
        lines = [f"{self.target} selection  (alpha={self.alpha:g}, tests={self.n_tests}, "
                 f"threshold={self.threshold:.3g}, n_eval={self.n_eval})",
                 f"{'feature':<16}{'w_mean':>12}{'t':>10}{'p':>12}  decision"]
        for t in self.tests:
            lines.append(f"{t.name:<16}{t.w_mean:>12.5g}{t.t:>10.3f}{t.p_value:>12.3g}  "
                         f"{'select' if t.selected else '-'}")
        return "\n".join(lines)


def t_test_one_sided(values) -> tuple[float, float, int]:
    """One-sample t-test of H0: mean <= 0 against mean > 0.

    Returns (t, p, df) with p = P(T_{n-1} > t).  Identical values give t = +inf,
    p = 0 when positive, and p = 1 otherwise.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    n = v.shape[0]
    if n < 2:
        raise PreconditionError(f"t-test needs at least 2 values, got {n}")
    mean = float(np.mean(v))
    if np.all(v == v[0]):
        if v[0] > 0:
            return math.inf, 0.0, n - 1
        return (-math.inf if v[0] < 0 else 0.0), 1.0, n - 1
    sd = float(np.std(v, ddof=1))
    t = mean / (sd / math.sqrt(n))
    p = float(special.stdtr(n - 1, -t))
    return t, p, n - 1


def _fit_with_own_k(X, y, support, k_grid_fn) -> MeanModel:
    if not support:
        return fit_mean(X, y, (), 1)
    Xs = X[:, list(support)]
    k = select_k(Xs, y, _grid(k_grid_fn, Xs.shape[0])).chosen
    return fit_mean(X, y, support, k)


def loco_statistics(X_fit, y_fit, X_eval, y_eval, candidates: Sequence[int], feature: int,
                    full_model: MeanModel | None = None, k_grid_fn=None, full_pred=None):
    """W_j values on the evaluation rows plus the two fitted models.

    Both the full model and the model without ``feature`` pick their own k by
    LOOCV on the fitting rows.  Removing the last feature leaves the constant fit.
    """
    candidates = tuple(sorted(int(c) for c in candidates))
    if feature not in candidates:
        raise PreconditionError(f"feature {feature} is not among the candidates {candidates}")
    if full_model is None:
        full_model = _fit_with_own_k(X_fit, y_fit, candidates, k_grid_fn)
    reduced = _fit_with_own_k(X_fit, y_fit, tuple(c for c in candidates if c != feature), k_grid_fn)
    y_eval = np.asarray(y_eval, dtype=np.float64)
    full_err = y_eval - (full_model.predict_batch(X_eval) if full_pred is None else full_pred)
    red_err = y_eval - reduced.predict_batch(X_eval)
    return red_err * red_err - full_err * full_err, full_model, reduced


def select_on_halves(X, y, candidates: Sequence[int], target: str, alpha: float, n_tests: int,
                     feature_names: Sequence[str] | None = None, k_grid_fn=None) -> SelectionReport:
    """Run every LOCO test with the first half of the rows for fitting and the rest for evaluation.

    Rows are expected in random order (split roles keep shuffle order).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    half = n // 2
    if half < 2 or n - half < 2:
        raise PreconditionError(f"{target} selection needs at least 4 rows, got {n}")
    candidates = tuple(sorted(int(c) for c in candidates))
    names = list(feature_names) if feature_names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    Xf, yf, Xe, ye = X[:half], y[:half], X[half:], y[half:]
    full = _fit_with_own_k(Xf, yf, candidates, k_grid_fn)
    full_pred = full.predict_batch(Xe)
    tests = []
    for j in candidates:
        W, _, reduced = loco_statistics(Xf, yf, Xe, ye, candidates, j, full, k_grid_fn, full_pred)
        t, p, df = t_test_one_sided(W)
        sd = float(np.std(W, ddof=1))
        tests.append(FeatureTest(j, names[j], float(np.mean(W)), sd, t, p, df,
                                 p < alpha / n_tests, full.k, reduced.k))
    return SelectionReport(target, float(alpha), int(n_tests), n - half, tuple(tests))


@dataclass(frozen=True)
class _SelectionStages:
    mean_report: SelectionReport
    var_report: SelectionReport
    mean_support: tuple[int, ...]
    k1_trace: KSelectionTrace | None
    mean_model: MeanModel
    var_residuals: np.ndarray


def _grid(k_grid_fn, m: int):
    return None if k_grid_fn is None else k_grid_fn(m)


def run_selection(X, y, plan: SplitPlan, candidates, alpha: float, roles: dict,
                  feature_names=None, k_grid_fn=None) -> _SelectionStages:
    """Both selection stages plus the intermediate fits the pipeline reuses."""
    if not 0 < alpha < 1:
        raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
    if not candidates:
        raise PreconditionError("no candidate features")
    n_tests = 2 * len(candidates)
    r1 = plan[roles["mean_select"]]
    mean_report = select_on_halves(X[r1], y[r1], candidates, "mean", alpha, n_tests,
                                   feature_names, k_grid_fn)
    A = mean_report.selected
    r2, r3 = plan[roles["mean_k"]], plan[roles["mean_fit"]]
    trace = None
    k1 = 1
    if A:
        trace = select_k(X[r2][:, list(A)], y[r2], _grid(k_grid_fn, r2.size))
        k1 = min(trace.chosen, r3.size)
    mean_model = fit_mean(X[r3], y[r3], A, k1, rows=r3)
    r4 = plan[roles["var_select"]]
    e = compute_residuals(mean_model, X[r4], y[r4], rows=r4)
    var_report = select_on_halves(X[r4], e * e, candidates, "variance", alpha, n_tests,
                                  feature_names, k_grid_fn)
    return _SelectionStages(mean_report, var_report, A, trace, mean_model, e)


def select_variables(data: Dataset, plan: SplitPlan, candidates: Sequence[int] | None = None,
                     alpha: float = DEFAULT_ALPHA, roles: dict | None = None, k_grid_fn=None):
    """Mean selection, then variance selection on residuals of the refitted mean model.

    ``roles`` maps the stages "mean_select", "mean_k", "mean_fit" and
    "var_select" to role names in ``plan``; by default the stage names are used.
    Returns (mean report, variance report).
    """
    roles = {**{s: s for s in STAGE_ROLES}, **(roles or {})}
    candidates = tuple(range(data.p)) if candidates is None else tuple(sorted(set(int(c) for c in candidates)))
    if any(c < 0 or c >= data.p for c in candidates):
        raise PreconditionError(f"candidates {candidates} outside [0, {data.p})")
    st = run_selection(data.features, data.response, plan, candidates, alpha, roles,
                       data.feature_names, k_grid_fn)
    return st.mean_report, st.var_report
