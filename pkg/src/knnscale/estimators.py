"""kNN conditional-mean and residual-based conditional-variance estimators, LOOCV choice of k."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .data import Standardizer
from .errors import PreconditionError
from .knn import KDTree, _ordered_prefix, scan_chunks

ERROR_MODES = ("gaussian", "empirical")

# rows of the (rows x grid) LOOCV error buffer processed per parallel block
_BLOCK_CELLS = 1 << 21


def default_k_grid(n: int) -> np.ndarray:
    """Candidate k values for a slice of n rows.

    Every k in 1..n-1 for n <= 1000, otherwise the geometric grid
    {ceil(1.25**j)} restricted to [1, n-1].
    """
    if n < 2:
        raise PreconditionError(f"k selection needs at least 2 rows, got {n}")
    if n <= 1000:
        return np.arange(1, n, dtype=np.int64)
    ks, j = set(), 0
    while True:
        k = math.ceil(1.25 ** j)
        if k > n - 1:
            break
        ks.add(k)
        j += 1
    return np.array(sorted(ks), dtype=np.int64)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(inline="always")
def _clamped_mean(total, k, lo_v, hi_v):
    # rounding in total / k can leave [min, max] of the averaged values (e.g. 0.1 * 3 / 3)
    return min(max(total / k, lo_v), hi_v)


@njit(cache=True, parallel=True)
def _loo_block_scan(X, r, grid, lo, hi, err, n_chunks):
    m = X.shape[0]
    kmax = grid[grid.shape[0] - 1]
    rows = hi - lo
    per = (rows + n_chunks - 1) // n_chunks
    for ch in prange(n_chunks):
        sq = np.empty(m)
        bkt = np.empty(m, dtype=np.int32)
        counts = np.empty(m + 1, dtype=np.int32)
        vals = np.empty(m)
        order = np.empty(m, dtype=np.int32)
        for t in range(ch * per, min(rows, (ch + 1) * per)):
            i = lo + t
            _ordered_prefix(X, X[i], i, kmax, sq, bkt, counts, vals, order)
            s = 0.0
            lo_v = np.inf
            hi_v = -np.inf
            g = 0
            for c in range(kmax):
                v = r[order[c]]
                s += v
                lo_v = min(lo_v, v)
                hi_v = max(hi_v, v)
                if c + 1 == grid[g]:
                    e = r[i] - _clamped_mean(s, c + 1, lo_v, hi_v)
                    err[t, g] = e * e
                    g += 1


@njit(cache=True, parallel=True)
def _loo_block_from_neighbors(nbrs, r, grid, lo, err):
    kmax = grid[grid.shape[0] - 1]
    for t in prange(nbrs.shape[0]):
        i = lo + t
        s = 0.0
        lo_v = np.inf
        hi_v = -np.inf
        g = 0
        for c in range(kmax):
            v = r[nbrs[t, c]]
            s += v
            lo_v = min(lo_v, v)
            hi_v = max(hi_v, v)
            if c + 1 == grid[g]:
                e = r[i] - _clamped_mean(s, c + 1, lo_v, hi_v)
                err[t, g] = e * e
                g += 1


@njit(cache=True)
def _accumulate_rows(err, tot):
    for t in range(err.shape[0]):
        for g in range(err.shape[1]):
            tot[g] += err[t, g]


@njit(cache=True, parallel=True)
def _neighbor_means(nbrs, r, out):
    k = nbrs.shape[1]
    for t in prange(nbrs.shape[0]):
        s = 0.0
        lo_v = np.inf
        hi_v = -np.inf
        for c in range(k):
            v = r[nbrs[t, c]]
            s += v
            lo_v = min(lo_v, v)
            hi_v = max(hi_v, v)
        out[t] = _clamped_mean(s, k, lo_v, hi_v)


def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def loocv_scores(X, responses, k_grid, method: str = "auto") -> np.ndarray:
    """Leave-one-out squared error f(k) for every k in ``k_grid``.

    f(k) = (1/n) sum_i (r_i - mean of r over the k nearest rows other than i)^2,
    summed over i in row order so the value does not depend on thread count.
    ``method`` is "scan" (per-row full sort), "tree" (kd-tree queries) or "auto".
    """
    X = _as_matrix(X)
    r = np.ascontiguousarray(responses, dtype=np.float64).reshape(-1)
    m = X.shape[0]
    if r.shape[0] != m:
        raise PreconditionError(f"{r.shape[0]} responses for {m} rows")
    if X.shape[1] == 0:
        raise PreconditionError("k selection needs at least one feature")
    grid = np.asarray(k_grid, dtype=np.int64).reshape(-1)
    if grid.size == 0:
        raise PreconditionError("empty k grid")
    if np.any(np.diff(grid) <= 0):
        raise PreconditionError("k grid must be strictly increasing")
    if grid[0] < 1 or grid[-1] > m - 1:
        raise PreconditionError(f"k grid must lie in [1, {m - 1}], got [{grid[0]}, {grid[-1]}]")
    kmax = int(grid[-1])
    if method == "auto":
        method = "tree" if kmax <= max(32, m // 16) else "scan"
    tree = KDTree(X) if method == "tree" else None
    tot = np.zeros(grid.size)
    block = max(1, _BLOCK_CELLS // max(grid.size, kmax if tree is not None else 1))
    for lo in range(0, m, block):
        hi = min(m, lo + block)
        err = np.empty((hi - lo, grid.size))
        if tree is None:
            _loo_block_scan(X, r, grid, lo, hi, err, scan_chunks(hi - lo))
        else:
            nbrs, _ = tree.query_batch(X[lo:hi], kmax, np.arange(lo, hi, dtype=np.int64))
            _loo_block_from_neighbors(nbrs, r, grid, lo, err)
        _accumulate_rows(err, tot)
    return tot / m


@dataclass(frozen=True)
class KSelectionTrace:
    k_grid: np.ndarray
    scores: np.ndarray
    chosen: int

    def to_dict(self) -> dict:
        return {"k_grid": self.k_grid.tolist(), "scores": self.scores.tolist(),
                "chosen": int(self.chosen)}


def select_k(X, responses, k_grid=None, method: str = "auto") -> KSelectionTrace:
    """Minimise the LOOCV score over the grid; ties go to the largest k."""
    X = _as_matrix(X)
    grid = default_k_grid(X.shape[0]) if k_grid is None else np.asarray(k_grid, dtype=np.int64)
    scores = loocv_scores(X, responses, grid, method)
    best = scores.min()
    chosen = int(grid[np.flatnonzero(scores == best)[-1]])
    return KSelectionTrace(grid, scores, chosen)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _support(support, p: int) -> tuple[int, ...]:
    sup = tuple(int(j) for j in support)
    if len(set(sup)) != len(sup) or any(j < 0 or j >= p for j in sup):
        raise PreconditionError(f"support {sup} is not a set of feature indices in [0, {p})")
    return tuple(sorted(sup))


@dataclass(frozen=True)
class _KnnAverage:
    """Average of stored responses over the k nearest training rows (in the support columns)."""
    support: tuple[int, ...]
    k: int
    X: np.ndarray
    r: np.ndarray
    rows: np.ndarray | None = None
    _tree: KDTree | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.array(_as_matrix(self.X), copy=True)
        r = np.array(self.r, dtype=np.float64, copy=True).reshape(-1)
        if X.shape[0] != r.shape[0] or r.shape[0] < 1:
            raise PreconditionError(f"{X.shape[0]} training rows but {r.shape[0]} responses")
        if X.shape[1] != len(self.support):
            raise PreconditionError(f"training slice has {X.shape[1]} columns for support {self.support}")
        if not 1 <= self.k <= r.shape[0]:
            raise PreconditionError(f"k={self.k} outside [1, {r.shape[0]}]")
        X.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "r", r)
        if self.rows is not None:
            rows = np.asarray(self.rows, dtype=np.int64).copy()
            rows.setflags(write=False)
            object.__setattr__(self, "rows", rows)
        if self.support:
            object.__setattr__(self, "_tree", KDTree(X))

    @property
    def n_train(self) -> int:
        return self.r.shape[0]

    @property
    def is_constant(self) -> bool:
        return not self.support

    def predict_batch(self, Xfull) -> np.ndarray:
        Xfull = _as_matrix(Xfull)
        if self.is_constant:
            mu = min(max(float(np.sum(self.r)) / self.r.shape[0], self.r.min()), self.r.max())
            return np.full(Xfull.shape[0], mu)
        Q = np.ascontiguousarray(Xfull[:, list(self.support)])
        nbrs, _ = self._tree.query_batch(Q, self.k)
        out = np.empty(Q.shape[0])
        _neighbor_means(nbrs, self.r, out)
        return out

    def _base_dict(self) -> dict:
        return {"support": list(self.support), "k": int(self.k), "X": self.X.tolist(),
                "r": self.r.tolist(), "rows": None if self.rows is None else self.rows.tolist()}


class MeanModel(_KnnAverage):
    """m(x) = average response of the k1 nearest training rows, distances over support A.

    An empty support is the constant fallback: the global mean of the training responses.
    """

    @property
    def k1(self) -> int:
        return self.k

    def to_dict(self) -> dict:
        return self._base_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "MeanModel":
        return cls(tuple(d["support"]), d["k"], np.array(d["X"], dtype=np.float64).reshape(len(d["r"]), len(d["support"])),
                   np.array(d["r"], dtype=np.float64), d.get("rows"))


@dataclass(frozen=True)
class VarianceModel(_KnnAverage):
    homoscedastic: bool = False

    @property
    def k2(self) -> int:
        return self.k

    @property
    def constant_variance(self) -> float:
        return min(max(float(np.sum(self.r)) / self.r.shape[0], self.r.min()), self.r.max())

    @property
    def is_constant(self) -> bool:
        return self.homoscedastic or not self.support

    def predict_batch(self, Xfull) -> np.ndarray:
        Xfull = _as_matrix(Xfull)
        if self.is_constant:
            return np.full(Xfull.shape[0], self.constant_variance)
        return np.maximum(super().predict_batch(Xfull), 0.0)

    def to_dict(self) -> dict:
        d = self._base_dict()
        d["homoscedastic"] = bool(self.homoscedastic)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceModel":
        return cls(tuple(d["support"]), d["k"], np.array(d["X"], dtype=np.float64).reshape(len(d["r"]), len(d["support"])),
                   np.array(d["r"], dtype=np.float64), d.get("rows"), d["homoscedastic"])


def fit_mean(X, y, support, k1: int, rows=None) -> MeanModel:
    """Fit on a training slice. ``X`` holds all p columns; only ``support`` is used for distances."""
    X = _as_matrix(X)
    sup = _support(support, X.shape[1])
    k1 = len(y) if not sup else int(k1)
    return MeanModel(sup, k1, X[:, list(sup)], y, rows)


def predict_mean(model: MeanModel, x) -> float:
    return float(model.predict_batch(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def compute_residuals(model: MeanModel, X, y, rows=None) -> np.ndarray:
    """y - m(X) on a slice that must not share rows with the slice the model was fitted on."""
    if rows is not None and model.rows is not None:
        clash = np.intersect1d(np.asarray(rows, dtype=np.int64), model.rows)
        if clash.size:
            raise PreconditionError(
                f"residual slice shares {clash.size} rows with the mean-fitting slice "
                f"(first: {int(clash[0])})")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return y - model.predict_batch(X)


def fit_variance(residuals, X, support, k2: int, homoscedastic: bool = False, rows=None) -> VarianceModel:
    """Local average of squared residuals over the k2 nearest rows in the support columns.

    With ``homoscedastic`` (or an empty support) the variance is the global mean of
    the squared residuals.
    """
    X = _as_matrix(X)
    sup = _support(support, X.shape[1])
    e2 = np.asarray(residuals, dtype=np.float64).reshape(-1) ** 2
    homo = bool(homoscedastic) or not sup
    if homo:
        sup = ()
        k2 = e2.shape[0]
    return VarianceModel(sup, int(k2), X[:, list(sup)], e2, rows, homo)


def predict_variance(model: VarianceModel, x) -> float:
    return float(model.predict_batch(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def predict_sd(model: VarianceModel, x) -> float:
    return math.sqrt(predict_variance(model, x))


# ---------------------------------------------------------------------------
# combined model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaleLocModel:
    """Fitted location/scale pair on raw covariates.

    Inputs are standardized (if a standardizer is attached) before the mean and
    variance models see them.  ``calibration`` holds standardized residuals from
    a held-out split and is present exactly when ``error_mode == "empirical"``.
    """
    mean: MeanModel
    variance: VarianceModel
    p: int
    error_mode: str = "gaussian"
    calibration: np.ndarray | None = None
    calibration_dropped: int = 0
    standardizer: Standardizer | None = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.error_mode not in ERROR_MODES:
            raise PreconditionError(f"error_mode must be one of {ERROR_MODES}, got {self.error_mode!r}")
        if (self.calibration is not None) != (self.error_mode == "empirical"):
            raise PreconditionError("calibration residuals are required iff error_mode is 'empirical'")
        if self.calibration is not None:
            c = np.array(self.calibration, dtype=np.float64).reshape(-1)
            c.setflags(write=False)
            object.__setattr__(self, "calibration", c)
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(self.p))
        object.__setattr__(self, "feature_names", names)

    def _prepare(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.p:
            raise PreconditionError(f"model expects {self.p} features, got {X.shape[1]}")
        if self.standardizer is not None:
            X = np.ascontiguousarray(self.standardizer.transform(X))
        return X

    def predict_mean(self, X) -> np.ndarray:
        return self.mean.predict_batch(self._prepare(X))

    def predict_variance(self, X) -> np.ndarray:
        return self.variance.predict_batch(self._prepare(X))

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        Z = self._prepare(X)
        return self.mean.predict_batch(Z), np.sqrt(self.variance.predict_batch(Z))

    def to_dict(self) -> dict:
        return {
            "kind": "knnscale.ScaleLocModel",
            "format_version": 1,
            "p": int(self.p),
            "feature_names": list(self.feature_names),
            "error_mode": self.error_mode,
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "mean": self.mean.to_dict(),
            "variance": self.variance.to_dict(),
            "calibration": None if self.calibration is None else self.calibration.tolist(),
            "calibration_dropped": int(self.calibration_dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleLocModel":
        if d.get("kind") != "knnscale.ScaleLocModel":
            raise PreconditionError("not a knnscale model document")
        std = d.get("standardizer")
        cal = d.get("calibration")
        return cls(
            mean=MeanModel.from_dict(d["mean"]),
            variance=VarianceModel.from_dict(d["variance"]),
            p=int(d["p"]),
            error_mode=d["error_mode"],
            calibration=None if cal is None else np.array(cal, dtype=np.float64),
            calibration_dropped=int(d.get("calibration_dropped", 0)),
            standardizer=None if std is None else Standardizer.from_dict(std),
            feature_names=tuple(d.get("feature_names", ())),
        )
