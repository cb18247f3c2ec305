"""Covariate-conditional CDF, ROC rates and AUC for two Gaussian scale-location populations."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import DegenerateScaleWarning, PreconditionError
from .estimators import ScaleLocModel


def _norm_cdf(z):
    return special.ndtr(z)


def _cdf(t, m, s):
    """Phi((t - m)/s), or the step at m when s == 0."""
    t, m, s = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (t, m, s)))
    out = np.empty(t.shape)
    pos = s > 0
    out[pos] = _norm_cdf((t[pos] - m[pos]) / s[pos])
    out[~pos] = (t[~pos] >= m[~pos]).astype(np.float64)
    return out


def _warn_degenerate(sd, who: str):
    bad = int(np.count_nonzero(np.asarray(sd) <= 0))
    if bad:
        warnings.warn(f"{who}: {bad} point(s) with zero predicted scale, using a step CDF",
                      DegenerateScaleWarning, stacklevel=3)


def conditional_cdf(model: ScaleLocModel, t, x):
    """F(t | x) = Phi((t - m(x)) / sigma(x)) for one covariate row ``x``."""
    m, s = model.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))
    _warn_degenerate(s, "conditional_cdf")
    out = _cdf(t, m[0], s[0])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RocModel:
    diseased: ScaleLocModel
    healthy: ScaleLocModel

    def __post_init__(self):
        for name, m in (("diseased", self.diseased), ("healthy", self.healthy)):
            if m.error_mode != "gaussian":
                raise PreconditionError(f"{name} model must use the gaussian error mode")
        if self.diseased.p != self.healthy.p:
            raise PreconditionError(
                f"populations disagree on covariate dimension: {self.diseased.p} vs {self.healthy.p}")

    def params(self, X):
        """(m_D, s_D, m_H, s_H) arrays over the rows of X."""
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(1, -1) if X.ndim == 1 else X
        mD, sD = self.diseased.predict(X)
        mH, sH = self.healthy.predict(X)
        _warn_degenerate(sD, "diseased")
        _warn_degenerate(sH, "healthy")
        return mD, sD, mH, sH


def tpr_fpr(roc: RocModel, c, x):
    """(1 - F_D(c | x), 1 - F_H(c | x))."""
    mD, sD, mH, sH = roc.params(x)
    tpr = 1.0 - _cdf(c, mD[0], sD[0])
    fpr = 1.0 - _cdf(c, mH[0], sH[0])
    if tpr.ndim == 0:
        return float(tpr), float(fpr)
    return tpr, fpr


def auc_gaussian(mD, sD, mH, sH):
    """P(Y_D > Y_H) for independent normals; ties count one half when both scales vanish."""
    mD, sD, mH, sH = (np.asarray(v, dtype=np.float64) for v in (mD, sD, mH, sH))
    scale = np.sqrt(sD * sD + sH * sH)
    diff = mD - mH
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(scale > 0, _norm_cdf(diff / np.where(scale > 0, scale, 1.0)),
                       np.where(diff > 0, 1.0, np.where(diff < 0, 0.0, 0.5)))
    return out


def _quantile(u, m, s):
    return m + s * special.ndtri(u)


def auc_quadrature(mD, sD, mH, sH, n_quad: int = 10_000, variant: str = "definition") -> float:
    """Composite midpoint rule for the AUC integral.

    ``definition``: int_0^1 1 - F_D(F_H^{-1}(1 - u)) du, the area under u -> TPR(FPR^{-1}(u)).
    ``printed``: int_0^1 1 - F_H(F_D^{-1}(1 - u)) du, which integrates to 1 - AUC.
    """
    if int(n_quad) < 2:
        raise PreconditionError(f"n_quad must be at least 2, got {n_quad}")
    u = (np.arange(int(n_quad)) + 0.5) / int(n_quad)
    if variant == "definition":
        vals = 1.0 - _cdf(_quantile(1.0 - u, mH, sH), mD, sD)
    elif variant == "printed":
        vals = 1.0 - _cdf(_quantile(1.0 - u, mD, sD), mH, sH)
    else:
        raise PreconditionError(f"unknown quadrature variant {variant!r}")
    return float(np.mean(vals))


def auc(roc: RocModel, x, n_quad: int | None = None) -> float:
    """Conditional AUC at covariate row ``x``.

    Uses the closed form by default; with ``n_quad`` the quadrature path is used instead.
    """
    mD, sD, mH, sH = roc.params(x)
    if n_quad is None:
        return float(auc_gaussian(mD[0], sD[0], mH[0], sH[0]))
    return auc_quadrature(mD[0], sD[0], mH[0], sH[0], n_quad)


def auc_surface(roc: RocModel, x_grid) -> list[tuple[tuple[float, ...], float]]:
    G = np.asarray(x_grid, dtype=np.float64)
    G = G.reshape(1, -1) if G.ndim == 1 else G
    mD, sD, mH, sH = roc.params(G)
    vals = auc_gaussian(mD, sD, mH, sH)
    return [(tuple(float(v) for v in row), float(a)) for row, a in zip(G, vals)]


def write_surface_csv(surface, path, feature_names) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*feature_names, "auc"])
        for x, a in surface:
            w.writerow([*(repr(v) for v in x), repr(a)])
