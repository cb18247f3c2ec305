"""Prediction intervals m(x) +/- c * sigma(x), with c from calibration residuals or the normal law."""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special

from .errors import DegenerateScaleWarning, PreconditionError
from .estimators import ScaleLocModel

MODES = ("empirical", "gaussian")
MIN_SCALE = 1e-12


def _check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not 0 < alpha < 1:
        raise PreconditionError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


@dataclass(frozen=True)
class IntervalSpec:
    alpha: float = 0.1
    mode: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))
        if self.mode not in MODES:
            raise PreconditionError(f"interval mode must be one of {MODES}, got {self.mode!r}")


def order_statistic_index(alpha: float, n: int) -> int:
    """1-based index ceil((1 - alpha)(n + 1)), evaluated exactly on the decimal value of alpha."""
    a = Fraction(repr(_check_alpha(alpha)))
    return math.ceil((1 - a) * (n + 1))


@dataclass(frozen=True)
class CalibrationSet:
    """Standardized residuals (y - m(x)) / sigma(x) from a held-out split."""
    residuals: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        r = np.array(self.residuals, dtype=np.float64).reshape(-1)
        r.setflags(write=False)
        object.__setattr__(self, "residuals", r)

    @property
    def n(self) -> int:
        return self.residuals.shape[0]

    def quantile(self, alpha: float) -> float:
        idx = order_statistic_index(alpha, self.n)
        if idx > self.n:
            raise PreconditionError(
                f"alpha={alpha} needs at least {math.ceil(1 / alpha)} usable calibration rows "
                f"(order statistic {idx}), have {self.n}")
        return float(np.sort(np.abs(self.residuals))[idx - 1])


def calibrate_empirical(model: ScaleLocModel, X, y) -> CalibrationSet:
    """Standardized residuals on calibration rows; rows with sigma below 1e-12 are dropped and counted."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mean, sd = model.predict(X)
    if y.shape[0] != mean.shape[0]:
        raise PreconditionError(f"{mean.shape[0]} calibration rows but {y.shape[0]} responses")
    keep = sd >= MIN_SCALE
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        warnings.warn(f"{dropped} calibration rows with zero predicted scale were dropped",
                      DegenerateScaleWarning, stacklevel=2)
    return CalibrationSet((y[keep] - mean[keep]) / sd[keep], dropped)


def with_calibration(model: ScaleLocModel, cal: CalibrationSet) -> ScaleLocModel:
    return dataclasses.replace(model, error_mode="empirical", calibration=cal.residuals,
                               calibration_dropped=cal.dropped)


def gaussian_multiplier(alpha: float) -> float:
    """Standard normal quantile at 1 - alpha/2, computed from the lower tail to keep precision."""
    return float(-special.ndtri(_check_alpha(alpha) / 2))


def multiplier(model: ScaleLocModel, spec: IntervalSpec) -> float:
    if spec.mode == "gaussian":
        return gaussian_multiplier(spec.alpha)
    if model.calibration is None:
        raise PreconditionError("empirical intervals need a calibrated model (error_mode 'empirical')")
    return CalibrationSet(model.calibration, model.calibration_dropped).quantile(spec.alpha)


def interval_from(mean, sd, c: float):
    mean = np.asarray(mean, dtype=np.float64)
    half = c * np.asarray(sd, dtype=np.float64)
    return mean - half, mean + half


def predict_interval(model: ScaleLocModel, X, spec: IntervalSpec):
    """Returns (mean, lower, upper) arrays for each row of X."""
    c = multiplier(model, spec)
    mean, sd = model.predict(X)
    lo, hi = interval_from(mean, sd, c)
    return mean, lo, hi
