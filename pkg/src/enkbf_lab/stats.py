"""Least-squares rate fits on log2-log2 data."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

R2_WARN = 0.8


class PoorFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    points: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "points": [[float(x), float(y)] for x, y in self.points]}


def fit_line(x, y, label: str = "fit") -> SlopeFit:
    """Ordinary least squares ``y = slope * x + intercept``.

    Emits :class:`PoorFitWarning` when ``r_squared < 0.8``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two (x, y) points of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite points in slope fit")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = np.sum((y - ym) ** 2)
    ss_res = np.sum((y - (slope * x + intercept)) ** 2)
    r2 = 1.0 if ss_tot == 0 else float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))
    if r2 < R2_WARN:
        warnings.warn(f"{label}: r_squared {r2:.3f} below {R2_WARN}", PoorFitWarning,
                      stacklevel=2)
    return SlopeFit(slope, intercept, r2, list(zip(x.tolist(), y.tolist())))


def fit_log2(x, y, label: str = "fit") -> SlopeFit:
    """Fit ``log2 y`` against ``log2 x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive points")
    return fit_line(np.log2(x), np.log2(y), label)


def mean_and_stderr(samples, axis=0):
    """Mean and standard error (ddof=1) along ``axis``."""
    s = np.asarray(samples, dtype=float)
    n = s.shape[axis]
    se = s.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.full(np.mean(s, axis).shape, np.nan)
    return s.mean(axis=axis), se
