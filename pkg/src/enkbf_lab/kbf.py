"""Discrete Kalman-Bucy mean and Riccati recursions (the reference filter)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionMismatch, LevelAboveFine, NumericalBlowUp
from .model import Model
from .paths import BLOWUP_NORM, ObservationRecord, TimeGrid, aggregate_increments

#: Second-order covariance terms. "vanilla" is the N -> infinity limit of the
#: perturbed-observation ensemble, "deterministic" that of the deterministic one.
FORMS = ("vanilla", "deterministic")


def _sym(X: np.ndarray) -> np.ndarray:
    return (X + X.T) / 2


def _check_square(P: np.ndarray, m: Model):
    if P.shape != (m.d_x, m.d_x):
        raise DimensionMismatch(f"covariance shape {P.shape}, expected {(m.d_x, m.d_x)}")


def riccati_drift(P: np.ndarray, m: Model) -> np.ndarray:
    """``A P + P A^T - P S P + R1``, symmetrized."""
    P = np.asarray(P, dtype=float)
    _check_square(P, m)
    AP = m.A @ P
    return _sym(AP + AP.T - P @ m.S @ P + m.R1)


def second_order_term(P: np.ndarray, m: Model, form: str = "vanilla") -> np.ndarray:
    """The ``dt**2`` coefficient of the covariance recursion.

    vanilla: ``(A - P S) P (A^T - S P)``;
    deterministic: ``(A - P S / 2) P (A^T - S P / 2)``.
    """
    P = np.asarray(P, dtype=float)
    _check_square(P, m)
    if form not in FORMS:
        raise ValueError(f"unknown covariance form {form!r}")
    scale = 1.0 if form == "vanilla" else 0.5
    B = m.A - scale * (P @ m.S)
    return _sym(B @ P @ B.T)


@dataclass(frozen=True)
class KbfState:
    mean: np.ndarray
    cov: np.ndarray
    step_index: int
    grid: TimeGrid


def _step(mean, P, dY, m: Model, dt: float, form: str):
    U = P @ m.gain_factor
    new_mean = mean + (m.A @ mean) * dt + U @ (dY - (m.C @ mean) * dt)
    new_cov = _sym(P + riccati_drift(P, m) * dt + second_order_term(P, m, form) * dt * dt)
    if not np.all(np.isfinite(new_mean)) or np.linalg.norm(new_mean) > BLOWUP_NORM:
        raise NumericalBlowUp("Kalman-Bucy mean blew up")
    return new_mean, new_cov


def kbf_step(state: KbfState, dY, m: Model, form: str = "vanilla") -> KbfState:
    """Advance mean and covariance by one step of ``state.grid.dt``."""
    mean, cov = _step(state.mean, state.cov, np.asarray(dY, dtype=float), m,
                      state.grid.dt, form)
    return KbfState(mean, cov, state.step_index + 1, state.grid)


@dataclass(frozen=True, eq=False)
class KbfTrajectory:
    grid: TimeGrid
    means: np.ndarray  # (n_steps + 1, d_x)
    covs: np.ndarray  # (n_steps + 1, d_x, d_x)

    def __len__(self):
        return len(self.means)

    def __getitem__(self, k: int) -> KbfState:
        k = range(len(self))[k]
        return KbfState(self.means[k], self.covs[k], k, self.grid)

    @property
    def final(self) -> KbfState:
        return self[-1]


def run_kbf(rec: ObservationRecord, level: int, m: Model, form: str = "vanilla",
            backend: str | None = None) -> KbfTrajectory:
    """Run the discrete filter from ``(m0, P0)`` over the record aggregated to ``level``.

    The loop runs in the particle-kernel backend; :func:`kbf_step` is the
    plain numpy statement of the same update.
    """
    if level > rec.grid.level:
        raise LevelAboveFine(f"level {level} above record level {rec.grid.level}")
    grid = TimeGrid(level, rec.grid.horizon)
    dY = aggregate_increments(rec, level)
    n = grid.n_steps
    means = np.empty((n + 1, m.d_x))
    covs = np.empty((n + 1, m.d_x, m.d_x))
    means[0], covs[0] = m.m0, m.P0
    if form not in FORMS:
        raise ValueError(f"unknown covariance form {form!r}")
    bad = kernels.kbf_run(means, covs, m, dY, grid.dt, 1.0 if form == "vanilla" else 0.5,
                          backend)
    if bad >= 0:
        raise NumericalBlowUp(f"Kalman-Bucy mean blew up at step {bad + 1}")
    return KbfTrajectory(grid, means, covs)


def write_trajectory_csv(traj: KbfTrajectory, path, include_cov: bool = False) -> Path:
    path = Path(path)
    d_x = traj.means.shape[1]
    header = ["step", "t"] + [f"mean_{i}" for i in range(d_x)]
    if include_cov:
        header += [f"cov_{i}_{j}" for i in range(d_x) for j in range(d_x)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj)):
            row = [k, repr(k * traj.grid.dt)] + [repr(float(v)) for v in traj.means[k]]
            if include_cov:
                row += [repr(float(v)) for v in traj.covs[k].ravel()]
            w.writerow(row)
    return path
