"""Truth and observation simulation on dyadic grids."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import LevelAboveFine, NumericalBlowUp, ValidationError
from .model import Model
from .rng import RngStream

BLOWUP_NORM = 1e12


@dataclass(frozen=True)
class TimeGrid:
    level: int
    horizon: int

    def __post_init__(self):
        if self.level < 0 or self.horizon < 1:
            raise ValidationError(f"invalid grid level={self.level}, horizon={self.horizon}")

    @property
    def dt(self) -> float:
        return math.ldexp(1.0, -self.level)

    @property
    def n_steps(self) -> int:
        return self.horizon << self.level


@dataclass(frozen=True, eq=False)
class ObservationRecord:
    """One truth path and its observation increments on the finest grid.

    ``dY[k]`` is the increment over ``[k dt, (k+1) dt]``; ``truth`` has one
    more row than ``dY``.
    """

    grid: TimeGrid
    dY: np.ndarray
    truth: np.ndarray
    data_seed: int = 0

    def __post_init__(self):
        if len(self.dY) != self.grid.n_steps or len(self.truth) != self.grid.n_steps + 1:
            raise ValidationError("record lengths do not match the grid")
        for a in (self.dY, self.truth):
            a.setflags(write=False)


def simulate_truth_and_observations(m: Model, T: int, level_fine: int,
                                    stream: RngStream) -> ObservationRecord:
    """Euler-Maruyama simulation of the signal and observation increments.

    Sub-streams: ``child(0)`` draws the initial state, ``child(1)`` the
    signal increments and ``child(2)`` the observation noise, each as
    standard normals scaled by ``sqrt(dt)``.
    """
    grid = TimeGrid(level_fine, T)
    n, dt = grid.n_steps, grid.dt
    sdt = math.sqrt(dt)
    x0 = m.m0 + m.P0_sqrt @ stream.child(0).normals(m.d_x)
    dW = sdt * stream.child(1).normals((n, m.d_x))
    dV = sdt * stream.child(2).normals((n, m.d_y))
    # noise terms do not depend on the state: apply the square roots in bulk
    sig_noise = dW @ m.R1_sqrt.T
    obs_noise = dV @ m.R2_sqrt.T
    truth = np.empty((n + 1, m.d_x))
    dY = np.empty((n, m.d_y))
    truth[0] = x0
    bad = kernels.simulate(truth, dY, m, sig_noise, obs_noise, dt)
    if bad >= 0:
        raise NumericalBlowUp(f"signal blew up at step {bad + 1}")
    return ObservationRecord(grid, dY, truth, stream.master_seed)


def aggregate(dY: np.ndarray, levels_down: int) -> np.ndarray:
    """Sum increments over dyadic blocks, halving the resolution repeatedly.

    Each halving adds consecutive pairs, so aggregating in stages gives
    bit-identical results to aggregating at once.
    """
    out = np.asarray(dY)
    for _ in range(levels_down):
        out = out[0::2] + out[1::2]
    return out


def aggregate_increments(rec: ObservationRecord, level_target: int) -> np.ndarray:
    if level_target > rec.grid.level:
        raise LevelAboveFine(f"level {level_target} above record level {rec.grid.level}")
    if level_target < 0:
        raise ValidationError("level must be nonnegative")
    out = aggregate(rec.dY, rec.grid.level - level_target)
    return out.copy() if out is rec.dY else out


def write_record_csv(rec: ObservationRecord, path) -> Path:
    path = Path(path)
    d_x, d_y = rec.truth.shape[1], rec.dY.shape[1]
    header = ["step"] + [f"truth_{i}" for i in range(d_x)] + [f"dY_{j}" for j in range(d_y)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        n = rec.grid.n_steps
        for k in range(n + 1):
            dy = [repr(float(v)) for v in rec.dY[k]] if k < n else [""] * d_y
            w.writerow([k] + [repr(float(v)) for v in rec.truth[k]] + dy)
    return path


def read_record_csv(path, level: int, data_seed: int = 0) -> ObservationRecord:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d_x = sum(h.startswith("truth_") for h in header)
    truth = np.array([[float(v) for v in r[1:1 + d_x]] for r in body])
    dY = np.array([[float(v) for v in r[1 + d_x:]] for r in body[:-1]])
    n = len(body) - 1
    if n % (1 << level):
        raise ValidationError(f"{n} steps is not a whole horizon at level {level}")
    return ObservationRecord(TimeGrid(level, n >> level), dY, truth, data_seed)
