"""Coupled fine/coarse EnKBF pairs and the multilevel estimator.

A coupled pair at level ``l`` runs a fine ensemble on ``dt = 2**-l`` and a
coarse one on ``2 dt`` from the same initial particles. Each coarse step
consumes the sum of the two fine observation increments and, per particle,
the sum of the two fine Brownian increments (and for the vanilla variant
the sum of the two fine observation perturbations).

Stream layout for :func:`run_coupled` under ``s`` matches
:func:`enkbf_lab.enkbf.run_enkbf`: ``s.child(0)`` initial particles,
``s.child(1)``/``s.child(2)`` fine-grid signal/observation noise.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .enkbf import (Ensemble, Variant, _check_blowup, _step_particles, init_ensemble,
                    noise_chunks, run_enkbf)
from .errors import ConfigInvalid, LevelAboveFine, NumericalBlowUp, ValidationError
from .model import Model
from .paths import ObservationRecord, TimeGrid, aggregate_increments
from .rng import as_stream


@dataclass(frozen=True, eq=False)
class CoupledEnsemble:
    fine: Ensemble
    coarse: Ensemble
    shared_initial: bool = True

    def __post_init__(self):
        f, c = self.fine, self.coarse
        if f.n != c.n or f.level != c.level + 1 or f.variant is not c.variant:
            raise ValidationError("fine/coarse ensembles are not a coupled pair")

    @property
    def variant(self) -> Variant:
        return self.fine.variant

    @property
    def gap(self) -> np.ndarray:
        """Per-particle fine minus coarse states."""
        return self.fine.particles - self.coarse.particles


def init_coupled(n: int, m: Model, level: int, variant, stream) -> CoupledEnsemble:
    if level < 1:
        raise ValidationError("a coupled pair needs level >= 1")
    fine = init_ensemble(n, m, level, variant, stream)
    coarse = Ensemble(fine.particles.copy(), level - 1, fine.variant)
    return CoupledEnsemble(fine, coarse)


def coupled_step(ce: CoupledEnsemble, dY_fine_pair, m: Model, stream=None, noise=None,
                 zero_noise: bool = False) -> CoupledEnsemble:
    """Two fine steps and one coarse step driven by the same noise.

    ``noise`` may be given as fine-grid increments ``(dW, dV)`` with shapes
    ``(2, N, d_x)`` and ``(2, N, d_y)``; otherwise standard normals come from
    ``stream.child(0)`` (signal) and ``stream.child(1)`` (observation, vanilla).
    """
    fine, coarse = ce.fine, ce.coarse
    n, d_x = fine.particles.shape
    dt = fine.dt
    det = ce.variant.deterministic
    dY = np.asarray(dY_fine_pair, dtype=float).reshape(2, m.d_y)
    if zero_noise:
        dW, dV = np.zeros((2, n, d_x)), np.zeros((2, n, m.d_y))
    elif noise is not None:
        dW, dV = noise
        dW = np.asarray(dW, dtype=float)
        dV = np.zeros((2, n, m.d_y)) if dV is None else np.asarray(dV, dtype=float)
    else:
        s = as_stream(stream)
        sdt = math.sqrt(dt)
        dW = sdt * s.child(0).normals((2, n, d_x))
        dV = np.zeros((2, n, m.d_y)) if det else sdt * s.child(1).normals((2, n, m.d_y))
    v = ce.variant
    Xf = fine.particles
    for k in range(2):
        Xf = _step_particles(Xf, v, dY[k], dW[k], dV[k], m, dt)
    Xc = _step_particles(coarse.particles, v, dY[0] + dY[1], dW[0] + dW[1], dV[0] + dV[1],
                         m, 2 * dt)
    _check_blowup(Xf)
    _check_blowup(Xc)
    return CoupledEnsemble(
        Ensemble(Xf, fine.level, v, fine.step_index + 2),
        Ensemble(Xc, coarse.level, v, coarse.step_index + 1),
        ce.shared_initial,
    )


class CoupledResult(NamedTuple):
    increment: np.ndarray
    fine_mean: np.ndarray
    coarse_mean: np.ndarray


def run_coupled(variant, n: int, level: int, rec: ObservationRecord, m: Model, stream,
                backend: str | None = None, init_stream=None) -> CoupledResult:
    """Terminal fine minus coarse ensemble means of one coupled pair.

    ``init_stream`` overrides where the initial particles come from (used to
    share one initial ensemble across level terms).
    """
    variant = Variant.parse(variant)
    if level < 1:
        raise ValidationError("a coupled pair needs level >= 1")
    if level > rec.grid.level:
        raise LevelAboveFine(f"level {level} above record level {rec.grid.level}")
    stream = as_stream(stream)
    src = stream.child(0) if init_stream is None else as_stream(init_stream)
    Xf = np.array(init_ensemble(n, m, level, variant, src).particles)
    Xc = Xf.copy()
    grid = TimeGrid(level, rec.grid.horizon)
    dY = aggregate_increments(rec, level)
    for start, stop, dW, dV in noise_chunks(stream, grid.n_steps, n, m, grid.dt,
                                            variant.deterministic, even=True):
        bad = kernels.advance_coupled(Xf, Xc, m, dY[start:stop], dW, dV, grid.dt,
                                      variant.deterministic, backend)
        if bad >= 0:
            raise NumericalBlowUp(
                f"coupled pair blew up at coarse step {start // 2 + bad + 1} (level {level})")
    fm, cm = Xf.mean(axis=0), Xc.mean(axis=0)
    return CoupledResult(fm - cm, fm, cm)


# --- multilevel estimator -------------------------------------------------


@dataclass
class MlConfig:
    """Levels ``l_start..l_target`` with particle counts ``particles[level]``."""

    l_start: int
    l_target: int
    particles: dict
    variant: Variant = Variant.DETERMINISTIC
    T: int = 10
    share_initial: bool = False

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.particles = {int(k): int(v) for k, v in self.particles.items()}
        self.validate()

    def validate(self):
        if self.l_start < 0 or self.l_target < self.l_start:
            raise ConfigInvalid(f"need 0 <= l_start <= l_target, got {self.l_start}, {self.l_target}")
        if self.T < 1:
            raise ConfigInvalid("horizon T must be >= 1")
        counts = []
        for lv in self.levels:
            if lv not in self.particles:
                raise ConfigInvalid(f"no particle count for level {lv}")
            if self.particles[lv] < 2:
                raise ConfigInvalid(f"level {lv} needs at least 2 particles")
            counts.append(self.particles[lv])
        if any(b > a for a, b in zip(counts, counts[1:])):
            warnings.warn("particle counts increase with level", stacklevel=3)

    @property
    def levels(self) -> range:
        return range(self.l_start, self.l_target + 1)

    def cost(self) -> float:
        """Particle-steps charged: ``sum_l N_l 2**l T`` (coarse halves not charged)."""
        return float(sum(self.particles[lv] * (1 << lv) * self.T for lv in self.levels))


@dataclass
class LevelTerm:
    level: int
    n: int
    value: np.ndarray
    cost: float


@dataclass
class MlResult:
    estimate: np.ndarray
    cost: float
    terms: list = field(default_factory=list)


def ml_estimate(cfg: MlConfig, rec: ObservationRecord, m: Model, seed,
                backend: str | None = None) -> MlResult:
    """Multilevel estimate of the terminal filter mean.

    Level term ``l`` uses stream ``seed.child(l)``; the base term is exactly
    ``run_enkbf(variant, N, l_start, rec, m, seed.child(l_start))``.
    """
    cfg.validate()
    if cfg.l_target > rec.grid.level:
        raise LevelAboveFine(f"level {cfg.l_target} above record level {rec.grid.level}")
    if rec.grid.horizon != cfg.T:
        raise ConfigInvalid(f"record horizon {rec.grid.horizon} differs from T={cfg.T}")
    root = as_stream(seed)
    shared = root.child(cfg.l_start).child(0) if cfg.share_initial else None
    terms = []
    for lv in cfg.levels:
        n = cfg.particles[lv]
        s = root.child(lv)
        if lv == cfg.l_start:
            value = run_enkbf(cfg.variant, n, lv, rec, m, s, backend)[1]
        else:
            value = run_coupled(cfg.variant, n, lv, rec, m, s, backend, init_stream=shared).increment
        terms.append(LevelTerm(lv, n, value, float(n * (1 << lv) * cfg.T)))
    estimate = np.zeros(m.d_x)
    for t in terms:
        estimate = estimate + t.value
    return MlResult(estimate, float(sum(t.cost for t in terms)), terms)


def allocate_particles(epsilon_or_L, l_start: int = 3, n_base: int | None = None) -> dict:
    """Equipartition allocation ``N_l = ceil(n_base 2**-(l - l_start) (L - l_start + 1))``.

    An integer argument is the target level ``L`` (``n_base`` defaults to 100).
    A float in (0, 1) is a target RMSE ``eps``: then ``L`` is the smallest
    level with ``2**-L <= eps`` and ``n_base = ceil(2**-l_start / eps**2)``,
    which balances the summed level variances against ``eps**2``.
    """
    if isinstance(epsilon_or_L, (int, np.integer)):
        L = int(epsilon_or_L)
        base = 100 if n_base is None else n_base
    else:
        eps = float(epsilon_or_L)
        if not 0 < eps < 1:
            raise ValidationError("epsilon must lie in (0, 1)")
        L = max(l_start, math.ceil(-math.log2(eps) - 1e-12))
        base = math.ceil(math.ldexp(1.0, -l_start) / eps ** 2) if n_base is None else n_base
    if L < l_start:
        raise ValidationError(f"target level {L} below start level {l_start}")
    width = L - l_start + 1
    return {lv: max(2, math.ceil(base * math.ldexp(1.0, -(lv - l_start)) * width - 1e-9))
            for lv in range(l_start, L + 1)}
