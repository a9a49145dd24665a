"""Discretized ensemble Kalman-Bucy filters (vanilla and deterministic).

Noise layout for a full run under stream ``s``:

* ``s.child(0)``: initial ensemble, rows i.i.d. ``N(m0, P0)``;
* ``s.child(1)``: signal increments, one ``(N, d_x)`` block per step;
* ``s.child(2)``: observation perturbations (vanilla only), ``(N, d_y)`` per step.

Blocks are drawn sequentially from one generator per sub-stream, in chunks
of steps; chunking does not change the values. The deterministic variant
never opens ``child(2)``, so for ``C = 0`` both variants see the same
signal noise and produce identical particles.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionMismatch, LevelAboveFine, NumericalBlowUp, TooFewParticles
from .model import Model
from .paths import BLOWUP_NORM, ObservationRecord, TimeGrid, aggregate_increments
from .rng import RngStream, as_stream

CHUNK_DOUBLES = 1 << 20


class Variant(enum.Enum):
    VANILLA = "vanilla"
    DETERMINISTIC = "deterministic"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for v in cls:
            if key in (v.value, v.name.lower(), v.value[0]):
                return v
        raise ValueError(f"unknown variant {value!r}")

    @property
    def deterministic(self) -> bool:
        return self is Variant.DETERMINISTIC

    @property
    def form(self) -> str:
        """Name of the matching covariance recursion in :mod:`enkbf_lab.kbf`."""
        return self.value

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class Ensemble:
    particles: np.ndarray  # (N, d_x)
    level: int
    variant: Variant
    step_index: int = 0

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def dt(self) -> float:
        return math.ldexp(1.0, -self.level)


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray
    cov: np.ndarray


def init_ensemble(n: int, m: Model, level: int, variant, stream) -> Ensemble:
    if n < 2:
        raise TooFewParticles(f"need at least 2 particles, got {n}")
    Z = as_stream(stream).normals((n, m.d_x))
    X = m.m0 + Z @ m.P0_sqrt.T
    return Ensemble(np.ascontiguousarray(X), level, Variant.parse(variant))


def ensemble_stats(e) -> EnsembleStats:
    """Sample mean and (N-1)-normalized covariance of the particles."""
    X = e.particles if isinstance(e, Ensemble) else np.atleast_2d(np.asarray(e, dtype=float))
    n = X.shape[0]
    if n < 2:
        raise TooFewParticles(f"need at least 2 particles, got {n}")
    mean = X.mean(axis=0)
    D = X - mean
    cov = D.T @ D / (n - 1)
    return EnsembleStats(mean, (cov + cov.T) / 2)


def _check_blowup(X, what="particle"):
    sq = np.einsum("ij,ij->i", X, X)
    if not np.all(np.isfinite(sq)) or sq.max() > BLOWUP_NORM ** 2:
        raise NumericalBlowUp(f"{what} norm exceeded {BLOWUP_NORM:g}")


def _step_particles(X, variant: Variant, dY, dW, dV, m: Model, dt: float) -> np.ndarray:
    """One explicit Euler step with gain from the frozen input statistics."""
    st = ensemble_stats(X)
    K = st.cov @ m.gain_factor
    if variant.deterministic:
        innov = dY - ((X + st.mean) @ m.C.T) * (dt / 2)
    else:
        innov = dY - (X @ m.C.T) * dt - dV @ m.R2_sqrt.T
    return X + (X @ m.A.T) * dt + dW @ m.R1_sqrt.T + innov @ K.T


def enkbf_step(e: Ensemble, dY, m: Model, stream=None, noise=None,
               zero_noise: bool = False) -> Ensemble:
    """Advance the ensemble one step of its level.

    Noise comes from ``stream`` (``child(0)`` signal, ``child(1)`` observation
    perturbation, standard normals scaled by sqrt(dt)), or explicitly as
    increments ``noise = (dW, dV)`` (``dV`` may be None for the deterministic
    variant), or is switched off with ``zero_noise`` (test hook).
    """
    X = e.particles
    n, d_x = X.shape
    dt = e.dt
    dY = np.asarray(dY, dtype=float).reshape(-1)
    if dY.shape != (m.d_y,):
        raise DimensionMismatch(f"dY has {dY.size} entries, expected {m.d_y}")
    if zero_noise:
        dW, dV = np.zeros((n, d_x)), np.zeros((n, m.d_y))
    elif noise is not None:
        dW, dV = noise if isinstance(noise, tuple) else (noise, None)
        dW = np.asarray(dW, dtype=float)
        if dV is None:
            if not e.variant.deterministic:
                raise ValueError("vanilla variant needs observation perturbations")
            dV = np.zeros((n, m.d_y))
        dV = np.asarray(dV, dtype=float)
    else:
        s = as_stream(stream)
        sdt = math.sqrt(dt)
        dW = sdt * s.child(0).normals((n, d_x))
        dV = (np.zeros((n, m.d_y)) if e.variant.deterministic
              else sdt * s.child(1).normals((n, m.d_y)))
    Xn = _step_particles(X, e.variant, dY, dW, dV, m, dt)
    _check_blowup(Xn)
    return Ensemble(Xn, e.level, e.variant, e.step_index + 1)


def _chunk_steps(n: int, width: int, total: int, even: bool = False) -> int:
    c = max(1, CHUNK_DOUBLES // max(1, n * width))
    if even:
        c = max(2, c - c % 2)
    return min(c, total)


def noise_chunks(stream: RngStream, n_steps: int, n: int, m: Model, dt: float,
                 deterministic: bool, even: bool = False):
    """Yield ``(start, stop, dW, dV)`` increment blocks for a run."""
    sdt = math.sqrt(dt)
    gw = stream.child(1).generator()
    gv = None if deterministic else stream.child(2).generator()
    chunk = _chunk_steps(n, m.d_x + m.d_y, n_steps, even)
    for start in range(0, n_steps, chunk):
        stop = min(start + chunk, n_steps)
        k = stop - start
        dW = gw.standard_normal((k, n, m.d_x))
        dW *= sdt
        dV = None
        if gv is not None:
            dV = gv.standard_normal((k, n, m.d_y))
            dV *= sdt
        yield start, stop, dW, dV


def run_enkbf(variant, n: int, level: int, rec: ObservationRecord, m: Model, stream,
              backend: str | None = None, cov_path: np.ndarray | None = None):
    """Run one EnKBF over the record aggregated to ``level``.

    Returns ``(final ensemble, terminal mean)``. If ``cov_path`` (shape
    ``(n_steps + 1, d_x, d_x)``) is given it receives the ensemble
    covariance at every step boundary.
    """
    variant = Variant.parse(variant)
    if level > rec.grid.level:
        raise LevelAboveFine(f"level {level} above record level {rec.grid.level}")
    stream = as_stream(stream)
    e = init_ensemble(n, m, level, variant, stream.child(0))
    X = np.array(e.particles)
    grid = TimeGrid(level, rec.grid.horizon)
    dY = aggregate_increments(rec, level)
    for start, stop, dW, dV in noise_chunks(stream, grid.n_steps, n, m, grid.dt,
                                            variant.deterministic):
        bad = kernels.advance(X, m, dY[start:stop], dW, dV, grid.dt, variant.deterministic,
                              backend, None if cov_path is None else cov_path[start:stop])
        if bad >= 0:
            raise NumericalBlowUp(f"ensemble blew up at step {start + bad + 1} (level {level})")
    final = Ensemble(X, level, variant, grid.n_steps)
    if cov_path is not None:
        cov_path[grid.n_steps] = ensemble_stats(final).cov
    return final, X.mean(axis=0)


def check_deterministic_recursions(e: Ensemble, dY, m: Model, noise) -> tuple[float, float]:
    """Compare one deterministic step against its closed-form mean/covariance update.

    ``noise`` holds standard normals ``omega`` of shape (N, d_x). The step is
    taken by :func:`enkbf_step` with ``dW = sqrt(dt) * omega``; the closed form
    uses ``B = I + A dt - P S dt / 2`` and ``alpha = R1^{1/2} sqrt(dt)``:

        m' = B m + U (dY - C m dt / 2) + alpha mean(omega)
        P' = P + Ricc(P) dt + (A - PS/2) P (A^T - SP/2) dt^2
             + alpha (Omega - I) alpha + alpha X B^T + B X^T alpha

    with ``Omega``, ``X`` the (N-1)-normalized scatter of the centered noise
    with itself and with the centered particles. Returns max-abs gaps.
    """
    from .kbf import riccati_drift, second_order_term

    omega = np.asarray(noise, dtype=float)
    dY = np.asarray(dY, dtype=float).reshape(-1)
    e = Ensemble(np.asarray(e.particles, dtype=float), e.level, Variant.DETERMINISTIC,
                 e.step_index)
    dt, n = e.dt, e.n
    after = ensemble_stats(enkbf_step(e, dY, m, noise=(math.sqrt(dt) * omega, None)))

    st = ensemble_stats(e)
    mean, P = st.mean, st.cov
    I = np.eye(m.d_x)
    B = I + m.A * dt - P @ m.S * (dt / 2)
    U = P @ m.gain_factor
    alpha = m.R1_sqrt * math.sqrt(dt)
    w_bar = omega.mean(axis=0)
    mean_cf = B @ mean + U @ (dY - m.C @ mean * (dt / 2)) + alpha @ w_bar
    wt = omega - w_bar
    xt = e.particles - mean
    Omega = wt.T @ wt / (n - 1)
    Xc = wt.T @ xt / (n - 1)
    cross = alpha @ Xc @ B.T
    cov_cf = (P + riccati_drift(P, m) * dt + second_order_term(P, m, "deterministic") * dt ** 2
              + alpha @ (Omega - I) @ alpha.T + cross + cross.T)
    return (float(np.max(np.abs(after.mean - mean_cf))),
            float(np.max(np.abs(after.cov - cov_cf))))
