"""Low-variance estimates of the expected terminal EnKBF mean.

Measuring ``E[eta^{N,l}] - eta^l`` directly needs a very large number of
runs: the bias is O(1/N) while one run fluctuates by O(N^-1/2). Two exact
devices reduce the noise to O(1/N) without changing the expectation.

1. Conditioning. With Gaussian initial particles and Gaussian noise the
   sample means of the noise are independent of the centred noise, and the
   ensemble covariance path depends only on the centred part. Conditional
   on the covariance path the expected ensemble mean therefore follows the
   noise-free recursion ``m' = m + A m dt + P^N G (dY - C m dt)`` from ``m0``.

2. Control variate. For both variants
   ``E[P^N_{k+1} | past] = f(P^N_k)`` with ``f`` the matching discrete
   Riccati map, so ``xi_k = P^N_{k+1} - f(P^N_k)`` are martingale
   differences (as is ``P^N_0 - P0``). Pushing them through the tangent
   linear map of the Kalman-Bucy mean/covariance recursion at the exact
   solution gives a linear statistic with mean exactly zero that removes the
   leading fluctuation of the conditioned mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .enkbf import Variant, run_enkbf
from .kbf import KbfTrajectory, run_kbf
from .model import Model
from .parallel import parallel_map
from .paths import ObservationRecord, TimeGrid, aggregate_increments
from .rng import as_stream


def _riccati_map(P, m: Model, dt: float, scale: float):
    """Batched discrete Riccati map ``P + Ricc(P) dt + B P B^T dt^2``."""
    A, S = m.A, m.S
    AP = A @ P
    PT = np.swapaxes(P, -1, -2)
    ricc = AP + np.swapaxes(AP, -1, -2) - P @ S @ PT + m.R1
    B = A - scale * (P @ S)
    return P + ricc * dt + B @ P @ np.swapaxes(B, -1, -2) * (dt * dt)


def _riccati_tangent(P, D, m: Model, dt: float, scale: float):
    """Derivative of :func:`_riccati_map` at ``P`` in direction ``D`` (batched in ``D``)."""
    A, S = m.A, m.S
    B = A - scale * (P @ S)
    Bt = B.T
    first = A @ D + D @ A.T - D @ S @ P - P @ S @ D
    second = -scale * (D @ S @ P @ Bt) + B @ D @ Bt - scale * (B @ P @ S @ D)
    return D + first * dt + second * (dt * dt)


def conditioned_means(covs: np.ndarray, dY: np.ndarray, m: Model, dt: float) -> np.ndarray:
    """Noise-free mean recursion driven by ensemble covariance paths.

    ``covs`` has shape ``(R, n_steps + 1, d, d)``; returns ``(R, d)``.
    """
    R = covs.shape[0]
    mean = np.broadcast_to(m.m0, (R, m.d_x)).copy()
    G, A, C = m.gain_factor, m.A, m.C
    for k in range(dY.shape[0]):
        innov = dY[k] - (mean @ C.T) * dt
        mean = mean + (mean @ A.T) * dt + np.einsum("rij,rj->ri", covs[:, k] @ G, innov)
    return mean


def tangent_control(covs: np.ndarray, kbf: KbfTrajectory, dY: np.ndarray, m: Model,
                    dt: float, form: str) -> np.ndarray:
    """Zero-mean control variate for :func:`conditioned_means` (shape ``(R, d)``)."""
    scale = 1.0 if form == "vanilla" else 0.5
    G, A, C, S = m.gain_factor, m.A, m.C, m.S
    R = covs.shape[0]
    dP = covs[:, 0] - m.P0
    dm = np.zeros((R, m.d_x))
    for k in range(dY.shape[0]):
        Pk, mk = kbf.covs[k], kbf.means[k]
        v = G @ (dY[k] - (C @ mk) * dt)
        dm = dm + (dm @ (A - Pk @ S).T) * dt + dP @ v
        xi = covs[:, k + 1] - _riccati_map(covs[:, k], m, dt, scale)
        dP = _riccati_tangent(Pk, dP, m, dt, scale) + xi
    return dm


@dataclass
class MeanSamples:
    raw: np.ndarray  # (R, d) terminal ensemble means
    reduced: np.ndarray  # (R, d) conditioned mean minus control variate
    kbf_mean: np.ndarray  # level-matched Kalman-Bucy terminal mean


def expected_mean_samples(variant, n: int, level: int, rec: ObservationRecord, m: Model,
                          stream, replicates: int, backend: str | None = None,
                          threads: int | None = None) -> MeanSamples:
    """``replicates`` independent runs on ``stream.child(r)``.

    Both ``raw`` and ``reduced`` rows have expectation ``E[eta^{N,level}_T]``.
    """
    variant = Variant.parse(variant)
    stream = as_stream(stream)
    grid = TimeGrid(level, rec.grid.horizon)
    dY = aggregate_increments(rec, level)
    covs = np.empty((replicates, grid.n_steps + 1, m.d_x, m.d_x))
    raw = np.empty((replicates, m.d_x))

    def one(r):
        raw[r] = run_enkbf(variant, n, level, rec, m, stream.child(r), backend, covs[r])[1]

    parallel_map(one, range(replicates), threads)
    kbf = run_kbf(rec, level, m, variant.form)
    cond = conditioned_means(covs, dY, m, grid.dt)
    ctrl = tangent_control(covs, kbf, dY, m, grid.dt, variant.form)
    return MeanSamples(raw, cond - ctrl, kbf.final.mean)
