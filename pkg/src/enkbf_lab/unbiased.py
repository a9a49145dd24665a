"""Doubly randomized unbiased estimators (single-term and coupled-sum).

A draw picks a discretization index ``l`` and a particle index ``p`` from
two truncated pmfs. Particle counts are ``N_p = N0 * 2**p``; the estimator
at ``(l, p)`` is assembled from independent nested batches
``q = 0..p`` of ``N_q - N_{q-1}`` particles each (``N_{-1} = 0``):

    D_s = sum_{q<=s} (N_q - N_{q-1}) / N_s * b_q,      Xi_{l,s} = D_s - D_{s-1}

where ``b_q`` is the batch-``q`` terminal mean (``l = 0``, at level
``l_start``) or coupled increment (``l >= 1``, fine level ``l_start + l``).

Streams per replicate ``r`` under master seed ``s``: ``(s, [r, 0])`` draws
``l`` then ``p``; batch ``q`` runs on ``(s, [r, 1, q])``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enkbf import Variant, run_enkbf
from .errors import (ConfigInvalid, EstimatorFailure, InvalidAlpha, LevelAboveFine,
                     NumericalBlowUp, ValidationError)
from .mlmc import run_coupled
from .model import Model
from .parallel import parallel_map, worker_count  # noqa: F401  (re-exported)
from .paths import ObservationRecord
from .rng import RngStream, as_stream, derive_stream

KINDS = ("logweighted", "geometric")
ROLES = ("L", "P")
ESTIMATORS = {"st": "single", "single": "single", "single_term": "single",
              "cs": "coupled", "coupled": "coupled", "coupled_sum": "coupled"}
DEFAULT_ALPHA = 0.9
MAX_FAILURE_RATE = 0.01


@dataclass(frozen=True, eq=False)
class Pmf:
    kind: str
    role: str
    weights: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("pmf weights must be a non-empty nonnegative vector")
        w = w / w.sum()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def support_max(self) -> int:
        return self.weights.size - 1

    @property
    def tail_sums(self) -> np.ndarray:
        """``tail_sums[s] = sum_{q >= s} weights[q]``."""
        t = np.cumsum(self.weights[::-1])[::-1]
        return np.minimum(t, 1.0)

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.weights)

    def __getitem__(self, i):
        return self.weights[i]


def make_pmf(kind: str, support_max: int, role: str = "L", N0: int = 1, l_start: int = 0,
             alpha: float = DEFAULT_ALPHA) -> Pmf:
    """Truncated level pmf over ``{0..support_max}``.

    logweighted: ``L`` role ``Delta_l (l+1) log2(l+2)**2``, ``P`` role
    ``N_p**-1 (p+1) log2(p+2)**2``. geometric: ``Delta_l**alpha`` or
    ``N_p**-alpha`` with ``0 < alpha < 1``. ``Delta_l = 2**-(l_start + l)`` and
    ``N_p = N0 2**p``; the offsets cancel on normalization.
    """
    kind = str(kind).lower().replace("-", "").replace("_", "")
    if kind not in KINDS:
        raise ValidationError(f"unknown pmf kind {kind!r}")
    role = str(role).upper()
    if role not in ROLES:
        raise ValidationError(f"pmf role must be 'L' or 'P', got {role!r}")
    if support_max < 0:
        raise ValidationError("support_max must be >= 0")
    idx = np.arange(support_max + 1, dtype=float)
    # both roles decay like 2**-idx (Delta_l, or 1/N_p up to the constant N0)
    log_scale = -(idx + (l_start if role == "L" else math.log2(N0)))
    if kind == "geometric":
        if not 0 < alpha < 1:
            raise InvalidAlpha(f"geometric pmf needs 0 < alpha < 1, got {alpha}")
        logw = alpha * log_scale
        a = float(alpha)
    else:
        logw = log_scale + np.log2(idx + 1) + 2 * np.log2(np.log2(idx + 2))
        a = None
    w = np.exp2(logw - logw.max())
    return Pmf(kind, role, w, a)


def from_weights(weights, role: str = "L") -> Pmf:
    """Pmf from explicit weights (zeros allowed, e.g. point masses in tests)."""
    return Pmf("explicit", str(role).upper(), np.asarray(weights, dtype=float))


def point_mass(index: int, role: str = "L") -> Pmf:
    w = np.zeros(index + 1)
    w[index] = 1.0
    return from_weights(w, role)


def sample_pmf(pmf: Pmf, stream) -> int:
    """Inverse-CDF draw; ``stream`` is an :class:`RngStream`, seed or Generator."""
    gen = stream if isinstance(stream, np.random.Generator) else as_stream(stream).generator()
    u = gen.random()
    i = int(np.searchsorted(pmf.cdf, u, side="right"))
    return min(i, pmf.support_max)


@dataclass
class UnbiasedConfig:
    variant: Variant
    estimator: str
    pmf_L: Pmf
    pmf_P: Pmf
    N0: int = 25
    l_start: int = 3
    T: int = 10
    M: int = 100

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        key = str(self.estimator).lower()
        if key not in ESTIMATORS:
            raise ConfigInvalid(f"unknown estimator {self.estimator!r} (use st or cs)")
        self.estimator = ESTIMATORS[key]
        if self.N0 < 2:
            raise ConfigInvalid("N0 must be >= 2")
        if self.M < 1:
            raise ConfigInvalid("M must be >= 1")
        if self.T < 1 or self.l_start < 0:
            raise ConfigInvalid("need T >= 1 and l_start >= 0")

    @classmethod
    def default(cls, variant="deterministic", estimator="st", kind="geometric",
                l_max=4, p_max=5, N0=None, l_start=3, T=10, M=100, alpha=DEFAULT_ALPHA):
        variant = Variant.parse(variant)
        if N0 is None:
            N0 = 25 if variant.deterministic else 50
        return cls(variant, estimator,
                   make_pmf(kind, l_max, "L", N0, l_start, alpha),
                   make_pmf(kind, p_max, "P", N0, l_start, alpha),
                   N0, l_start, T, M)

    @property
    def finest_level(self) -> int:
        return self.l_start + self.pmf_L.support_max

    def particles(self, p: int) -> int:
        return self.N0 << p

    def steps(self, l: int) -> int:
        """Particle-steps per particle at index ``l`` (coarse half included)."""
        lv = self.l_start + l
        return self.T * ((1 << lv) + ((1 << (lv - 1)) if l >= 1 else 0))


@dataclass
class XiResult:
    xi: np.ndarray
    partials: np.ndarray  # (p + 1, d_x): D_0 .. D_p
    batches: np.ndarray  # (p + 1, d_x): b_0 .. b_p
    cost: float

    def xi_at(self, s: int) -> np.ndarray:
        return self.partials[s] - (self.partials[s - 1] if s > 0 else 0.0)


def batch_sizes(N0: int, p: int) -> list[int]:
    return [N0] + [N0 << (q - 1) for q in range(1, p + 1)]


def xi_increment(l: int, p: int, cfg: UnbiasedConfig, rec: ObservationRecord, m: Model,
                 stream, backend: str | None = None) -> XiResult:
    """Nested-batch increment ``Xi_{l,p}``; batch ``q`` runs on ``stream.child(q)``."""
    if l < 0 or p < 0:
        raise ValidationError("indices must be nonnegative")
    level = cfg.l_start + l
    if level > rec.grid.level:
        raise LevelAboveFine(f"level {level} above record level {rec.grid.level}")
    stream = as_stream(stream)
    sizes = batch_sizes(cfg.N0, p)
    b = np.empty((p + 1, m.d_x))
    for q, nq in enumerate(sizes):
        s = stream.child(q)
        if l == 0:
            b[q] = run_enkbf(cfg.variant, nq, level, rec, m, s, backend)[1]
        else:
            b[q] = run_coupled(cfg.variant, nq, level, rec, m, s, backend).increment
    D = np.empty_like(b)
    acc = np.zeros(m.d_x)
    total = 0
    for s_, nq in enumerate(sizes):
        acc = acc + nq * b[s_]
        total += nq
        D[s_] = acc / total
    xi = D[p] - (D[p - 1] if p > 0 else 0.0)
    cost = float(sum(sizes) * cfg.steps(l))
    return XiResult(xi, D, b, cost)


@dataclass
class UnbiasedSample:
    value: np.ndarray
    l_index: int
    p_index: int
    cost: float
    master_seed: int
    replicate: int
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _replicate_stream(seed: int, replicate: int, root: RngStream | None = None) -> RngStream:
    return (derive_stream(seed) if root is None else root).child(replicate)


def draw_indices(cfg: UnbiasedConfig, stream: RngStream) -> tuple[int, int]:
    gen = stream.child(0).generator()
    return sample_pmf(cfg.pmf_L, gen), sample_pmf(cfg.pmf_P, gen)


def _weighted(cfg: UnbiasedConfig, res: XiResult, l: int, p: int, estimator: str) -> np.ndarray:
    pl = cfg.pmf_L[l]
    if estimator == "single":
        return res.xi / (pl * cfg.pmf_P[p])
    tails = cfg.pmf_P.tail_sums
    value = np.zeros_like(res.xi)
    for s in range(p + 1):
        value = value + res.xi_at(s) / (pl * tails[s])
    return value


def sample_both(cfg: UnbiasedConfig, rec, m, replicate: int, seed: int = 0,
                backend: str | None = None, root: RngStream | None = None) -> dict:
    """Single-term and coupled-sum samples built from one set of batches.

    Returns ``{"single": UnbiasedSample, "coupled": UnbiasedSample}``; each
    equals what the corresponding ``*_sample`` function returns for the same
    replicate, so the two estimators can be compared at half the cost.
    """
    rs = _replicate_stream(seed, replicate, root)
    l, p = draw_indices(cfg, rs)
    try:
        res = xi_increment(l, p, cfg, rec, m, rs.child(1), backend)
    except NumericalBlowUp:
        cost = float(sum(batch_sizes(cfg.N0, p)) * cfg.steps(l))
        bad = UnbiasedSample(np.full(m.d_x, np.nan), l, p, cost, seed, replicate, "blowup")
        return {"single": bad, "coupled": bad}
    return {e: UnbiasedSample(_weighted(cfg, res, l, p, e), l, p, res.cost, seed, replicate)
            for e in ("single", "coupled")}


def _sample(cfg, rec, m, replicate, seed, estimator, backend, root=None):
    return sample_both(cfg, rec, m, replicate, seed, backend, root)[estimator]


def single_term_sample(cfg: UnbiasedConfig, rec, m, replicate_index: int, seed: int = 0,
                       backend: str | None = None) -> UnbiasedSample:
    """``Xi_{l,p} / (P_L(l) P_P(p))`` at a drawn ``(l, p)``."""
    return _sample(cfg, rec, m, replicate_index, seed, "single", backend)


def coupled_sum_sample(cfg: UnbiasedConfig, rec, m, replicate_index: int, seed: int = 0,
                       backend: str | None = None) -> UnbiasedSample:
    """``sum_{s<=p} Xi_{l,s} / (P_L(l) tail_P(s))`` from one set of nested batches."""
    return _sample(cfg, rec, m, replicate_index, seed, "coupled", backend)


@dataclass
class UnbiasedResult:
    estimate: np.ndarray
    total_cost: float
    samples: list = field(default_factory=list)
    failures: int = 0
    master_seed: int = 0

    @property
    def M(self) -> int:
        return len(self.samples)

    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.samples if s.ok])

    @property
    def sample_variance(self) -> np.ndarray:
        v = self.values()
        return v.var(axis=0, ddof=1) if len(v) > 1 else np.full(self.estimate.shape, np.nan)

    @property
    def estimate_variance(self) -> np.ndarray:
        return self.sample_variance / max(1, self.M - self.failures)

    def summary(self) -> dict:
        return {
            "estimate": [float(v) for v in self.estimate],
            "total_cost": self.total_cost,
            "M": self.M,
            "failure_count": self.failures,
            "sample_variance": [float(v) for v in self.sample_variance],
            "estimate_variance": [float(v) for v in self.estimate_variance],
            "master_seed": self.master_seed,
        }


def unbiased_estimate(cfg: UnbiasedConfig, rec: ObservationRecord, m: Model, master_seed: int,
                      threads: int | None = None, backend: str | None = None,
                      replicates=None) -> UnbiasedResult:
    """Average of ``cfg.M`` independent samples (replicates ``0..M-1``).

    Blown-up replicates are kept in the record with status ``blowup`` and
    left out of the average; more than 1% of them raises EstimatorFailure.
    ``replicates`` may reorder or relabel the replicate indices.
    """
    if cfg.finest_level > rec.grid.level:
        raise LevelAboveFine(f"level {cfg.finest_level} above record level {rec.grid.level}")
    if rec.grid.horizon != cfg.T:
        raise ConfigInvalid(f"record horizon {rec.grid.horizon} differs from T={cfg.T}")
    reps = list(range(cfg.M)) if replicates is None else [int(r) for r in replicates]
    samples = parallel_map(
        lambda r: _sample(cfg, rec, m, r, master_seed, cfg.estimator, backend), reps, threads)
    samples.sort(key=lambda s: s.replicate)
    ok = [s for s in samples if s.ok]
    failures = len(samples) - len(ok)
    if failures > MAX_FAILURE_RATE * len(samples):
        raise EstimatorFailure(f"{failures} of {len(samples)} replicates blew up")
    est = np.mean([s.value for s in ok], axis=0) if ok else np.full(m.d_x, np.nan)
    total = float(sum(s.cost for s in samples))
    return UnbiasedResult(est, total, samples, failures, int(master_seed))


def write_samples_csv(result: UnbiasedResult, path) -> Path:
    path = Path(path)
    d_x = result.estimate.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "l", "p", "cost", *[f"value_{i}" for i in range(d_x)], "status"])
        for s in result.samples:
            w.writerow([s.replicate, s.l_index, s.p_index, repr(s.cost),
                        *[repr(float(v)) for v in s.value], s.status])
    return path


def write_summary_json(result: UnbiasedResult, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.summary(), indent=2) + "\n")
    return path


def weighted_second_moment_sum(second_moments: dict, pmf_L: Pmf, pmf_P: Pmf) -> float:
    """``sum_{l,p} E|Xi_{l,p}|^2 / (P_L(l) P_P(p))`` over the given cells."""
    return float(sum(v / (pmf_L[l] * pmf_P[p]) for (l, p), v in second_moments.items()))
