"""Linear-Gaussian filtering model and a random stable model generator.

The signal and observation processes are

    dX_t = A X_t dt + R1^{1/2} dW_t,      X_0 ~ N(m0, P0)
    dY_t = C X_t dt + R2^{1/2} dV_t,      Y_0 = 0
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, InvalidDimension
from .rng import derive_stream

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib
import tomli_w

SPD_RTOL = 1e-12
SQRT_RTOL = 1e-10
_MODEL_KEYS = ("d_x", "d_y", "A", "C", "R1", "R2", "m0", "P0", "seed")


def sym_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix via eigendecomposition."""
    M = np.asarray(M, dtype=float)
    w, V = np.linalg.eigh((M + M.T) / 2)
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return (root + root.T) / 2


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable linear-Gaussian model.

    Derived quantities (square roots, ``S = C^T R2^{-1} C``, the gain factor
    ``C^T R2^{-1}``) are computed once on first access. Construction never
    raises on inconsistent inputs; use :func:`validate_model` for that.
    """

    A: np.ndarray
    C: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    seed: int | None = None
    d_x: int = field(init=False)
    d_y: int = field(init=False)

    def __post_init__(self):
        for name in ("A", "C", "R1", "R2", "P0"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        object.__setattr__(self, "m0", _frozen(np.atleast_1d(self.m0).ravel()))
        object.__setattr__(self, "d_x", int(self.A.shape[0]))
        object.__setattr__(self, "d_y", int(self.C.shape[0]))

    @cached_property
    def R1_sqrt(self) -> np.ndarray:
        return _frozen(sym_sqrt(self.R1))

    @cached_property
    def R2_sqrt(self) -> np.ndarray:
        return _frozen(sym_sqrt(self.R2))

    @cached_property
    def P0_sqrt(self) -> np.ndarray:
        return _frozen(sym_sqrt(self.P0))

    @cached_property
    def R2_inv(self) -> np.ndarray:
        with np.errstate(all="ignore"):
            try:
                inv = np.linalg.inv(self.R2)
            except np.linalg.LinAlgError:
                inv = np.full_like(self.R2, np.nan)
        return _frozen((inv + inv.T) / 2)

    @cached_property
    def gain_factor(self) -> np.ndarray:
        """``C^T R2^{-1}``, shape (d_x, d_y)."""
        return _frozen(self.C.T @ self.R2_inv)

    @cached_property
    def S(self) -> np.ndarray:
        S = self.gain_factor @ self.C
        return _frozen((S + S.T) / 2)

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("A", "C", "R1", "R2", "m0", "P0")
        )

    __hash__ = None

    def replace(self, **changes) -> "Model":
        kw = {k: getattr(self, k) for k in ("A", "C", "R1", "R2", "m0", "P0", "seed")}
        kw.update(changes)
        return Model(**kw)

    @classmethod
    def scalar(cls, a, c, r1, r2, m0=6.0, p0=1.0) -> "Model":
        return cls(A=[[a]], C=[[c]], R1=[[r1]], R2=[[r2]], m0=[m0], P0=[[p0]])


@dataclass(frozen=True)
class ModelGenSpec:
    d_x: int
    d_y: int
    block_size: int = 10
    stability_margin: float = 0.5
    seed: int = 0


def _block_diag(blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def _random_block(rng: np.random.Generator, nx: int, ny: int, margin: float):
    G = rng.standard_normal((nx, nx))
    G_sym = (G + G.T) / 2
    rho = float(np.max(np.abs(np.linalg.eigvalsh(G_sym))))
    # subtract rho first: for nx = 1 this gives A <= -margin exactly in floating point
    A = (G - rho * np.eye(nx)) - margin * np.eye(nx)
    C = rng.standard_normal((ny, nx)) / math.sqrt(nx)
    W1 = rng.standard_normal((nx, nx))
    W2 = rng.standard_normal((ny, ny))
    R1 = np.eye(nx) + 0.1 * (W1 @ W1.T) / nx
    R2 = np.eye(ny) + 0.1 * (W2 @ W2.T) / ny
    return A, C, (R1 + R1.T) / 2, (R2 + R2.T) / 2


def make_ou_model(spec: ModelGenSpec) -> Model:
    """Generate a random stable Ornstein-Uhlenbeck filtering model.

    ``A = G - rho(sym(G)) I - margin I`` has a negative definite symmetric
    part, so every eigenvalue of ``A`` has real part at most ``-margin``.
    For ``d_x > block_size`` all matrices are block diagonal with
    ``d_x / block_size`` blocks.

    Raises:
        InvalidDimension: dimensions < 1 or block constraints violated.
    """
    d_x, d_y, bs = int(spec.d_x), int(spec.d_y), int(spec.block_size)
    if d_x < 1 or d_y < 1 or bs < 1:
        raise InvalidDimension(f"dimensions must be positive: d_x={d_x}, d_y={d_y}, block={bs}")
    if spec.stability_margin <= 0:
        raise InvalidDimension("stability_margin must be positive")
    if d_x > bs:
        if d_x % bs or d_y % bs:
            raise InvalidDimension(f"block_size {bs} must divide d_x={d_x} and d_y={d_y}")
        n_blocks = d_x // bs
        if d_y % n_blocks:
            raise InvalidDimension(f"d_y={d_y} cannot be split into {n_blocks} blocks")
    else:
        n_blocks = 1
    nx, ny = d_x // n_blocks, d_y // n_blocks
    rng = derive_stream(spec.seed, [0]).generator()
    parts = [_random_block(rng, nx, ny, spec.stability_margin) for _ in range(n_blocks)]
    A, C, R1, R2 = (_block_diag([p[i] for p in parts]) for i in range(4))
    return Model(A=A, C=C, R1=R1, R2=R2, m0=np.full(d_x, 6.0), P0=np.eye(d_x), seed=spec.seed)


def _spd_problem(M: np.ndarray) -> str | None:
    if not np.all(np.isfinite(M)):
        return "non-finite entries"
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        return "not symmetric"
    w = np.linalg.eigvalsh((M + M.T) / 2)
    if w[-1] <= 0 or w[0] <= SPD_RTOL * w[-1]:
        return "not positive definite"
    return None


def validate_model(m: Model) -> list[str]:
    """Return a list of violated model invariants (empty when valid)."""
    report: list[str] = []
    d_x, d_y = m.d_x, m.d_y
    if d_x < 1 or d_y < 1:
        return [f"dimension mismatch: non-positive dimensions d_x={d_x}, d_y={d_y}"]
    expected = {
        "A": (d_x, d_x), "C": (d_y, d_x), "R1": (d_x, d_x),
        "R2": (d_y, d_y), "P0": (d_x, d_x), "m0": (d_x,),
    }
    for name, shape in expected.items():
        actual = getattr(m, name).shape
        if actual != shape:
            report.append(f"dimension mismatch: {name} has shape {actual}, expected {shape}")
    if report:
        return report
    for name in ("A", "C", "m0"):
        if not np.all(np.isfinite(getattr(m, name))):
            report.append(f"{name} has non-finite entries")
    spd_ok = {}
    for name in ("R1", "R2", "P0"):
        problem = _spd_problem(getattr(m, name))
        spd_ok[name] = problem is None
        if problem:
            report.append(f"{name} not SPD ({problem})")
    for name in ("R1", "R2"):
        if not spd_ok[name]:
            continue
        M, root = getattr(m, name), getattr(m, f"{name}_sqrt")
        err = np.linalg.norm(root @ root - M) / np.linalg.norm(M)
        if err >= SQRT_RTOL:
            report.append(f"{name}_sqrt inaccurate (relative error {err:.3g})")
    if spd_ok["R2"]:
        S = m.S
        if not np.allclose(S, m.C.T @ np.linalg.solve(m.R2, m.C), rtol=1e-9, atol=1e-12):
            report.append("S does not equal C^T R2^-1 C")
        if np.linalg.eigvalsh(S)[0] < -1e-10 * max(1.0, np.abs(S).max()):
            report.append("S not positive semidefinite")
    return report


# --- config round trip --------------------------------------------------


def model_to_dict(m: Model) -> dict:
    d = {
        "d_x": m.d_x,
        "d_y": m.d_y,
        "A": m.A.ravel().tolist(),
        "C": m.C.ravel().tolist(),
        "R1": m.R1.ravel().tolist(),
        "R2": m.R2.ravel().tolist(),
        "m0": m.m0.tolist(),
        "P0": m.P0.ravel().tolist(),
    }
    if m.seed is not None:
        d["seed"] = int(m.seed)
    return d


def model_from_dict(d: dict) -> Model:
    unknown = set(d) - set(_MODEL_KEYS)
    if unknown:
        raise ConfigInvalid(f"unknown model keys: {sorted(unknown)}")
    missing = [k for k in _MODEL_KEYS[:-1] if k not in d]
    if missing:
        raise ConfigInvalid(f"missing model keys: {missing}")
    d_x, d_y = int(d["d_x"]), int(d["d_y"])

    def mat(key, rows, cols):
        flat = np.asarray(d[key], dtype=float)
        if flat.size != rows * cols:
            raise ConfigInvalid(f"{key} has {flat.size} entries, expected {rows * cols}")
        return flat.reshape(rows, cols)

    return Model(
        A=mat("A", d_x, d_x),
        C=mat("C", d_y, d_x),
        R1=mat("R1", d_x, d_x),
        R2=mat("R2", d_y, d_y),
        m0=mat("m0", 1, d_x).ravel(),
        P0=mat("P0", d_x, d_x),
        seed=d.get("seed"),
    )


def save_model(m: Model, path) -> Path:
    """Write the model as TOML; floats use shortest round-trip decimals."""
    path = Path(path)
    path.write_text(tomli_w.dumps(model_to_dict(m)))
    return path


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    if "model" in data and isinstance(data["model"], dict):
        data = data["model"]
    return model_from_dict(data)
