"""Backend selection for the particle kernels.

``ENKBF_LAB_BACKEND`` chooses ``cython``, ``python`` or ``auto`` (default).
``auto`` uses the compiled extension when it imported and the state is
small enough for its hand-written loops to beat BLAS.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

HAVE_CYTHON = _ckernels is not None
CYTHON_MAX_DIM = 32
_BACKENDS = {"python": _kernels_py}
if HAVE_CYTHON:
    _BACKENDS["cython"] = _ckernels


def backend_name(d_x: int) -> str:
    choice = os.environ.get("ENKBF_LAB_BACKEND", "auto").strip().lower() or "auto"
    if choice == "auto":
        return "cython" if HAVE_CYTHON and d_x <= CYTHON_MAX_DIM else "python"
    if choice not in ("cython", "python"):
        raise ValueError(f"unknown ENKBF_LAB_BACKEND {choice!r}")
    if choice == "cython" and not HAVE_CYTHON:
        raise ImportError("ENKBF_LAB_BACKEND=cython but the compiled extension is missing")
    return choice


def get_backend(d_x: int, name: str | None = None):
    return _BACKENDS[name or backend_name(d_x)]


def _c(a):
    return np.ascontiguousarray(a, dtype=float)


def model_arrays(m):
    """Arrays in the order the kernels expect: A, R1_sqrt, C, R2_sqrt, C^T R2^-1."""
    return (_c(m.A), _c(m.R1_sqrt), _c(m.C), _c(m.R2_sqrt), _c(m.gain_factor))


def advance(X, m, dY, W, V, dt, deterministic, backend=None, cov_out=None) -> int:
    kern = get_backend(X.shape[1], backend)
    return kern.advance(X, *model_arrays(m), _c(dY), _c(W),
                        None if V is None else _c(V), float(dt), bool(deterministic),
                        cov_out)


def advance_coupled(Xf, Xc, m, dY, W, V, dt, deterministic, backend=None) -> int:
    kern = get_backend(Xf.shape[1], backend)
    return kern.advance_coupled(Xf, Xc, *model_arrays(m), _c(dY), _c(W),
                                None if V is None else _c(V), float(dt), bool(deterministic))


def kbf_run(means, covs, m, dY, dt, scale, backend=None) -> int:
    kern = get_backend(m.d_x, backend)
    return kern.kbf_run(means, covs, _c(m.A), _c(m.R1), _c(m.C), _c(m.S), _c(m.gain_factor),
                        _c(dY), float(dt), float(scale))


def simulate(truth, dY, m, sig_noise, obs_noise, dt, backend=None) -> int:
    kern = get_backend(m.d_x, backend)
    return kern.simulate(truth, dY, _c(m.A), _c(m.C), _c(sig_noise), _c(obs_noise), float(dt))
