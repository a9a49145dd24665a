# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled particle kernels. Same contract as ``_kernels_py``.

Loops are written out explicitly; they beat BLAS dispatch for the small
state dimensions (d_x <= 32) where most of the experiments live.
"""
import numpy as np
from libc.math cimport isfinite

cdef double BLOWUP_SQ = 1e24


cdef void _stats_gain(const double[:, ::1] X, const double[:, ::1] G, double[::1] mean,
                      double[:, ::1] P, double[:, ::1] K) noexcept nogil:
    cdef Py_ssize_t N = X.shape[0], d = X.shape[1], dy = G.shape[1]
    cdef Py_ssize_t i, a, b, j
    cdef double s
    for a in range(d):
        s = 0.0
        for i in range(N):
            s += X[i, a]
        mean[a] = s / N
    for a in range(d):
        for b in range(a, d):
            s = 0.0
            for i in range(N):
                s += (X[i, a] - mean[a]) * (X[i, b] - mean[b])
            P[a, b] = s / (N - 1)
            P[b, a] = P[a, b]
    for a in range(d):
        for j in range(dy):
            s = 0.0
            for b in range(d):
                s += P[a, b] * G[b, j]
            K[a, j] = s


cdef int _step(double[:, ::1] X, double[:, ::1] out,
               const double[:, ::1] A, const double[:, ::1] R1s,
               const double[:, ::1] C, const double[:, ::1] R2s, const double[:, ::1] G,
               const double[::1] dY, const double[:, ::1] W, const double[:, ::1] V,
               bint has_v, double dt, bint det,
               double[::1] mean, double[:, ::1] P, double[:, ::1] K,
               double[::1] innov) noexcept nogil:
    cdef Py_ssize_t N = X.shape[0], d = X.shape[1], dy = C.shape[0]
    cdef Py_ssize_t i, a, b, j
    cdef double s, sq
    cdef int blown = 0
    _stats_gain(X, G, mean, P, K)
    for i in range(N):
        for j in range(dy):
            s = 0.0
            if det:
                for b in range(d):
                    s += C[j, b] * (X[i, b] + mean[b])
                innov[j] = dY[j] - (dt / 2) * s
            else:
                for b in range(d):
                    s += C[j, b] * X[i, b]
                innov[j] = dY[j] - dt * s
                if has_v:
                    s = 0.0
                    for b in range(dy):
                        s += R2s[j, b] * V[i, b]
                    innov[j] -= s
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += A[a, b] * X[i, b]
            out[i, a] = X[i, a] + dt * s
            s = 0.0
            for b in range(d):
                s += R1s[a, b] * W[i, b]
            out[i, a] += s
            s = 0.0
            for j in range(dy):
                s += K[a, j] * innov[j]
            out[i, a] += s
    for i in range(N):
        sq = 0.0
        for a in range(d):
            X[i, a] = out[i, a]
            sq += out[i, a] * out[i, a]
        if not isfinite(sq) or sq > BLOWUP_SQ:
            blown = 1
    return blown


def advance(double[:, ::1] X, const double[:, ::1] A, const double[:, ::1] R1s,
            const double[:, ::1] C, const double[:, ::1] R2s, const double[:, ::1] G,
            const double[:, ::1] dY, const double[:, :, ::1] W, V,
            double dt, bint deterministic, cov_out=None):
    cdef Py_ssize_t N = X.shape[0], d = X.shape[1], dy = C.shape[0], k
    cdef const double[:, :, ::1] Vv = W if V is None else V
    cdef bint has_v = V is not None and not deterministic
    cdef double[:, ::1] out = np.empty((N, d))
    cdef double[::1] mean = np.empty(d)
    cdef double[:, ::1] P = np.empty((d, d))
    cdef double[:, ::1] K = np.empty((d, dy))
    cdef double[::1] innov = np.empty(dy)
    cdef int blown = 0
    cdef bint keep = cov_out is not None
    cdef double[:, :, ::1] Pk = cov_out if keep else np.empty((1, d, d))
    k = 0
    with nogil:
        for k in range(dY.shape[0]):
            blown = _step(X, out, A, R1s, C, R2s, G, dY[k], W[k], Vv[k], has_v, dt,
                          deterministic, mean, P, K, innov)
            if keep:
                Pk[k, :, :] = P
            if blown:
                break
    return k if blown else -1


def advance_coupled(double[:, ::1] Xf, double[:, ::1] Xc, const double[:, ::1] A,
                    const double[:, ::1] R1s, const double[:, ::1] C,
                    const double[:, ::1] R2s, const double[:, ::1] G,
                    const double[:, ::1] dY, const double[:, :, ::1] W, V,
                    double dt, bint deterministic):
    cdef Py_ssize_t N = Xf.shape[0], d = Xf.shape[1], dy = C.shape[0]
    cdef Py_ssize_t j, a, b, i, c
    cdef const double[:, :, ::1] Vv = W if V is None else V
    cdef bint has_v = V is not None and not deterministic
    cdef double[:, ::1] out = np.empty((N, d))
    cdef double[::1] mean = np.empty(d)
    cdef double[:, ::1] P = np.empty((d, d))
    cdef double[:, ::1] K = np.empty((d, dy))
    cdef double[::1] innov = np.empty(dy)
    cdef double[::1] dYc = np.empty(dy)
    cdef double[:, ::1] Wc = np.empty((N, d))
    cdef double[:, ::1] Vc = np.zeros((N, dy))
    cdef int blown = 0
    j = 0
    with nogil:
        for j in range(dY.shape[0] // 2):
            a = 2 * j
            b = a + 1
            for c in range(dy):
                dYc[c] = dY[a, c] + dY[b, c]
            for i in range(N):
                for c in range(d):
                    Wc[i, c] = W[a, i, c] + W[b, i, c]
                if has_v:
                    for c in range(dy):
                        Vc[i, c] = Vv[a, i, c] + Vv[b, i, c]
            blown = _step(Xc, out, A, R1s, C, R2s, G, dYc, Wc, Vc, has_v, 2 * dt,
                          deterministic, mean, P, K, innov)
            blown |= _step(Xf, out, A, R1s, C, R2s, G, dY[a], W[a], Vv[a], has_v, dt,
                           deterministic, mean, P, K, innov)
            blown |= _step(Xf, out, A, R1s, C, R2s, G, dY[b], W[b], Vv[b], has_v, dt,
                           deterministic, mean, P, K, innov)
            if blown:
                break
    return j if blown else -1


def kbf_run(double[:, ::1] means, double[:, :, ::1] covs, const double[:, ::1] A,
            const double[:, ::1] R1, const double[:, ::1] C, const double[:, ::1] S,
            const double[:, ::1] G, const double[:, ::1] dY, double dt, double scale):
    cdef Py_ssize_t d = A.shape[0], dy = C.shape[0], n = dY.shape[0]
    cdef Py_ssize_t k, a, b, c, j
    cdef double s, sq
    cdef double[:, ::1] U = np.empty((d, dy))
    cdef double[::1] innov = np.empty(dy)
    cdef double[:, ::1] AP = np.empty((d, d))
    cdef double[:, ::1] PS = np.empty((d, d))
    cdef double[:, ::1] Bm = np.empty((d, d))
    cdef double[:, ::1] BP = np.empty((d, d))
    cdef double[:, ::1] Pn = np.empty((d, d))
    cdef int bad = -1
    with nogil:
        for k in range(n):
            # gain and mean
            for a in range(d):
                for j in range(dy):
                    s = 0.0
                    for b in range(d):
                        s += covs[k, a, b] * G[b, j]
                    U[a, j] = s
            for j in range(dy):
                s = 0.0
                for b in range(d):
                    s += C[j, b] * means[k, b]
                innov[j] = dY[k, j] - s * dt
            sq = 0.0
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += A[a, b] * means[k, b]
                means[k + 1, a] = means[k, a] + s * dt
                s = 0.0
                for j in range(dy):
                    s += U[a, j] * innov[j]
                means[k + 1, a] += s
                sq += means[k + 1, a] * means[k + 1, a]
            # covariance
            for a in range(d):
                for b in range(d):
                    s = 0.0
                    for c in range(d):
                        s += A[a, c] * covs[k, c, b]
                    AP[a, b] = s
                    s = 0.0
                    for c in range(d):
                        s += covs[k, a, c] * S[c, b]
                    PS[a, b] = s
            for a in range(d):
                for b in range(d):
                    Bm[a, b] = A[a, b] - scale * PS[a, b]
            for a in range(d):
                for b in range(d):
                    s = 0.0
                    for c in range(d):
                        s += Bm[a, c] * covs[k, c, b]
                    BP[a, b] = s
            for a in range(d):
                for b in range(d):
                    # Ricc = AP + (AP)^T - P S P + R1
                    s = 0.0
                    for c in range(d):
                        s += PS[a, c] * covs[k, c, b]
                    Pn[a, b] = AP[a, b] + AP[b, a] - s + R1[a, b]
            for a in range(d):
                for b in range(d):
                    s = 0.0
                    for c in range(d):
                        s += BP[a, c] * Bm[b, c]
                    Pn[a, b] = covs[k, a, b] + Pn[a, b] * dt + s * (dt * dt)
            for a in range(d):
                for b in range(d):
                    covs[k + 1, a, b] = (Pn[a, b] + Pn[b, a]) / 2
            if not isfinite(sq) or sq > BLOWUP_SQ:
                bad = k
                break
    return bad


def simulate(double[:, ::1] truth, double[:, ::1] dY, const double[:, ::1] A,
             const double[:, ::1] C, const double[:, ::1] sig_noise,
             const double[:, ::1] obs_noise, double dt):
    cdef Py_ssize_t d = A.shape[0], dy = C.shape[0], n = dY.shape[0]
    cdef Py_ssize_t k, a, b
    cdef double s, sq
    cdef int bad = -1
    with nogil:
        for k in range(n):
            for a in range(dy):
                s = 0.0
                for b in range(d):
                    s += C[a, b] * truth[k, b]
                dY[k, a] = s * dt + obs_noise[k, a]
            sq = 0.0
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += A[a, b] * truth[k, b]
                truth[k + 1, a] = truth[k, a] + s * dt + sig_noise[k, a]
                sq += truth[k + 1, a] * truth[k + 1, a]
            if not isfinite(sq) or sq > BLOWUP_SQ:
                bad = k
                break
    return bad
