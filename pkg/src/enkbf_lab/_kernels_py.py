"""Pure numpy particle kernels (fallback for the compiled ones).

Both backends expose the same two functions and mutate the particle arrays
in place. They return -1 on success or the index of the first step after
which some particle left the finite ball of radius 1e12.

Noise arguments are *increments* (already scaled by sqrt(dt)) laid out as
``(n_steps, N, dim)``. ``V`` is ignored for the deterministic variant.
"""
import numpy as np

BLOWUP_SQ = 1e24


def _blown(X) -> bool:
    sq = np.einsum("ij,ij->i", X, X)
    return not (np.all(np.isfinite(sq)) and sq.max() <= BLOWUP_SQ)


def _one_step(X, A, R1s, C, R2s, G, dY, W, V, dt, deterministic, cov_out=None):
    N = X.shape[0]
    mean = X.mean(axis=0)
    Xc = X - mean
    if cov_out is not None:
        cov_out[...] = Xc.T @ Xc / (N - 1)
    if deterministic:
        innov = dY - (dt / 2) * ((X + mean) @ C.T)
    else:
        innov = dY - dt * (X @ C.T) - V @ R2s.T
    # innov @ (P G)^T with P = Xc^T Xc / (N-1), without forming P
    corr = ((innov @ G.T) @ Xc.T) @ Xc / (N - 1)
    return X + dt * (X @ A.T) + W @ R1s.T + corr


def advance(X, A, R1s, C, R2s, G, dY, W, V, dt, deterministic, cov_out=None):
    """``cov_out[k]``, if given, receives the ensemble covariance used in step k."""
    for k in range(dY.shape[0]):
        X[...] = _one_step(X, A, R1s, C, R2s, G, dY[k], W[k],
                           None if V is None else V[k], dt, deterministic,
                           None if cov_out is None else cov_out[k])
        if _blown(X):
            return k
    return -1


def advance_coupled(Xf, Xc, A, R1s, C, R2s, G, dY, W, V, dt, deterministic):
    """Fine system takes steps 2j and 2j+1, coarse one step of 2*dt with summed inputs."""
    for j in range(dY.shape[0] // 2):
        a, b = 2 * j, 2 * j + 1
        Vf = (None, None) if V is None else (V[a], V[b])
        Vc = None if V is None else V[a] + V[b]
        # coarse first: it reads Xc at the coarse step boundary only
        Xc[...] = _one_step(Xc, A, R1s, C, R2s, G, dY[a] + dY[b], W[a] + W[b], Vc,
                            2 * dt, deterministic)
        Xf[...] = _one_step(Xf, A, R1s, C, R2s, G, dY[a], W[a], Vf[0], dt, deterministic)
        Xf[...] = _one_step(Xf, A, R1s, C, R2s, G, dY[b], W[b], Vf[1], dt, deterministic)
        if _blown(Xf) or _blown(Xc):
            return j
    return -1


def kbf_run(means, covs, A, R1, C, S, G, dY, dt, scale):
    """Fill ``means[1:]``/``covs[1:]`` from ``means[0]``/``covs[0]``.

    ``scale`` is 1 for the vanilla second-order term, 1/2 for the deterministic one.
    """
    for k in range(dY.shape[0]):
        mean, P = means[k], covs[k]
        U = P @ G
        means[k + 1] = mean + (A @ mean) * dt + U @ (dY[k] - (C @ mean) * dt)
        AP = A @ P
        ricc = AP + AP.T - P @ S @ P + R1
        B = A - scale * (P @ S)
        Pn = P + (ricc + ricc.T) / 2 * dt + (B @ P @ B.T) * (dt * dt)
        covs[k + 1] = (Pn + Pn.T) / 2
        sq = float(means[k + 1] @ means[k + 1])
        if not sq <= BLOWUP_SQ:
            return k
    return -1


def simulate(truth, dY, A, C, sig_noise, obs_noise, dt):
    """Euler signal path and observation increments; ``truth[0]`` holds x0."""
    x = truth[0]
    for k in range(dY.shape[0]):
        dY[k] = (C @ x) * dt + obs_noise[k]
        x = x + (A @ x) * dt + sig_noise[k]
        truth[k + 1] = x
        sq = float(x @ x)
        if not sq <= BLOWUP_SQ:
            return k
    return -1
