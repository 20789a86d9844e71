"""Hot loops behind the Monte Carlo feature build and pricing.

Per-path (or per-column) work is independent, with no cross-worker
reductions, so outputs are invariant to the number of parallel workers.
Every kernel has a pure-numpy fallback; the Volterra accumulation
fallback reproduces the jit summation order exactly, which the
Hurst-one-half bitwise identity relies on.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    NUMBA_OK = True
except Exception:  # pragma: no cover - exercised only without a working JIT
    NUMBA_OK = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range


@njit(parallel=True, cache=True)
def _fbm_accumulate_jit(dW, weights, out):
    n_paths, n_steps = dW.shape
    for p in prange(n_paths):
        for k in range(1, n_steps + 1):
            s = 0.0
            for j in range(k):
                s += weights[k, j] * dW[p, j]
            out[p, k] = s


def _fbm_accumulate_np(dW, weights, out):
    n_steps = dW.shape[1]
    # accumulate column k in ascending-j order, matching the jit kernel
    for j in range(n_steps):
        out[:, j + 1 :] += dW[:, j : j + 1] * weights[j + 1 :, j][None, :]


def fbm_accumulate(dW: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted prefix sums W^H_k = sum_{j<k} weights[k, j] * dW[j]."""
    out = np.zeros((dW.shape[0], dW.shape[1] + 1))
    if NUMBA_OK:
        _fbm_accumulate_jit(dW, weights, out)
    else:
        _fbm_accumulate_np(dW, weights, out)
    return out


@njit(parallel=True, cache=True)
def _sig_chain_jit(dX, dZ, out_i, pre_i, ones_v, opconst, dim, v_dim, snap_steps,
                   sig_snap, v_snap):
    n_paths, n_steps = dX.shape
    n_ops = out_i.shape[0]
    n_snap = snap_steps.shape[0]
    max_pow = 0
    for o in range(n_ops):
        if ones_v[o] > max_pow:
            max_pow = ones_v[o]
    for p in prange(n_paths):
        sig = np.zeros(dim)
        sig[0] = 1.0
        new = np.zeros(dim)
        vacc = np.zeros(v_dim)
        dxp = np.zeros(max_pow + 1)
        si = 0
        for k in range(n_steps):
            if si < n_snap and snap_steps[si] == k:
                for j in range(dim):
                    sig_snap[p, si, j] = sig[j]
                for j in range(v_dim):
                    v_snap[p, si, j] = vacc[j]
                si += 1
            # left-point Ito sum for the stochastic-integral features
            dz = dZ[p, k]
            for j in range(v_dim):
                vacc[j] += sig[j] * dz
            dx = dX[p, k]
            dxp[0] = 1.0
            for j in range(1, max_pow + 1):
                dxp[j] = dxp[j - 1] * dx
            for j in range(dim):
                new[j] = 0.0
            for o in range(n_ops):
                new[out_i[o]] += sig[pre_i[o]] * opconst[o] * dxp[ones_v[o]]
            for j in range(dim):
                sig[j] = new[j]
        if si < n_snap and snap_steps[si] == n_steps:
            for j in range(dim):
                sig_snap[p, si, j] = sig[j]
            for j in range(v_dim):
                v_snap[p, si, j] = vacc[j]


def _sig_chain_np(dX, dZ, out_i, pre_i, ones_v, opconst, dim, v_dim, snap_steps,
                  sig_snap, v_snap):
    n_paths, n_steps = dX.shape
    max_pow = int(ones_v.max())
    sig = np.zeros((n_paths, dim))
    sig[:, 0] = 1.0
    vacc = np.zeros((n_paths, v_dim))
    snap_lookup = {int(s): i for i, s in enumerate(snap_steps)}
    for k in range(n_steps):
        if k in snap_lookup:
            si = snap_lookup[k]
            sig_snap[:, si, :] = sig
            v_snap[:, si, :] = vacc
        vacc += sig[:, :v_dim] * dZ[:, k : k + 1]
        dx = dX[:, k]
        dxp = np.ones((max_pow + 1, n_paths))
        for j in range(1, max_pow + 1):
            dxp[j] = dxp[j - 1] * dx
        terms = sig[:, pre_i] * (opconst[None, :] * dxp[ones_v].T)
        new = np.zeros_like(sig)
        np.add.at(new, (slice(None), out_i), terms)
        sig = new
    if n_steps in snap_lookup:
        si = snap_lookup[n_steps]
        sig_snap[:, si, :] = sig
        v_snap[:, si, :] = vacc


def sig_chain(dX, dZ, out_i, pre_i, ones_v, opconst, dim, v_dim, snap_steps):
    """Evolve truncated signatures of the time-augmented path across a batch.

    For every path, runs the per-segment tensor-exponential product chain
    on the dense coefficient vector (dimension ``dim``), accumulates the
    left-point Ito integral of the first ``v_dim`` coefficients against dZ,
    and snapshots both at the requested step indices.

    Returns (sig_snap, v_snap) with shapes (n_paths, n_snap, dim) and
    (n_paths, n_snap, v_dim).
    """
    n_paths = dX.shape[0]
    n_snap = len(snap_steps)
    sig_snap = np.zeros((n_paths, n_snap, dim))
    v_snap = np.zeros((n_paths, n_snap, v_dim))
    snap_steps = np.asarray(snap_steps, dtype=np.int64)
    if NUMBA_OK:
        _sig_chain_jit(dX, dZ, out_i, pre_i, ones_v, opconst, dim, v_dim,
                       snap_steps, sig_snap, v_snap)
    else:
        _sig_chain_np(dX, dZ, out_i, pre_i, ones_v, opconst, dim, v_dim,
                      snap_steps, sig_snap, v_snap)
    return sig_snap, v_snap


@njit(parallel=True, cache=True)
def _payoff_means_jit(expo, s0, strikes, out):
    n_ell, n_paths = expo.shape
    n_k = strikes.shape[0]
    for c in prange(n_ell):
        for j in range(n_k):
            out[c, j] = 0.0
        for p in range(n_paths):
            s = s0 * np.exp(expo[c, p])
            for j in range(n_k):
                pay = s - strikes[j]
                if pay > 0.0:
                    out[c, j] += pay
        for j in range(n_k):
            out[c, j] /= n_paths


def _payoff_means_np(expo, s0, strikes, out):
    s = s0 * np.exp(expo)
    for j, k in enumerate(strikes):
        out[:, j] = np.maximum(s - k, 0.0).mean(axis=1)


def payoff_means(expo: np.ndarray, s0: float, strikes: np.ndarray) -> np.ndarray:
    """Mean call payoffs over paths for a block of price exponents.

    ``expo`` has shape (n_ell, n_paths) with prices s0 * exp(expo); the
    result (n_ell, n_strikes) holds mean((price - strike)+) per column.
    The jit path accumulates sequentially per row, so results match across
    worker counts.
    """
    out = np.empty((expo.shape[0], strikes.shape[0]))
    strikes = np.asarray(strikes, dtype=float)
    if NUMBA_OK:
        _payoff_means_jit(expo, s0, strikes, out)
    else:
        _payoff_means_np(expo, s0, strikes, out)
    return out


def batched_cholesky_upper(A: np.ndarray):
    """Cholesky factors U with U^T U = A for a stack of SPD matrices.

    Vectorized Cholesky-Banachiewicz across the batch; instead of raising
    on a non-positive pivot it flags the matrix and leaves its factor
    unusable, so callers can ridge and retry just the failures.

    Returns (U, ok) where U has shape (n, m, m) upper-triangular and ok is
    a boolean mask of successfully factored matrices.
    """
    A = np.asarray(A, dtype=float)
    n, m, m2 = A.shape
    if m != m2:
        raise ValueError("matrices must be square")
    L = np.zeros_like(A)
    ok = np.ones(n, dtype=bool)
    for j in range(m):
        d = A[:, j, j] - np.einsum("pk,pk->p", L[:, j, :j], L[:, j, :j])
        ok &= d > 0.0
        piv = np.sqrt(np.where(d > 0.0, d, 1.0))
        L[:, j, j] = piv
        if j + 1 < m:
            off = A[:, j + 1 :, j] - np.einsum(
                "pik,pk->pi", L[:, j + 1 :, :j], L[:, j, :j]
            )
            L[:, j + 1 :, j] = off / piv[:, None]
    return L.swapaxes(1, 2), ok
