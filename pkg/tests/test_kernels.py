"""The numpy fallbacks must agree with the jit kernels."""

import numpy as np
import pytest

from sigvol import _kernels as K
from sigvol.sig_model import chain_op_tables


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_fbm_fallback_matches_jit_bitwise(rng):
    dW = rng.normal(0, 0.05, (200, 24))
    w = rng.uniform(0.5, 1.5, (25, 24))
    out_np = np.zeros((200, 25))
    K._fbm_accumulate_np(dW, w, out_np)
    if K.NUMBA_OK:
        out_jit = np.zeros((200, 25))
        K._fbm_accumulate_jit(dW, w, out_jit)
        assert np.array_equal(out_np, out_jit)


def test_sig_chain_fallback_matches_jit(rng):
    out_i, pre_i, ones_v, zeros_v, fact, dim = chain_op_tables(2)
    dt = 0.01
    opconst = (dt ** zeros_v.astype(float)) / fact[zeros_v + ones_v]
    dX = rng.normal(0, 0.1, (50, 30))
    dZ = rng.normal(0, 0.1, (50, 30))
    snap = np.array([10, 30], dtype=np.int64)
    args = (dX, dZ, out_i, pre_i, ones_v, opconst, dim, 7, snap)
    sig_np = np.zeros((50, 2, dim))
    v_np = np.zeros((50, 2, 7))
    K._sig_chain_np(*args[:6], dim, 7, snap, sig_np, v_np)
    if K.NUMBA_OK:
        sig_jit = np.zeros((50, 2, dim))
        v_jit = np.zeros((50, 2, 7))
        K._sig_chain_jit(*args[:6], dim, 7, snap, sig_jit, v_jit)
        assert np.allclose(sig_np, sig_jit, atol=1e-14)
        assert np.allclose(v_np, v_jit, atol=1e-14)


def test_payoff_means_fallback_matches_jit(rng):
    expo = rng.normal(-0.05, 0.2, (6, 5000))
    strikes = np.array([90.0, 100.0, 110.0])
    out_np = np.empty((6, 3))
    K._payoff_means_np(expo, 100.0, strikes, out_np)
    got = K.payoff_means(expo, 100.0, strikes)
    assert np.allclose(got, out_np, rtol=1e-13)


def test_batched_cholesky_flags(rng):
    good = rng.normal(size=(8, 5, 5))
    mats = np.einsum("pij,pkj->pik", good, good) + 1e-6 * np.eye(5)
    bad = np.eye(5)
    bad[0, 0] = -1.0
    stack = np.concatenate([mats, bad[None]], axis=0)
    u, ok = K.batched_cholesky_upper(stack)
    assert ok[:8].all() and not ok[8]
    recon = np.einsum("pki,pkj->pij", u[:8], u[:8])
    assert np.allclose(recon, mats, atol=1e-10)
    # agrees with numpy's factor where both succeed
    ref = np.linalg.cholesky(mats[0]).T
    assert np.allclose(u[0], ref, atol=1e-12)
