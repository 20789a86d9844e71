"""The signature volatility model and its per-path pricing features.

Volatility is a linear functional of the truncated signature of the
time-augmented primary noise, sigma_t = <ell, S_t>, truncated at level N
(letters: 0 = time, 1 = primary).  The discounted terminal price on a path
is then

    S_T(ell) = S0 * exp(-||U(T) ell||^2 + ell . v(T))

where U(T) is the Cholesky factor of the quadratic-variation form built
from shuffle products paired with the level-(2N+1) signature, and v(T) is
the Ito integral of the flattened level-N signature against the price
noise Z.  Both are ell-independent, so a calibration loop re-prices from
the cached (U, v) features without ever touching signatures again.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ._kernels import batched_cholesky_upper, sig_chain
from .process_sim import RNG_BLOCK, HestonParams, correlate, euler_cir, simulate_brownian
from .signature_engine import SignatureStream
from .tensor_algebra import (
    TruncatedTensor,
    alphabet_dim,
    get_labeling,
    pair,
    shuffle_words,
    word_sum_append,
)

#: Signature truncation level of the volatility functional.
DEFAULT_SIG_LEVEL = 3

#: Ridge applied to a failed factorization, relative to mean diagonal.
RIDGE_REL = 1e-12


class FactorizationError(RuntimeError):
    """-Q could not be Cholesky-factored even after the ridge retry."""


class CacheMismatchError(RuntimeError):
    """A persisted feature cache does not match the requested build."""


def q_shuffle_tables(d: int, sig_level: int):
    """Pairing tables that turn a level-(2N+1) signature into the Q matrix.

    Row r of the returned matrix M corresponds to the r-th unordered pair
    (I, J) of level-<=N basis words in packed upper-triangular order, and
    holds -1/2 times the integer multiplicities of the shuffle expansion
    (I sh J) . letter0, laid out over the level-(2N+1) dense labeling.
    Q entries then come from one matrix-vector product with the signature.
    """
    return _q_shuffle_tables_cached(d, sig_level)


@lru_cache(maxsize=None)
def _q_shuffle_tables_cached(d: int, sig_level: int):
    lab_n = get_labeling(d, sig_level)
    lab_q = get_labeling(d, 2 * sig_level + 1)
    dim_n = lab_n.size
    iu = np.triu_indices(dim_n)
    m = np.zeros((iu[0].size, lab_q.size))
    for row, (i, j) in enumerate(zip(*iu)):
        wi, wj = lab_n.words[i], lab_n.words[j]
        for w, mult in word_sum_append(shuffle_words(wi, wj), 0).items():
            m[row, lab_q.label(w)] += -0.5 * mult
    return iu, m


def q_matrix(sig7: TruncatedTensor, labeling_n) -> np.ndarray:
    """Quadratic-variation matrix of the signature volatility model.

    Q[L(I), L(J)] = -1/2 <(I sh J) . letter0, sig7> over all pairs of
    basis words up to the volatility truncation level; sig7 must be the
    signature of the time-augmented primary path truncated at least at
    2N+1.  Q is symmetric and negative semi-definite: the quadratic form
    ell' Q ell equals -1/2 the time integral of sigma_t(ell)^2.
    """
    n = labeling_n.cap
    if sig7.d != labeling_n.d:
        raise ValueError(f"alphabet mismatch: {sig7.d} vs {labeling_n.d}")
    if sig7.cap < 2 * n + 1:
        raise ValueError(
            f"signature cap {sig7.cap} too small: Q needs level {2 * n + 1}"
        )
    iu, m = q_shuffle_tables(sig7.d, n)
    dim_q = alphabet_dim(sig7.d, 2 * n + 1)
    packed = m @ sig7.coeffs[:dim_q]
    dim_n = labeling_n.size
    q = np.zeros((dim_n, dim_n))
    q[iu] = packed
    q.T[iu] = packed
    return q


def factor_neg_q(q: np.ndarray) -> np.ndarray:
    """Upper-triangular U with U'U = -Q, ridging once on failure.

    -Q is positive semi-definite in exact arithmetic; roundoff can tip a
    near-zero eigenvalue below zero, in which case a diagonal ridge of
    RIDGE_REL * trace(-Q)/dim is added and the factorization retried.
    """
    a = -np.asarray(q, dtype=float)
    try:
        return np.linalg.cholesky(a).T
    except np.linalg.LinAlgError:
        pass
    if not a.any():
        return np.zeros_like(a)  # exactly zero Q factors trivially
    ridge = RIDGE_REL * np.trace(a) / a.shape[0]
    try:
        return np.linalg.cholesky(a + ridge * np.eye(a.shape[0])).T
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"-Q not factorable even with ridge {ridge:g}"
        ) from exc


def sig_stochastic_integral(stream: SignatureStream, dz: np.ndarray) -> np.ndarray:
    """Left-point Ito sum of the flattened signature against noise increments.

    v[j] = sum_k sigs[k][j] * dz[k]; component 0 (empty word) is exactly
    the terminal value of the integrator.
    """
    dz = np.asarray(dz, dtype=float)
    if dz.shape[0] != len(stream.sigs) - 1:
        raise ValueError(
            f"grid mismatch: {len(stream.sigs) - 1} segments vs {dz.shape[0]} increments"
        )
    mat = np.stack([s.coeffs for s in stream.sigs[:-1]], axis=0)
    return mat.T @ dz


def sig_vol_path(ell: np.ndarray, stream: SignatureStream) -> np.ndarray:
    """sigma_t(ell) = <ell, S_t> along a signature stream (diagnostic path)."""
    ell = np.asarray(ell, dtype=float)
    d = stream.sigs[0].d
    cap = _level_for_dim(d, ell.shape[0])
    tens = TruncatedTensor(d, cap, ell)
    return np.array([pair(tens, s) for s in stream.sigs])


def _level_for_dim(d: int, dim: int) -> int:
    for n in range(0, 16):
        if alphabet_dim(d, n) == dim:
            return n
    raise ValueError(f"{dim} is not a truncated-algebra dimension for d={d}")


@dataclass(frozen=True)
class PathFeatures:
    """Pricing features of one Monte Carlo path at one maturity."""

    maturity: float
    u: np.ndarray  # upper-triangular Cholesky factor of -Q(T)
    v: np.ndarray  # integral of vec(S^{<=N}) dZ

    def __post_init__(self):
        if self.u.shape[0] != self.u.shape[1] or self.v.shape[0] != self.u.shape[0]:
            raise ValueError("inconsistent feature dimensions")


def terminal_price(ell: np.ndarray, features: PathFeatures, s0: float) -> float:
    """Discounted terminal price S0 exp(-||U ell||^2 + ell . v) on one path."""
    ell = np.asarray(ell, dtype=float)
    return float(s0 * np.exp(-np.sum((features.u @ ell) ** 2) + features.v @ ell))


def chain_op_tables(sig_level: int):
    """Split tables driving the per-segment product chain at cap 2N+1.

    For the two-letter alphabet (time, primary), every word w of length
    <= cap receives contributions old[u] * dt^z(v) dX^o(v) / |v|! over all
    splits w = u.v.  Returns (out_idx, prefix_idx, ones_count, zeros_count,
    factorials, dim).
    """
    return _chain_op_tables_cached(2 * sig_level + 1)


@lru_cache(maxsize=None)
def _chain_op_tables_cached(cap: int):
    lab = get_labeling(2, cap)
    fact = [1.0]
    for i in range(1, cap + 2):
        fact.append(fact[-1] * i)
    out_i, pre_i, ones_v, zeros_v = [], [], [], []
    for w in lab.words:
        for k in range(len(w) + 1):
            u, v = w[:k], w[k:]
            out_i.append(lab.label(w))
            pre_i.append(lab.label(u))
            ones_v.append(sum(v))
            zeros_v.append(len(v) - sum(v))
    return (
        np.asarray(out_i, dtype=np.int64),
        np.asarray(pre_i, dtype=np.int64),
        np.asarray(ones_v, dtype=np.int64),
        np.asarray(zeros_v, dtype=np.int64),
        np.asarray(fact),
        lab.size,
    )


def _maturity_steps(maturities: Sequence[float], dt: float, n_steps: int) -> np.ndarray:
    steps = []
    for t in maturities:
        k = int(round(t / dt))
        if k < 1 or k > n_steps or abs(k * dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"maturity {t} is not a grid point (dt={dt})")
        steps.append(k)
    if sorted(steps) != steps:
        raise ValueError("maturities must be increasing")
    return np.asarray(steps, dtype=np.int64)


@dataclass
class FeatureCache:
    """Per-path, per-maturity pricing features for a whole Monte Carlo batch.

    ``u_packed[m]`` holds the upper-triangular entries (row-major, packed)
    of U(T_m) for every path; ``v[m]`` the stochastic-integral vectors.
    ``neg_q_packed`` carries -Q(T_m) in the same packing: it is derivable
    from U but kept because the batched quadratic form ell'(-Q)ell is the
    cheapest way to re-price a whole block of candidate ell vectors.
    ``valid`` masks out the (rare) paths whose factorization failed even
    with the ridge.
    """

    sig_level: int
    maturities: Tuple[float, ...]
    u_packed: List[np.ndarray]
    v: List[np.ndarray]
    neg_q_packed: List[np.ndarray]
    valid: np.ndarray
    manifest: Dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return alphabet_dim(2, self.sig_level)

    @property
    def n_paths(self) -> int:
        return int(self.valid.shape[0])

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def maturity_index(self, t: float) -> int:
        for i, m in enumerate(self.maturities):
            if abs(m - t) <= 1e-12 * max(1.0, t):
                return i
        raise ValueError(f"maturity {t} not in cache {self.maturities}")

    def _pack_quad_weights(self, ells: np.ndarray) -> np.ndarray:
        """Weights w with (packed A) . w = ell' A ell for symmetric packed A."""
        iu_r, iu_c = np.triu_indices(self.dim)
        w = ells[:, iu_r] * ells[:, iu_c]
        w[:, iu_r != iu_c] *= 2.0
        return w.T  # (n_pack, n_ell)

    def price_exponents(self, ells: np.ndarray, maturity: float) -> np.ndarray:
        """log(S_T(ell)/S0) per coefficient vector and path, shape (n_ell, n_valid).

        Row e holds ell_e . v - ell_e' (-Q) ell_e along the valid paths; the
        row-major layout keeps the downstream exp/payoff pass contiguous.
        """
        ells = np.atleast_2d(np.asarray(ells, dtype=float))
        mi = self.maturity_index(maturity)
        apacked = self.neg_q_packed[mi][self.valid]
        expo = np.matmul(ells, self.v[mi][self.valid].T)
        expo -= np.matmul(self._pack_quad_weights(ells).T, apacked.T)
        return expo

    def terminal_prices(self, ells: np.ndarray, maturity: float, s0: float) -> np.ndarray:
        """Discounted terminal prices for a block of coefficient vectors.

        ``ells`` has shape (n_ell, dim); returns (n_valid_paths, n_ell).
        Deterministic function of (ells, cache): the same inputs give
        bit-identical prices, which makes the calibration loss exactly
        reproducible.
        """
        return s0 * np.exp(self.price_exponents(ells, maturity)).T

    def path_features(self, path: int, maturity: float) -> PathFeatures:
        mi = self.maturity_index(maturity)
        dim = self.dim
        u = np.zeros((dim, dim))
        u[np.triu_indices(dim)] = self.u_packed[mi][path]
        return PathFeatures(self.maturities[mi], u, self.v[mi][path].copy())

    def neg_q(self, path: int, maturity: float) -> np.ndarray:
        mi = self.maturity_index(maturity)
        dim = self.dim
        a = np.zeros((dim, dim))
        iu = np.triu_indices(dim)
        a[iu] = self.neg_q_packed[mi][path]
        a.T[iu] = self.neg_q_packed[mi][path]
        return a

    # ---- persistence ---------------------------------------------------

    MAGIC = b"SGFC"
    VERSION = 2

    def save(self, path) -> None:
        """Write the cache in the fixed little-endian record layout.

        Layout: magic, u32 version, u32 header length, JSON header
        (manifest incl. seed, grid, level, maturities, counters), then per
        maturity the packed-U block (n_paths x dim(dim+1)/2 float64-LE)
        followed by the v block (n_paths x dim float64-LE), then the
        validity mask as bytes.
        """
        header = dict(self.manifest)
        header["sig_level"] = self.sig_level
        header["maturities"] = list(self.maturities)
        header["n_paths"] = self.n_paths
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<II", self.VERSION, len(blob)))
            fh.write(blob)
            for mi in range(len(self.maturities)):
                fh.write(np.ascontiguousarray(self.u_packed[mi], dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(self.v[mi], dtype="<f8").tobytes())
            fh.write(self.valid.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "FeatureCache":
        with open(path, "rb") as fh:
            if fh.read(4) != cls.MAGIC:
                raise CacheMismatchError(f"{path} is not a feature cache")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != cls.VERSION:
                raise CacheMismatchError(
                    f"cache version {version} unsupported (expected {cls.VERSION})"
                )
            header = json.loads(fh.read(hlen).decode())
            sig_level = int(header["sig_level"])
            maturities = tuple(float(t) for t in header["maturities"])
            n_paths = int(header["n_paths"])
            dim = alphabet_dim(2, sig_level)
            n_pack = dim * (dim + 1) // 2
            u_packed, v = [], []
            for _ in maturities:
                u = np.frombuffer(fh.read(8 * n_paths * n_pack), dtype="<f8")
                u_packed.append(u.reshape(n_paths, n_pack).copy())
                vv = np.frombuffer(fh.read(8 * n_paths * dim), dtype="<f8")
                v.append(vv.reshape(n_paths, dim).copy())
            valid = np.frombuffer(fh.read(n_paths), dtype=np.uint8).astype(bool)
        neg_q = [_upacked_to_neg_q_packed(u, dim) for u in u_packed]
        return cls(sig_level, maturities, u_packed, v, neg_q, valid, header)

    def to_csv(self, path, max_paths: int = 100) -> None:
        """Readable dump of the leading paths' features for inspection."""
        with open(path, "w") as fh:
            u_cols = ",".join(f"u{i}" for i in range(self.u_packed[0].shape[1]))
            v_cols = ",".join(f"v{i}" for i in range(self.dim))
            fh.write(f"path,maturity,valid,{u_cols},{v_cols}\n")
            for p in range(min(max_paths, self.n_paths)):
                for mi, t in enumerate(self.maturities):
                    row = np.concatenate([self.u_packed[mi][p], self.v[mi][p]])
                    fh.write(
                        f"{p},{t},{int(self.valid[p])},"
                        + ",".join(f"{x:.17g}" for x in row)
                        + "\n"
                    )


def _upacked_to_neg_q_packed(u_packed: np.ndarray, dim: int) -> np.ndarray:
    """Recover packed -Q = U'U from packed upper-triangular factors."""
    n = u_packed.shape[0]
    iu = np.triu_indices(dim)
    full = np.zeros((n, dim, dim))
    full[:, iu[0], iu[1]] = u_packed
    a = np.einsum("pki,pkj->pij", full, full)
    return a[:, iu[0], iu[1]]


def build_feature_cache(
    primary: HestonParams,
    n_paths: int,
    n_steps: int,
    horizon: float,
    maturities: Sequence[float],
    seed: int,
    sig_level: int = DEFAULT_SIG_LEVEL,
) -> FeatureCache:
    """Simulate the primary process and assemble all pricing features.

    Per RNG block: simulate (W, B), evolve the primary level X by the
    full-truncation Euler scheme, run the signature product chain of the
    time-augmented path at cap 2N+1 while accumulating the level-N
    stochastic integral against dZ, snapshot both at each maturity, pair
    the snapshots with the precomputed shuffle tables to get -Q(T), and
    Cholesky-factor it (ridge retry, then exclusion with a counter).
    """
    maturities = tuple(float(t) for t in maturities)
    dt = horizon / n_steps
    snap_steps = _maturity_steps(maturities, dt, n_steps)
    out_i, pre_i, ones_v, zeros_v, fact, dim_q = chain_op_tables(sig_level)
    opconst = (dt ** zeros_v.astype(float)) / fact[zeros_v + ones_v]
    iu, m_q = q_shuffle_tables(2, sig_level)
    dim_n = alphabet_dim(2, sig_level)
    n_pack = dim_n * (dim_n + 1) // 2
    n_mat = len(maturities)

    u_packed = [np.empty((n_paths, n_pack)) for _ in range(n_mat)]
    v_out = [np.empty((n_paths, dim_n)) for _ in range(n_mat)]
    neg_q_packed = [np.empty((n_paths, n_pack)) for _ in range(n_mat)]
    valid = np.ones(n_paths, dtype=bool)
    ridge_count = 0
    fail_count = 0
    t_start = time.time()

    for block, start in enumerate(range(0, n_paths, RNG_BLOCK)):
        stop = min(start + RNG_BLOCK, n_paths)
        batch = simulate_brownian(stop - start, n_steps, horizon, seed, first_block=block)
        x = euler_cir(primary, batch)
        dx = np.diff(x, axis=1)
        dz = correlate(batch, primary.rho)
        sig_snap, v_snap = sig_chain(
            dx, dz, out_i, pre_i, ones_v, opconst, dim_q, dim_n, snap_steps
        )
        for mi in range(n_mat):
            qpack = sig_snap[:, mi, :] @ m_q.T  # packed Q(T_mi), row per path
            apack = -qpack
            full = np.zeros((stop - start, dim_n, dim_n))
            full[:, iu[0], iu[1]] = apack
            full[:, iu[1], iu[0]] = apack
            u, ok = batched_cholesky_upper(full)
            if not ok.all():
                bad = np.flatnonzero(~ok)
                ridge_count += bad.size
                tr = np.einsum("pii->p", full[bad])
                eps = RIDGE_REL * tr / dim_n
                full[bad] += eps[:, None, None] * np.eye(dim_n)[None]
                u2, ok2 = batched_cholesky_upper(full[bad])
                u[bad] = u2
                still = bad[~ok2]
                if still.size:
                    fail_count += still.size
                    valid[start + still] = False
            u_packed[mi][start:stop] = u[:, iu[0], iu[1]]
            neg_q_packed[mi][start:stop] = apack
            v_out[mi][start:stop] = v_snap[:, mi, :]

    manifest = {
        "kind": "sig_feature_cache",
        "seed": int(seed),
        "n_steps": int(n_steps),
        "horizon": float(horizon),
        "dt": dt,
        "primary": {
            "x0": primary.x0,
            "kappa": primary.kappa,
            "theta": primary.theta,
            "nu": primary.nu,
            "rho": primary.rho,
        },
        "counters": {
            "ridge_retries": int(ridge_count),
            "factorization_failures": int(fail_count),
        },
        "build_seconds": round(time.time() - t_start, 3),
    }
    return FeatureCache(
        sig_level, maturities, u_packed, v_out, neg_q_packed, valid, manifest
    )


def expected_manifest(primary: HestonParams, n_paths: int, n_steps: int,
                      horizon: float, seed: int, sig_level: int,
                      maturities: Sequence[float]) -> Dict:
    """The header a cache built with these settings must carry."""
    return {
        "seed": int(seed),
        "n_paths": int(n_paths),
        "n_steps": int(n_steps),
        "horizon": float(horizon),
        "sig_level": int(sig_level),
        "maturities": [float(t) for t in maturities],
        "primary": {
            "x0": primary.x0,
            "kappa": primary.kappa,
            "theta": primary.theta,
            "nu": primary.nu,
            "rho": primary.rho,
        },
    }


def check_manifest(cache: FeatureCache, expected: Dict) -> None:
    """Raise CacheMismatchError naming every differing manifest key."""
    merged = dict(cache.manifest)
    merged["sig_level"] = cache.sig_level
    merged["maturities"] = list(cache.maturities)
    merged["n_paths"] = cache.n_paths
    bad = []
    for key, want in expected.items():
        got = merged.get(key)
        if isinstance(want, float):
            same = got is not None and abs(got - want) <= 1e-12 * max(1.0, abs(want))
        else:
            same = got == want
        if not same:
            bad.append(f"{key}: cache has {got!r}, expected {want!r}")
    if bad:
        raise CacheMismatchError("feature cache does not match request: " + "; ".join(bad))
