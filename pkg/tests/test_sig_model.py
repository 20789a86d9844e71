import numpy as np
import pytest

from sigvol.process_sim import HestonParams
from sigvol.sig_model import (
    CacheMismatchError,
    FactorizationError,
    FeatureCache,
    PathFeatures,
    build_feature_cache,
    check_manifest,
    expected_manifest,
    factor_neg_q,
    q_matrix,
    q_shuffle_tables,
    sig_stochastic_integral,
    sig_vol_path,
    terminal_price,
)
from sigvol.signature_engine import SampledPath, signature, signature_stream, time_augment
from sigvol.tensor_algebra import get_labeling

PRIMARY = HestonParams(x0=0.1, kappa=2.0, theta=0.15, nu=0.2, rho=0.0)


@pytest.fixture(scope="module")
def augmented_path():
    rng = np.random.default_rng(5)
    m, horizon = 80, 0.5
    t = np.linspace(0.0, horizon, m + 1)
    x = np.concatenate([[0.1], 0.1 + np.cumsum(rng.normal(0, 0.02, m))])
    return time_augment(SampledPath(t, x))


@pytest.fixture(scope="module")
def sig7(augmented_path):
    return signature(augmented_path, 7)


@pytest.fixture(scope="module")
def stream3(augmented_path):
    return signature_stream(augmented_path, 3)


@pytest.fixture(scope="module")
def small_cache():
    return build_feature_cache(PRIMARY, 4000, 120, 0.6, (0.1, 0.6), seed=42)


class TestQShuffleTables:
    def test_worked_pair_expansion(self):
        # (e_111 sh e_01) . e_0 = e_111010 + 2 e_110110 + 3 e_101110 + 4 e_011110
        iu, m = q_shuffle_tables(2, 3)
        lab3 = get_labeling(2, 3)
        lab7 = get_labeling(2, 7)
        i = lab3.label((1, 1, 1))
        j = lab3.label((0, 1))
        row = [r for r, (a, b) in enumerate(zip(*iu)) if (a, b) == (j, i)][0]
        coeffs = m[row]
        expect = {
            (1, 1, 1, 0, 1, 0): 1,
            (1, 1, 0, 1, 1, 0): 2,
            (1, 0, 1, 1, 1, 0): 3,
            (0, 1, 1, 1, 1, 0): 4,
        }
        nz = np.flatnonzero(coeffs)
        assert {lab7.unlabel(k): coeffs[k] for k in nz} == {
            w: -0.5 * mult for w, mult in expect.items()
        }

    def test_row_count(self):
        iu, m = q_shuffle_tables(2, 3)
        assert m.shape == (120, 255)


class TestQMatrix:
    def test_time_entries(self, sig7):
        lab3 = get_labeling(2, 3)
        q = q_matrix(sig7, lab3)
        t = 0.5
        # (empty sh empty).0 = word (0): <e_0, S> = t
        assert q[0, 0] == pytest.approx(-t / 2, rel=1e-12)
        # (empty sh (0)).0 = word (0,0): <e_00, S> = t^2/2
        assert q[0, 1] == pytest.approx(-(t**2) / 4, rel=1e-12)

    def test_exact_symmetry(self, sig7):
        q = q_matrix(sig7, get_labeling(2, 3))
        assert np.abs(q - q.T).max() == 0.0

    def test_negative_semidefinite(self, sig7):
        q = q_matrix(sig7, get_labeling(2, 3))
        assert np.linalg.eigvalsh(q).max() <= 1e-9 * np.abs(q).max()

    def test_quadrature_consistency(self, sig7, stream3, augmented_path):
        q = q_matrix(sig7, get_labeling(2, 3))
        rng = np.random.default_rng(1)
        t = augmented_path.times
        for _ in range(10):
            ell = rng.normal(0, 0.5, 15)
            sigma = sig_vol_path(ell, stream3)
            trap = np.trapezoid(sigma**2, t)
            lhs = ell @ q @ ell
            assert abs(lhs + 0.5 * trap) <= 2e-3 * (1 + abs(lhs))

    def test_cap_too_small(self, augmented_path):
        sig5 = signature(augmented_path, 5)
        with pytest.raises(ValueError, match="level 7"):
            q_matrix(sig5, get_labeling(2, 3))


class TestFactorNegQ:
    def test_identity(self):
        assert np.array_equal(factor_neg_q(-np.eye(4)), np.eye(4))

    def test_zero(self):
        # exactly singular: factors after the ridge (which is zero here);
        # a zero Q arises only in degenerate tests, never from a real path
        u = factor_neg_q(np.zeros((3, 3)))
        assert np.array_equal(u, np.zeros((3, 3)))

    def test_reconstruction(self, sig7):
        q = q_matrix(sig7, get_labeling(2, 3))
        u = factor_neg_q(q)
        assert np.allclose(np.triu(u), u)
        assert np.abs(u.T @ u + q).max() <= 1e-9 * (1 + np.abs(q).max())

    def test_hopeless_matrix_raises(self):
        with pytest.raises(FactorizationError):
            factor_neg_q(np.diag([1.0, -1.0]))  # -Q has a -1 eigenvalue


class TestStochasticIntegral:
    def test_components(self, stream3, augmented_path):
        rng = np.random.default_rng(2)
        dz = rng.normal(0, 0.05, augmented_path.n_segments)
        v = sig_stochastic_integral(stream3, dz)
        assert v[0] == pytest.approx(dz.sum(), rel=1e-14)
        tk = augmented_path.times[:-1]
        assert v[1] == pytest.approx(float(tk @ dz), rel=1e-12)

    def test_zero_increments(self, stream3, augmented_path):
        v = sig_stochastic_integral(stream3, np.zeros(augmented_path.n_segments))
        assert np.array_equal(v, np.zeros(15))

    def test_grid_mismatch(self, stream3):
        with pytest.raises(ValueError, match="grid mismatch"):
            sig_stochastic_integral(stream3, np.zeros(7))


class TestTerminalPrice:
    def test_zero_coefficients_return_spot(self, sig7):
        u = factor_neg_q(q_matrix(sig7, get_labeling(2, 3)))
        feat = PathFeatures(0.5, u, np.zeros(15))
        assert terminal_price(np.zeros(15), feat, 100.0) == 100.0

    def test_constant_vol_reduces_to_black_scholes_form(self, sig7, stream3, augmented_path):
        u = factor_neg_q(q_matrix(sig7, get_labeling(2, 3)))
        rng = np.random.default_rng(3)
        dz = rng.normal(0, 0.05, augmented_path.n_segments)
        v = sig_stochastic_integral(stream3, dz)
        c, t = 0.3, 0.5
        ell = np.zeros(15)
        ell[0] = c
        got = terminal_price(ell, PathFeatures(t, u, v), 100.0)
        want = 100.0 * np.exp(-0.5 * c * c * t + c * dz.sum())
        assert got == pytest.approx(want, rel=1e-12)


class TestSigVolPath:
    def test_constant_functional(self, stream3):
        ell = np.zeros(15)
        ell[0] = 1.0
        assert np.array_equal(sig_vol_path(ell, stream3), np.ones(len(stream3.sigs)))

    def test_primary_letter_gives_increment(self, stream3, augmented_path):
        ell = np.zeros(15)
        ell[2] = 1.0  # word (1): the primary coordinate
        got = sig_vol_path(ell, stream3)
        x = augmented_path.values[:, 1]
        assert np.allclose(got, x - x[0], atol=1e-15)

    def test_level2_terms_match_quadrature(self, augmented_path):
        # the level-2 volatility expansion against piecewise-linear exact
        # iterated integrals (signature convention: word (0,0) carries t^2/2)
        stream2 = signature_stream(augmented_path, 2)
        t = augmented_path.times
        x = augmented_path.values[:, 1]
        dx = np.diff(x)
        lab2 = get_labeling(2, 2)
        rng = np.random.default_rng(4)
        ell = rng.normal(0, 0.3, 7)
        got = sig_vol_path(ell, stream2)
        int_s_dx = np.concatenate([[0.0], np.cumsum(0.5 * (t[:-1] + t[1:]) * dx)])
        int_x_ds = np.concatenate(
            [[0.0], np.cumsum(0.5 * ((x[:-1] - x[0]) + (x[1:] - x[0])) * np.diff(t))]
        )
        want = (
            ell[lab2.label(())]
            + ell[lab2.label((0,))] * t
            + ell[lab2.label((1,))] * (x - x[0])
            + ell[lab2.label((0, 0))] * t**2 / 2
            + ell[lab2.label((0, 1))] * int_s_dx
            + ell[lab2.label((1, 0))] * int_x_ds
            + ell[lab2.label((1, 1))] * (x - x[0]) ** 2 / 2
        )
        assert np.allclose(got, want, atol=1e-12)


class TestFeatureCache:
    def test_no_failures_and_all_valid(self, small_cache):
        assert small_cache.n_valid == 4000
        assert small_cache.manifest["counters"]["factorization_failures"] == 0

    def test_deterministic_rebuild(self, small_cache):
        again = build_feature_cache(PRIMARY, 4000, 120, 0.6, (0.1, 0.6), seed=42)
        for a, b in zip(small_cache.u_packed, again.u_packed):
            assert np.array_equal(a, b)
        for a, b in zip(small_cache.v, again.v):
            assert np.array_equal(a, b)

    def test_pricing_determinism(self, small_cache):
        rng = np.random.default_rng(6)
        ells = rng.normal(0, 0.3, (3, 15))
        p1 = small_cache.terminal_prices(ells, 0.6, 100.0)
        p2 = small_cache.terminal_prices(ells, 0.6, 100.0)
        assert np.array_equal(p1, p2)

    def test_terminal_prices_match_path_features(self, small_cache):
        rng = np.random.default_rng(7)
        ell = rng.normal(0, 0.2, 15)
        block = small_cache.terminal_prices(ell[None, :], 0.1, 100.0)[:, 0]
        for p in (0, 17, 1234):
            feat = small_cache.path_features(p, 0.1)
            assert block[p] == pytest.approx(terminal_price(ell, feat, 100.0), rel=1e-12)

    def test_q_consistency_with_single_path_op(self, small_cache):
        # the batch -Q agrees with the scalar q_matrix on a recomputed path
        a = small_cache.neg_q(3, 0.6)
        assert np.allclose(a, a.T, atol=0)
        evals = np.linalg.eigvalsh(-a)
        assert evals.max() <= 1e-9 * np.abs(a).max()

    def test_martingale_drift(self, small_cache):
        # discounted model prices must be driftless for bounded coefficients
        rng = np.random.default_rng(11)
        for _ in range(3):
            ell = rng.normal(0, 0.1, 15)
            ell[0] = 0.2
            st = small_cache.terminal_prices(ell[None, :], 0.6, 100.0)[:, 0]
            se = st.std(ddof=1) / np.sqrt(st.size)
            assert abs(st.mean() - 100.0) <= 3 * se

    def test_save_load_roundtrip(self, small_cache, tmp_path):
        f = tmp_path / "cache.bin"
        small_cache.save(f)
        loaded = FeatureCache.load(f)
        for a, b in zip(small_cache.u_packed, loaded.u_packed):
            assert np.array_equal(a, b)
        for a, b in zip(small_cache.v, loaded.v):
            assert np.array_equal(a, b)
        assert np.array_equal(small_cache.valid, loaded.valid)
        for a, b in zip(small_cache.neg_q_packed, loaded.neg_q_packed):
            assert np.allclose(a, b, atol=1e-12)

    def test_manifest_check(self, small_cache):
        good = expected_manifest(PRIMARY, 4000, 120, 0.6, 42, 3, (0.1, 0.6))
        check_manifest(small_cache, good)
        bad = dict(good)
        bad["seed"] = 43
        with pytest.raises(CacheMismatchError, match="seed"):
            check_manifest(small_cache, bad)

    def test_not_a_cache_file(self, tmp_path):
        f = tmp_path / "junk.bin"
        f.write_bytes(b"not a cache")
        with pytest.raises(CacheMismatchError):
            FeatureCache.load(f)

    def test_csv_dump(self, small_cache, tmp_path):
        f = tmp_path / "features.csv"
        small_cache.to_csv(f, max_paths=3)
        lines = f.read_text().splitlines()
        assert lines[0].startswith("path,maturity,valid,u0")
        assert len(lines) == 1 + 3 * 2  # header + paths x maturities

    def test_off_grid_maturity_rejected(self):
        with pytest.raises(ValueError, match="grid point"):
            build_feature_cache(PRIMARY, 100, 120, 0.6, (0.1234,), seed=1)
