import numpy as np
import pytest

from sigvol.calibration import (
    CalibrationConfig,
    LossEvaluator,
    calibrate,
    initial_coefficients,
    market_ivs,
    smile_calibrate,
    weights_inverse_vega,
)
from sigvol.pricing import OptionQuote, bs_price
from sigvol.process_sim import HestonParams
from sigvol.sig_model import build_feature_cache

PRIMARY = HestonParams(x0=0.1, kappa=2.0, theta=0.15, nu=0.2, rho=0.0)
MATS = (0.1, 0.6, 1.1, 1.6)
STRIKES = (90.0, 95.0, 100.0, 105.0, 110.0)


@pytest.fixture(scope="module")
def cache():
    return build_feature_cache(PRIMARY, 8000, 480, 1.6, MATS, seed=42)


@pytest.fixture(scope="module")
def synthetic_quotes(cache):
    """Market generated by the signature model itself at a known ell."""
    ell_true = np.zeros(15)
    ell_true[0], ell_true[1], ell_true[2] = 0.2, 0.1, 1.0
    quotes = []
    for t in MATS:
        st = cache.terminal_prices(ell_true[None, :], t, 100.0)[:, 0]
        for k in STRIKES:
            quotes.append(OptionQuote(k, t, float(np.maximum(st - k, 0.0).mean())))
    return quotes


class TestWeights:
    def test_identical_quotes_equal_weights(self):
        price = bs_price(100, 100, 0.5, 0.0, 0.2)
        quotes = [OptionQuote(100.0, 0.5, price) for _ in range(4)]
        w = weights_inverse_vega(quotes, 100.0, 0.0)
        assert np.allclose(w, 1.0)

    def test_low_vega_gets_high_weight(self):
        short_otm = OptionQuote(110.0, 0.1, bs_price(100, 110, 0.1, 0.0, 0.2))
        long_atm = OptionQuote(100.0, 1.6, bs_price(100, 100, 1.6, 0.0, 0.2))
        w = weights_inverse_vega([short_otm, long_atm], 100.0, 0.0)
        assert w[0] > w[1]

    def test_normalization(self, synthetic_quotes):
        w = weights_inverse_vega(synthetic_quotes, 100.0, 0.0)
        assert w.sum() == pytest.approx(len(synthetic_quotes))

    def test_market_ivs_recomputed_from_prices(self):
        q = OptionQuote(100.0, 0.5, bs_price(100, 100, 0.5, 0.0, 0.31), implied_vol=0.99)
        assert market_ivs([q], 100.0, 0.0)[0] == pytest.approx(0.31, abs=1e-9)


class TestLossEvaluator:
    def test_self_pricing_loss_is_zero(self, cache, synthetic_quotes):
        # the quote fixture and the evaluator may sum payoffs in different
        # orders, so "zero" means bit-noise relative to O(10) prices
        ell_true = np.zeros(15)
        ell_true[0], ell_true[1], ell_true[2] = 0.2, 0.1, 1.0
        ev = LossEvaluator(synthetic_quotes, cache, 100.0, 0.0)
        assert ev.loss(ell_true) < 1e-20

    def test_zero_weight_removes_quote(self, cache, synthetic_quotes):
        ev_all = LossEvaluator(synthetic_quotes, cache, 100.0, 0.0)
        w = np.ones(len(synthetic_quotes))
        w[3] = 0.0
        ev_masked = LossEvaluator(synthetic_quotes, cache, 100.0, 0.0, w)
        x = np.zeros(15)
        x[0] = 0.3
        resid = ev_all.market - ev_all.model_prices(x[None, :])[0]
        assert ev_masked.loss(x) == pytest.approx(ev_all.loss(x) - resid[3] ** 2)

    def test_bit_identical_reevaluation(self, cache, synthetic_quotes):
        ev = LossEvaluator(synthetic_quotes, cache, 100.0, 0.0)
        x = np.full(15, 0.05)
        assert ev.loss(x) == ev.loss(x)
        a = ev.loss_and_grad(x, 1e-6)
        b = ev.loss_and_grad(x, 1e-6)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_gradient_step_consistency(self, cache, synthetic_quotes):
        ev = LossEvaluator(synthetic_quotes, cache, 100.0, 0.0)
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.normal(0, 0.15, 15)
            _, g6 = ev.loss_and_grad(x, 1e-6)
            _, g8 = ev.loss_and_grad(x, 1e-8)
            scale = np.abs(g8).max()
            assert np.abs(g6 - g8).max() <= 1e-3 * scale

    def test_missing_maturity_rejected(self, cache):
        with pytest.raises(ValueError):
            LossEvaluator([OptionQuote(100.0, 0.31, 5.0)], cache, 100.0, 0.0)

    def test_nonzero_rate_rejected(self, cache, synthetic_quotes):
        with pytest.raises(ValueError):
            LossEvaluator(synthetic_quotes, cache, 100.0, 0.02)


class TestCalibrate:
    def test_self_consistency(self, cache, synthetic_quotes):
        cfg = CalibrationConfig(n_mc=8000, max_iter=300)
        res = calibrate(cfg, synthetic_quotes, cache)
        assert res.loss < 1e-8
        assert res.max_iv_error < 1e-3
        assert res.diagnostics["factorization_failures"] == 0

    def test_monotone_accepted_losses(self, cache, synthetic_quotes):
        cfg = CalibrationConfig(n_mc=8000, max_iter=60)
        res = calibrate(cfg, synthetic_quotes, cache)
        diffs = np.diff(res.loss_trace)
        assert np.all(diffs <= 1e-15)

    def test_deterministic(self, cache, synthetic_quotes):
        cfg = CalibrationConfig(n_mc=8000, max_iter=40)
        a = calibrate(cfg, synthetic_quotes, cache)
        b = calibrate(cfg, synthetic_quotes, cache)
        assert np.array_equal(a.ell_star, b.ell_star) and a.loss == b.loss

    def test_bounds_respected(self, cache, synthetic_quotes):
        cfg = CalibrationConfig(n_mc=8000, max_iter=60, bound_scale=0.25)
        res = calibrate(cfg, synthetic_quotes, cache)
        bounds = np.array(cfg.bounds())
        assert np.all(res.ell_star >= bounds[:, 0] - 1e-15)
        assert np.all(res.ell_star <= bounds[:, 1] + 1e-15)

    def test_restarts_keep_best(self, cache, synthetic_quotes):
        cfg0 = CalibrationConfig(n_mc=8000, max_iter=40, n_restarts=0)
        cfg2 = CalibrationConfig(n_mc=8000, max_iter=40, n_restarts=2)
        best0 = calibrate(cfg0, synthetic_quotes, cache).loss
        best2 = calibrate(cfg2, synthetic_quotes, cache).loss
        assert best2 <= best0 + 1e-18

    def test_empty_quotes_rejected(self, cache):
        with pytest.raises(ValueError):
            calibrate(CalibrationConfig(n_mc=8000), [], cache)


class TestSmileCalibrate:
    def test_no_worse_than_joint_on_subset(self, cache, synthetic_quotes):
        # warm starting from the joint solution guarantees the smile fit
        # can only improve on the joint fit over its own quotes
        cfg = CalibrationConfig(n_mc=8000, max_iter=150)
        joint = calibrate(cfg, synthetic_quotes, cache)
        for t in (0.1, 1.6):
            smile = smile_calibrate(
                cfg, synthetic_quotes, cache, t, extra_starts=[joint.ell_star]
            )
            w = weights_inverse_vega(
                [q for q in synthetic_quotes if q.maturity == t], 100.0, 0.0
            )
            ev = LossEvaluator(
                [q for q in synthetic_quotes if q.maturity == t], cache, 100.0, 0.0, w
            )
            assert ev.loss(smile.ell_star) <= ev.loss(joint.ell_star) + 1e-12

    def test_unknown_maturity(self, cache, synthetic_quotes):
        cfg = CalibrationConfig(n_mc=8000)
        with pytest.raises(ValueError):
            smile_calibrate(cfg, synthetic_quotes, cache, 0.77)


class TestConfig:
    def test_bounds_follow_factorial_decay(self):
        cfg = CalibrationConfig(n_mc=8000, bound_scale=5.0)
        b = np.array(cfg.bounds())
        assert b[0, 1] == 5.0  # empty word
        assert b[3, 1] == 2.5  # any length-2 word
        assert b[-1, 1] == pytest.approx(5.0 / 6.0)  # length-3 words

    def test_validation(self):
        with pytest.raises(ValueError):
            CalibrationConfig(n_mc=10)
        with pytest.raises(ValueError):
            CalibrationConfig(n_mc=8000, sig_level=5)

    def test_initial_coefficients_use_atm(self, synthetic_quotes):
        ell0 = initial_coefficients(synthetic_quotes, 100.0, 0.0, 15)
        atm = [q for q in synthetic_quotes if q.strike == 100.0]
        want = market_ivs(atm, 100.0, 0.0).mean()
        assert ell0[0] == pytest.approx(want)
        assert np.all(ell0[1:] == 0.0)
