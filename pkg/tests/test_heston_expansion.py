import numpy as np
import pytest

from sigvol.heston_expansion import (
    ExpansionCalibrationError,
    SurfaceSlice,
    atm_slope,
    calibrate_asv,
    expansion_surface,
    iv_atm_term,
    iv_long_atm,
    iv_short_maturity,
    long_atm_coefficients,
    slices_from_formulas,
)
from sigvol.process_sim import HestonParams


UNCORR = HestonParams(x0=0.04, kappa=3.0, theta=0.09, nu=0.3, rho=0.0)
CORR = HestonParams(x0=0.04, kappa=3.0, theta=0.09, nu=0.3, rho=-0.5)


class TestShortMaturityFormula:
    def test_atm_returns_sigma0(self):
        assert iv_short_maturity(CORR, 0.2, 0.0) == 0.2

    def test_zero_rho_is_even(self):
        xs = np.array([-0.1, -0.05, 0.05, 0.1])
        vals = iv_short_maturity(UNCORR, 0.2, xs)
        assert np.allclose(vals, vals[::-1])

    def test_reference_value(self):
        # sigma0=0.2, nu=0.3, rho=-0.5, x-k=0.1:
        # 0.2 - (-0.15/0.8)(0.1) + (0.09/0.192)(0.01) = 0.2234375
        assert iv_short_maturity(CORR, 0.2, 0.1) == pytest.approx(0.2234375, abs=1e-12)


class TestAtmTermFormula:
    def test_zero_maturity(self):
        assert iv_atm_term(CORR, 0.2, 0.0) == 0.2

    def test_stationary_uncorrelated_slope(self):
        # sigma0^2 = theta and rho = 0 leave only the -nu^2 term
        p = HestonParams(x0=0.09, kappa=2.0, theta=0.09, nu=0.3, rho=0.0)
        assert atm_slope(p, 0.3) == pytest.approx(-(0.3**2) / (24 * 0.3))

    def test_reference_slope(self):
        # (-6*3*(0.04-0.09) - 0.09) / (24*0.2) = 0.16875
        assert atm_slope(UNCORR, 0.2) == pytest.approx(0.16875, abs=1e-12)


class TestLongAtmFormula:
    def test_infinite_maturity_keeps_intercept(self):
        b, _ = long_atm_coefficients(CORR, 0.2)
        assert iv_long_atm(CORR, 0.2, 1e12) == pytest.approx(b, abs=1e-10)

    def test_zero_vol_of_vol(self):
        p = HestonParams(x0=0.04, kappa=3.0, theta=0.09, nu=1e-300, rho=0.0)
        t = 2.5
        want = np.sqrt(0.09) + (0.04 - 0.09) / (2 * 3.0 * np.sqrt(0.09) * t)
        assert iv_long_atm(p, 0.2, t) == pytest.approx(want, abs=1e-12)

    def test_reference_intercept(self):
        b, _ = long_atm_coefficients(UNCORR, 0.2)
        assert b == pytest.approx(0.3 * (1 - 0.09 / 288), abs=1e-12)


class TestRoundTrip:
    @pytest.mark.parametrize("use_curvature", [True, False])
    def test_exact_recovery_random_feller_sets(self, use_curvature):
        rng = np.random.default_rng(77)
        for _ in range(25):
            kappa = rng.uniform(0.5, 5.0)
            theta = rng.uniform(0.04, 0.5)
            sigma0 = rng.uniform(0.1, 0.8)
            rho = rng.uniform(-0.9, 0.9)
            nu = rng.uniform(0.05, 1.0) * np.sqrt(2 * kappa * theta)
            p = HestonParams(x0=sigma0**2, kappa=kappa, theta=theta, nu=nu, rho=rho)
            sl = slices_from_formulas(
                p, sigma0,
                atm_ts=[0.01, 0.03, 0.05, 0.08],
                smile_xs=[-0.1, -0.05, 0.0, 0.05, 0.1],
                long_ts=[2.0, 4.0, 8.0],
            )
            fit = calibrate_asv(sl, use_smile_curvature=use_curvature)
            truth = np.array([sigma0, nu, kappa, theta, rho])
            got = np.array(
                [fit.sigma0, fit.params.nu, fit.params.kappa, fit.params.theta, fit.params.rho]
            )
            rel = np.abs(got - truth) / np.maximum(np.abs(truth), 1e-12)
            assert rel.max() < 1e-6

    def test_smile_slope_sign_tracks_rho(self):
        for rho in (-0.7, -0.2, 0.3, 0.8):
            p = HestonParams(x0=0.04, kappa=2.0, theta=0.08, nu=0.25, rho=rho)
            sl = slices_from_formulas(
                p, 0.2, [0.02, 0.05, 0.1], [-0.08, -0.04, 0.0, 0.04, 0.08], [2.0, 5.0]
            )
            fit = calibrate_asv(sl)
            assert np.sign(fit.diagnostics["smile_linear_coef"]) == -np.sign(rho)

    def test_atm_intercept_is_sigma0(self):
        for sigma0 in (0.1, 0.25, 0.5):
            p = HestonParams(x0=sigma0**2, kappa=1.7, theta=0.2, nu=0.4, rho=0.1)
            sl = slices_from_formulas(
                p, sigma0, [0.01, 0.04, 0.09], [-0.05, 0.0, 0.05], [3.0, 6.0]
            )
            fit = calibrate_asv(sl)
            assert fit.sigma0 == pytest.approx(sigma0, rel=1e-10)


class TestCalibrationErrors:
    def test_collinear_atm_maturities(self):
        sl = SurfaceSlice(
            atm_term_structure=((0.1, 0.2), (0.1, 0.21)),
            short_smile=((-0.05, 0.21), (0.0, 0.2), (0.05, 0.21)),
            long_atm=((0.5, 0.28), (0.25, 0.29)),
        )
        with pytest.raises(ExpansionCalibrationError, match="ATM term structure"):
            calibrate_asv(sl)

    def test_single_strike_smile(self):
        sl = SurfaceSlice(
            atm_term_structure=((0.05, 0.2), (0.1, 0.21)),
            short_smile=((0.0, 0.2),),
            long_atm=((0.5, 0.28), (0.25, 0.29)),
        )
        with pytest.raises(ExpansionCalibrationError, match="short smile"):
            calibrate_asv(sl)

    def test_empty_regions_rejected(self):
        with pytest.raises(ValueError):
            SurfaceSlice((), ((0.0, 0.2),), ((0.5, 0.3),))


def test_two_point_smile_uses_term_structure_route():
    p = UNCORR
    sl = slices_from_formulas(p, 0.2, [0.01, 0.05, 0.1], [-0.05, 0.05], [2.0, 4.0, 8.0])
    fit = calibrate_asv(sl)
    assert fit.diagnostics["route"] == "term-structure"
    assert fit.params.nu == pytest.approx(0.3, rel=1e-6)


def test_expansion_surface_shape():
    rows = expansion_surface(UNCORR, 0.2, 100.0, 0.0, [0.1, 0.6], [90, 100, 110])
    assert len(rows) == 6
    atm_short = [iv for t, k, iv in rows if t == 0.1 and k == 100]
    assert atm_short[0] == pytest.approx(iv_short_maturity(UNCORR, 0.2, 0.0))
