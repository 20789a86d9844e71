import json

import numpy as np
import pytest

from sigvol.experiments import (
    ExperimentSpec,
    ExpansionSurfaceSpec,
    build_slices,
    correlated_heston_experiment,
    features_for,
    generate_expansion_surface,
    generate_market,
    load_quotes,
    load_surface,
    rough_bergomi_experiment,
    run_expansion_calibration,
    run_sig_calibration,
    uncorrelated_heston_experiment,
    write_comparison,
    write_market,
)
from sigvol.heston_expansion import slices_from_formulas
from sigvol.process_sim import HestonParams
from sigvol.sig_model import CacheMismatchError


def tiny_spec(**overrides) -> ExperimentSpec:
    base = dict(
        name="tiny",
        market_kind="heston",
        market_heston=HestonParams(x0=0.04, kappa=3.0, theta=0.09, nu=0.3, rho=0.0),
        primary=HestonParams(x0=0.1, kappa=2.0, theta=0.15, nu=0.2, rho=0.0),
        maturities=(0.1, 0.2),
        strikes=(95.0, 100.0, 105.0),
        steps_per_year=60,
        n_mc_market=3000,
        n_mc_calib=3000,
        seed_market=5,
        seed_calib=6,
        max_iter=60,
    )
    base.update(overrides)
    return ExperimentSpec(**base)


class TestSpecs:
    def test_canonical_paper_profiles(self):
        for factory in (
            uncorrelated_heston_experiment,
            correlated_heston_experiment,
            rough_bergomi_experiment,
        ):
            desk = factory()
            paper = factory(paper_scale=True)
            assert desk.n_mc_market == 100_000 and paper.n_mc_market == 800_000
            assert desk.seed_market != desk.seed_calib
            assert desk.maturities == (0.1, 0.6, 1.1, 1.6)
            assert len(desk.strikes) == 5
            assert desk.r == 0.0 and desk.s0 == 100.0

    def test_correlated_primary_parameters(self):
        spec = correlated_heston_experiment()
        assert spec.primary == HestonParams(x0=0.25, kappa=3.3, theta=0.15, nu=0.35, rho=-0.5)
        assert spec.market_heston.rho == -0.5

    def test_same_seed_rejected(self):
        with pytest.raises(ValueError, match="seeds"):
            tiny_spec(seed_market=7, seed_calib=7)

    def test_grid_derivation(self):
        spec = uncorrelated_heston_experiment()
        assert spec.horizon == 1.6
        assert spec.n_steps == 480


class TestMarketGeneration:
    def test_quote_count_and_files(self, tmp_path):
        spec = tiny_spec()
        quotes, ivs = generate_market(spec)
        assert len(quotes) == 6 and len(ivs) == 6
        write_market(tmp_path, spec, quotes, ivs)
        back = load_quotes(tmp_path / "quotes.csv")
        assert [(q.maturity, q.strike) for q in back] == [
            (q.maturity, q.strike) for q in quotes
        ]
        assert [q.price for q in back] == pytest.approx([q.price for q in quotes])
        surf = load_surface(tmp_path / "market_ivs.csv")
        assert len(surf) == 6
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed_market"] == 5

    def test_deterministic(self):
        spec = tiny_spec()
        q1, _ = generate_market(spec)
        q2, _ = generate_market(spec)
        assert [q.price for q in q1] == [q.price for q in q2]


class TestFeaturesForCaching:
    def test_build_persist_reload(self, tmp_path):
        spec = tiny_spec()
        c1 = features_for(spec, str(tmp_path))
        assert (tmp_path / "features.bin").exists()
        c2 = features_for(spec, str(tmp_path))  # loads from disk
        for a, b in zip(c1.u_packed, c2.u_packed):
            assert np.array_equal(a, b)

    def test_mismatch_refuses_silent_resimulation(self, tmp_path):
        features_for(tiny_spec(), str(tmp_path))
        changed = tiny_spec(seed_calib=77)
        with pytest.raises(CacheMismatchError, match="seed"):
            features_for(changed, str(tmp_path))


class TestSigCalibrationRun:
    def test_end_to_end_artifacts(self, tmp_path):
        spec = tiny_spec()
        quotes, ivs = generate_market(spec)
        write_market(tmp_path, spec, quotes, ivs)
        cache = features_for(spec, str(tmp_path))
        results = run_sig_calibration(spec, quotes, cache, per_smile=True,
                                      out_dir=str(tmp_path))
        assert (tmp_path / "sig_report.json").exists()
        assert (tmp_path / "sig_iv_table.csv").exists()
        assert (tmp_path / "smile_T0.1.csv").exists()
        report = json.loads((tmp_path / "sig_report.json").read_text())
        assert set(report) == {"joint", "smile_0.1", "smile_0.2"}
        # per-smile no worse than joint on its own quotes
        for t in (0.1, 0.2):
            joint_err = max(
                c["abs_iv_error"]
                for c in results["joint"].per_contract
                if c["maturity"] == t
            )
            assert results[f"smile_{t:g}"].max_iv_error <= joint_err + 1e-9


class TestExpansionPipeline:
    def test_surface_and_calibration_roundtrip_formulas(self, tmp_path):
        # formula-generated surface -> exact recovery through build_slices;
        # the smile grid avoids x = 0, whose strike would double as an ATM
        # row carrying the (different) short-smile formula value
        p = HestonParams(x0=0.04, kappa=3.0, theta=0.09, nu=0.3, rho=-0.5)
        sl = slices_from_formulas(
            p, 0.2, [0.02, 0.05, 0.1], [-0.08, -0.04, 0.04, 0.08], [2.0, 5.0, 10.0]
        )
        rows = [(t, 100.0, iv) for t, iv in sl.atm_term_structure]
        rows += [(0.05, 100.0 * float(np.exp(-x)), iv) for x, iv in sl.short_smile]
        rows += [(1.0 / u, 100.0, iv) for u, iv in sl.long_atm]
        fit = run_expansion_calibration(
            rows, 100.0, 0.0, atm_window=(0.0, 0.12), smile_maturity=0.05,
            long_min_maturity=1.5, out_dir=str(tmp_path),
        )
        assert fit.params.nu == pytest.approx(0.3, rel=1e-6)
        assert fit.params.rho == pytest.approx(-0.5, rel=1e-6)
        report = json.loads((tmp_path / "expansion_report.json").read_text())
        assert report["kappa"] == pytest.approx(3.0, rel=1e-6)

    def test_missing_long_maturities_error(self):
        rows = [(0.05, 100.0, 0.2), (0.05, 95.0, 0.21), (0.05, 105.0, 0.21),
                (0.1, 100.0, 0.21)]
        with pytest.raises(ValueError, match="ATM maturities at or beyond"):
            build_slices(rows, 100.0, 0.0)

    def test_generate_expansion_surface_small(self):
        spec = ExpansionSurfaceSpec(
            name="t",
            market=HestonParams(x0=0.04, kappa=3.0, theta=0.09, nu=0.3, rho=0.0),
            n_mc=2000,
            atm_maturities=(0.05, 0.1),
            smile_maturity=0.1,
            smile_strikes=(95.0, 100.0, 105.0),
            long_maturities=(2.0, 3.0),
        )
        rows = generate_expansion_surface(spec)
        # 2 ATM + 2 long + 3 smile strikes
        assert len(rows) == 7
        ts = {t for t, _, _ in rows}
        assert ts == {0.05, 0.1, 2.0, 3.0}


class TestComparison:
    def test_comparison_columns(self, tmp_path):
        market = [(0.1, 100.0, 0.21), (0.1, 105.0, 0.22)]
        sig = [(0.1, 100.0, 0.215), (0.1, 105.0, 0.218)]
        exp = [(0.1, 100.0, 0.209), (0.1, 105.0, 0.221)]
        path = write_comparison(str(tmp_path), market, sig, exp)
        lines = open(path).read().splitlines()
        assert lines[0] == "maturity,strike,iv_sig,iv_exp,iv_mkt,e_sig,e_exp"
        first = lines[1].split(",")
        assert float(first[5]) == pytest.approx(0.005)
        assert float(first[6]) == pytest.approx(0.001)

    def test_expansion_columns_omitted(self, tmp_path):
        market = [(0.1, 100.0, 0.21)]
        sig = [(0.1, 100.0, 0.215)]
        path = write_comparison(str(tmp_path), market, sig, None)
        lines = open(path).read().splitlines()
        assert lines[0] == "maturity,strike,iv_sig,iv_mkt,e_sig"
