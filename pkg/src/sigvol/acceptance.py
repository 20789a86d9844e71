"""Desk-scale acceptance battery.

Twelve graded checks cover the algebra golden values, the simulators, the
pricing features, and the three end-to-end calibration experiments.  Each
check returns a CriterionResult and prints one pass/fail line; the whole
battery is runnable through ``sigvol selftest`` or pytest.

Heavy artifacts (markets, feature caches, calibrations) are built lazily
and shared across checks; the per-criterion timing covers the check
itself, with shared builds reported separately as they happen.

The loss thresholds of the end-to-end checks are evaluated on the raw
inverse-Vega loss sum(resid^2 / vega), the scale in which they are
mutually coherent with the implied-vol error thresholds.  The calibration
itself minimizes the same loss up to its count normalization (an overall
scaling, so the minimizer is unchanged); both numbers are reported.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from itertools import product as _iterprod
from typing import Dict, List, Optional, Sequence

import numpy as np

from .heston_expansion import calibrate_asv, slices_from_formulas
from .pricing import bs_price, bs_vega, mc_call_price
from .process_sim import (
    HestonParams,
    euler_cir,
    simulate_brownian,
    volterra_fbm,
)
from .sig_model import q_matrix, sig_vol_path
from .signature_engine import (
    SampledPath,
    signature,
    signature_stream,
    time_augment,
)
from .tensor_algebra import (
    concat_product,
    get_labeling,
    group_like_defect,
    shuffle_words,
)
from . import experiments as xp


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number:2d} ({self.name}): {self.detail} [{self.seconds:.1f}s]"


class AcceptanceContext:
    """Lazy shared artifacts for the battery."""

    def __init__(self, out_dir: Optional[str] = None, verbose: bool = True):
        self.out_dir = out_dir or tempfile.mkdtemp(prefix="sigvol_accept_")
        self.verbose = verbose
        self._store: Dict[str, object] = {}

    def _log(self, msg: str) -> None:
        if self.verbose:
            print(f"  [build] {msg}", flush=True)

    def _memo(self, key: str, builder):
        if key not in self._store:
            t0 = time.time()
            self._store[key] = builder()
            self._log(f"{key} ready in {time.time() - t0:.1f}s")
        return self._store[key]

    # -- shared heavy artifacts -------------------------------------------

    def experiment(self, name: str):
        """(spec, quotes, ivs, cache) for one canonical experiment."""

        def build():
            spec = xp.CANONICAL_EXPERIMENTS[name]()
            quotes, ivs = xp.generate_market(spec)
            subdir = f"{self.out_dir}/{name}"
            xp.write_market(subdir, spec, quotes, ivs)
            cache = xp.features_for(spec, subdir)
            return spec, quotes, ivs, cache

        return self._memo(f"experiment:{name}", build)

    def joint_calibration(self, name: str):
        def build():
            spec, quotes, ivs, cache = self.experiment(name)
            results = xp.run_sig_calibration(
                spec, quotes, cache, per_smile=(name == "uncorrelated_heston"),
                out_dir=f"{self.out_dir}/{name}",
            )
            return results

        return self._memo(f"calibration:{name}", build)


def _raw_vega_loss(result, s0: float, r: float) -> float:
    """sum(resid^2 / vega) over the fitted contracts (unnormalized weights)."""
    total = 0.0
    for c in result.per_contract:
        vega = bs_vega(s0, c["strike"], c["maturity"], r, c["market_iv"])
        total += (c["market_price"] - c["model_price"]) ** 2 / vega
    return total


# ---------------------------------------------------------------------------
# criteria


def criterion_1(ctx) -> CriterionResult:
    t0 = time.time()
    ok3 = shuffle_words((1, 2), (3,)) == {
        (1, 3, 2): 1, (3, 1, 2): 1, (1, 2, 3): 1,
    }
    ok7 = shuffle_words((1, 2, 3), (2, 1)) == {
        (1, 2, 3, 2, 1): 1, (1, 2, 1, 2, 3): 1, (1, 2, 2, 1, 3): 2,
        (1, 2, 2, 3, 1): 2, (2, 1, 1, 2, 3): 2, (2, 1, 2, 1, 3): 1,
        (2, 1, 2, 3, 1): 1,
    }
    el = time.time() - t0
    passed = ok3 and ok7 and el < 1.0
    return CriterionResult(1, "shuffle golden values", passed,
                           f"3-term {ok3}, 7-term {ok7}", el)


def criterion_2(ctx) -> CriterionResult:
    t0 = time.time()
    t = np.linspace(0.0, 5.0, 10_001)
    path = SampledPath(t, np.column_stack([3 + t, (3 + t) ** 2]))
    sig = signature(path, 3)
    want = np.array([1.0, 5.0, 55.0, 12.5, 475 / 3, 350 / 3, 3025 / 2, 125 / 6])
    rel = float(np.max(np.abs(sig.coeffs[:8] - want) / np.abs(want)))

    vals = np.array([0.0, 0.7, -0.2, 1.3])
    one_d = signature(SampledPath(np.array([0.0, 0.3, 0.55, 1.0]), vals), 6)
    delta = 1.3
    exact = max(
        abs(one_d.coeffs[k] - delta**k / math.factorial(k))
        / max(1.0, delta**k / math.factorial(k))
        for k in range(7)
    )
    el = time.time() - t0
    passed = rel <= 1e-3 and exact <= 1e-14 and el < 5.0
    return CriterionResult(
        2, "signature golden values", passed,
        f"quadratic-path rel err {rel:.2e} (<=1e-3), 1-d closed form {exact:.2e} (<=1e-14)",
        el,
    )


def criterion_3(ctx) -> CriterionResult:
    t0 = time.time()
    rng = np.random.default_rng(20240815)
    worst_chen = 0.0
    worst_defect = 0.0
    worst_time = 0.0
    n_paths = 0
    for i in range(200):
        d = int(rng.integers(1, 4))
        cap = int(rng.integers(2, 6))
        m = int(rng.integers(2, 12))
        t = np.sort(np.concatenate([[0.0, 1.0], rng.uniform(0, 1, m - 1)]))
        vals = np.cumsum(rng.normal(0, 0.3, (m + 1, d)), axis=0)
        p = SampledPath(t, vals)
        stream = signature_stream(p, cap)
        full = stream.sigs[-1]
        k = int(rng.integers(1, m))
        suffix = signature(SampledPath(t[k:], vals[k:]), cap)
        recomposed = concat_product(stream.sigs[k], suffix)
        worst_chen = max(
            worst_chen,
            float(np.max(np.abs(recomposed.coeffs - full.coeffs)
                         / (1.0 + np.abs(full.coeffs)))),
        )
        n_paths += 1
    # group-like defect at combined degree 6 needs cap-6 signatures
    for i in range(40):
        d = int(rng.integers(1, 3))
        m = int(rng.integers(2, 10))
        t = np.linspace(0, 1, m + 1)
        vals = np.cumsum(rng.normal(0, 0.3, (m + 1, d)), axis=0)
        sig6 = signature(SampledPath(t, vals), 6)
        worst_defect = max(worst_defect, group_like_defect(sig6, 6))
    # shuffle multiplicity counts, exhaustive on short words
    words = [w for n in range(4) for w in _iterprod((0, 1, 2), repeat=n)]
    counts_ok = all(
        sum(shuffle_words(a, b).values()) == math.comb(len(a) + len(b), len(a))
        for a in words for b in words
    )
    # time-word coefficients of augmented streams
    for i in range(20):
        m = int(rng.integers(3, 15))
        t = np.sort(np.concatenate([[0.0], rng.uniform(0, 1, m)]))
        x = np.cumsum(rng.normal(0, 0.2, m + 1))
        stream = signature_stream(time_augment(SampledPath(t, x)), 4)
        lab = get_labeling(2, 4)
        for j, tj in enumerate(t):
            for k in range(1, 5):
                got = stream.sigs[j].coeffs[lab.label((0,) * k)]
                worst_time = max(worst_time, abs(got - tj**k / math.factorial(k)))
    el = time.time() - t0
    passed = (
        worst_chen <= 1e-12 and worst_defect < 1e-10 and counts_ok
        and worst_time <= 1e-12 and el < 60.0
    )
    return CriterionResult(
        3, "algebraic property suite", passed,
        f"chen {worst_chen:.1e} (<=1e-12), defect {worst_defect:.1e} (<1e-10), "
        f"counts {counts_ok}, time-words {worst_time:.1e} (<=1e-12)", el,
    )


def criterion_4(ctx) -> CriterionResult:
    spec, quotes, ivs, cache = ctx.experiment("uncorrelated_heston")
    t0 = time.time()
    worst = 0.0
    for c in (0.1, 0.2, 0.4):
        ell = np.zeros((1, cache.dim))
        ell[0, 0] = c
        for t in spec.maturities:
            st = cache.terminal_prices(ell, t, spec.s0)[:, 0]
            for k in spec.strikes:
                mc, se = mc_call_price(st, k, spec.r, t)
                z = abs(mc - bs_price(spec.s0, k, t, spec.r, c)) / se
                worst = max(worst, z)
    el = time.time() - t0
    passed = worst <= 3.0 and el < 120.0
    return CriterionResult(
        4, "Black-Scholes embedding", passed,
        f"worst |z| over 60 contract checks {worst:.2f} (<=3)", el,
    )


def criterion_5(ctx) -> CriterionResult:
    spec, quotes, ivs, cache = ctx.experiment("uncorrelated_heston")
    t0 = time.time()
    rng = np.random.default_rng(20240816)
    # dedicated small build retaining full streams for the quadrature oracle
    batch = simulate_brownian(4, spec.n_steps, spec.horizon, seed=777)
    x = euler_cir(spec.primary, batch)
    lab3 = get_labeling(2, 3)
    worst_quad = 0.0
    for p in range(4):
        path = time_augment(SampledPath(batch.times, x[p]))
        stream = signature_stream(path, 3)
        sig7 = signature_stream(path, 7)
        for t_mat in spec.maturities:
            k = int(round(t_mat / batch.dt))
            q = q_matrix(sig7.sigs[k], lab3)
            sub_t = batch.times[: k + 1]
            for _ in range(5):
                ell = rng.normal(0, 0.5, 15)
                sigma = sig_vol_path(ell, stream)[: k + 1]
                lhs = ell @ q @ ell
                resid = abs(lhs + 0.5 * np.trapezoid(sigma**2, sub_t))
                worst_quad = max(worst_quad, resid / (2e-3 * (1 + abs(lhs))))
    # PSD of -Q across a sample of the production cache
    sample = rng.choice(cache.n_paths, size=256, replace=False)
    worst_eig = 0.0
    for t_mat in spec.maturities:
        for p in sample:
            a = cache.neg_q(int(p), t_mat)
            evals = np.linalg.eigvalsh(-a)
            worst_eig = max(worst_eig, evals.max() / (1e-9 * np.abs(a).max()))
    el = time.time() - t0
    passed = worst_quad <= 1.0 and worst_eig <= 1.0 and el < 120.0
    return CriterionResult(
        5, "Q-matrix consistency", passed,
        f"quadrature residual ratio {worst_quad:.3f} (<=1), "
        f"PSD eigenvalue ratio {worst_eig:.3f} (<=1)", el,
    )


def criterion_6(ctx) -> CriterionResult:
    t0 = time.time()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(25):
        kappa = rng.uniform(0.5, 5.0)
        theta = rng.uniform(0.04, 0.5)
        sigma0 = rng.uniform(0.1, 0.8)
        rho = rng.uniform(-0.9, 0.9)
        nu = rng.uniform(0.05, 1.0) * np.sqrt(2 * kappa * theta)
        p = HestonParams(x0=sigma0**2, kappa=kappa, theta=theta, nu=nu, rho=rho)
        slices = slices_from_formulas(
            p, sigma0, [0.01, 0.03, 0.05, 0.08],
            [-0.1, -0.05, 0.0, 0.05, 0.1], [2.0, 4.0, 8.0],
        )
        fit = calibrate_asv(slices)
        truth = np.array([sigma0, nu, kappa, theta, rho])
        got = np.array([fit.sigma0, fit.params.nu, fit.params.kappa,
                        fit.params.theta, fit.params.rho])
        worst = max(worst, float(np.max(np.abs(got - truth) / np.maximum(np.abs(truth), 1e-12))))
    el = time.time() - t0
    passed = worst <= 1e-6 and el < 10.0
    return CriterionResult(
        6, "expansion round trip", passed,
        f"worst relative recovery error {worst:.2e} (<=1e-6) over 25 Feller sets", el,
    )


EXPANSION_TOLERANCES = {"sigma0": 0.005, "nu": 0.05, "kappa": 0.5, "theta": 0.01, "rho": 0.05}


def criterion_7(ctx) -> CriterionResult:
    t0 = time.time()
    details = []
    all_ok = True
    for label, spec in (("table1", xp.table1_expansion_spec()),
                        ("table2", xp.table2_expansion_spec())):
        surface = xp.generate_expansion_surface(spec)
        fit = xp.run_expansion_calibration(
            surface, spec.s0, spec.r,
            atm_window=spec.atm_window,
            smile_maturity=spec.smile_maturity,
            long_min_maturity=spec.long_min_maturity,
            out_dir=f"{ctx.out_dir}/expansion_{label}",
        )
        truth = {
            "sigma0": np.sqrt(spec.market.x0), "nu": spec.market.nu,
            "kappa": spec.market.kappa, "theta": spec.market.theta,
            "rho": spec.market.rho,
        }
        got = {
            "sigma0": fit.sigma0, "nu": fit.params.nu, "kappa": fit.params.kappa,
            "theta": fit.params.theta, "rho": fit.params.rho,
        }
        parts = []
        for key, tol in EXPANSION_TOLERANCES.items():
            err = got[key] - truth[key]
            ok = abs(err) <= tol
            all_ok &= ok
            parts.append(f"{key} {err:+.4f}{'' if ok else '!'}")
        details.append(f"{label}: " + " ".join(parts))
    el = time.time() - t0
    return CriterionResult(
        7, "expansion on simulated markets", all_ok,
        "; ".join(details) + " (!: outside tolerance)", el,
    )


def criterion_8(ctx) -> CriterionResult:
    spec, quotes, ivs, cache = ctx.experiment("uncorrelated_heston")
    results = ctx.joint_calibration("uncorrelated_heston")
    t0 = time.time()
    joint = results["joint"]
    raw = _raw_vega_loss(joint, spec.s0, spec.r)
    max_err = joint.max_iv_error
    el = time.time() - t0
    passed = raw <= 1e-3 and max_err <= 0.01
    return CriterionResult(
        8, "uncorrelated end-to-end", passed,
        f"loss {raw:.3e} (<=1e-3, count-normalized {joint.loss:.3e}), "
        f"max |IV err| {max_err:.4f} (<=0.01), {joint.n_iterations} iterations", el,
    )


def criterion_9(ctx) -> CriterionResult:
    spec, quotes, ivs, cache = ctx.experiment("correlated_heston")
    results = ctx.joint_calibration("correlated_heston")
    t0 = time.time()
    joint = results["joint"]
    raw = _raw_vega_loss(joint, spec.s0, spec.r)
    max_err = joint.max_iv_error
    el = time.time() - t0
    passed = raw <= 5e-3 and max_err <= 0.015
    return CriterionResult(
        9, "correlated end-to-end", passed,
        f"loss {raw:.3e} (<=5e-3, count-normalized {joint.loss:.3e}), "
        f"max |IV err| {max_err:.4f} (<=0.015), {joint.n_iterations} iterations", el,
    )


def criterion_10(ctx) -> CriterionResult:
    spec, quotes, ivs, cache = ctx.experiment("rough_bergomi")
    results = ctx.joint_calibration("rough_bergomi")
    t0 = time.time()
    joint = results["joint"]
    max_err = joint.max_iv_error
    ell0 = float(joint.ell_star[0])
    el = time.time() - t0
    passed = max_err <= 0.01 and 0.17 <= ell0 <= 0.23
    return CriterionResult(
        10, "rough Bergomi end-to-end", passed,
        f"max |IV err| {max_err:.4f} (<=0.01), ell_empty {ell0:.4f} (in [0.17, 0.23])", el,
    )


def criterion_11(ctx) -> CriterionResult:
    spec, quotes, ivs, cache = ctx.experiment("uncorrelated_heston")
    results = ctx.joint_calibration("uncorrelated_heston")
    t0 = time.time()
    parts = []
    passed = True
    for t in spec.maturities:
        res = results[f"smile_{t:g}"]
        ok = res.max_iv_error <= 0.005
        passed &= ok
        parts.append(f"T={t:g}: {res.max_iv_error:.5f}{'' if ok else '!'}")
    el = time.time() - t0
    return CriterionResult(
        11, "per-smile calibration", passed,
        "max |IV err| per maturity (<=0.005): " + ", ".join(parts), el,
    )


def criterion_12(ctx) -> CriterionResult:
    t0 = time.time()
    n = 100_000
    batch = simulate_brownian(n, 160, 1.6, seed=31)
    p = HestonParams(x0=0.1, kappa=2.0, theta=0.15, nu=0.2)
    x_T = euler_cir(p, batch)[:, -1]
    exact = p.theta + (p.x0 - p.theta) * np.exp(-p.kappa * 1.6)
    se = x_T.std(ddof=1) / np.sqrt(n)
    cir_z = abs(x_T.mean() - exact) / se
    ratios = {}
    for h in (0.1, 0.3, 0.5):
        wh = volterra_fbm(h, batch)
        ratios[h] = wh[:, -1].var() / 1.6 ** (2 * h)
    w_path = np.concatenate([np.zeros((n, 1)), np.cumsum(batch.dW, axis=1)], axis=1)
    bitwise = np.array_equal(volterra_fbm(0.5, batch), w_path)
    el = time.time() - t0
    passed = (
        cir_z <= 3.0
        and all(0.97 <= r <= 1.03 for r in ratios.values())
        and bitwise and el < 120.0
    )
    ratio_txt = ", ".join(f"H={h}: {r:.4f}" for h, r in ratios.items())
    return CriterionResult(
        12, "CIR and fractional drivers", passed,
        f"CIR mean z {cir_z:.2f} (<=3), var ratios [{ratio_txt}] (in [0.97,1.03]), "
        f"H=0.5 bitwise {bitwise}", el,
    )


ALL_CRITERIA = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4,
    5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8,
    9: criterion_9, 10: criterion_10, 11: criterion_11, 12: criterion_12,
}


def run_acceptance(criteria: Optional[Sequence[int]] = None,
                   out_dir: Optional[str] = None,
                   keep_artifacts: bool = False,
                   ctx: Optional[AcceptanceContext] = None) -> List[CriterionResult]:
    """Run the requested criteria (default all), printing one line each."""
    numbers = sorted(criteria) if criteria else sorted(ALL_CRITERIA)
    bad = [n for n in numbers if n not in ALL_CRITERIA]
    if bad:
        raise ValueError(f"unknown criterion numbers {bad}")
    ctx = ctx or AcceptanceContext(out_dir=out_dir)
    results = []
    for n in numbers:
        res = ALL_CRITERIA[n](ctx)
        print(res.line(), flush=True)
        results.append(res)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed", flush=True)
    return results
