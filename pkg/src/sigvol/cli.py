"""Batch command-line front end.

Subcommands::

    generate-market       simulate a synthetic market, write quotes + IV surface
    calibrate-sig         fit the signature model to a quotes file
    calibrate-expansion   fit the second-order Heston expansion to an IV surface
    report                join per-contract IV tables into comparison CSVs
    selftest              run the acceptance battery, one pass/fail line each

Configuration is an INI file mirroring the experiment spec; every value
has a default from the named canonical experiment, so a config may be as
small as two lines.  See README for the schema and the CSV column
contracts.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import replace
from typing import Optional, Tuple

from .experiments import (
    CANONICAL_EXPERIMENTS,
    ExperimentSpec,
    expansion_iv_table,
    features_for,
    generate_expansion_surface,
    generate_market,
    load_quotes,
    load_surface,
    run_expansion_calibration,
    run_sig_calibration,
    table1_expansion_spec,
    table2_expansion_spec,
    write_comparison,
    write_market,
)
from .process_sim import HestonParams, RoughBergomiParams


def _parse_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def spec_from_config(path: Optional[str], paper_scale: bool = False,
                     n_paths: Optional[int] = None,
                     seed: Optional[int] = None) -> ExperimentSpec:
    """Build an experiment spec from an INI config plus CLI overrides."""
    cfg = configparser.ConfigParser()
    name = "uncorrelated_heston"
    if path:
        if not cfg.read(path):
            raise FileNotFoundError(f"config file {path} not found")
        name = cfg.get("experiment", "name", fallback=name)
        paper_scale = cfg.getboolean("experiment", "paper_scale", fallback=paper_scale)
    if name not in CANONICAL_EXPERIMENTS:
        raise ValueError(
            f"unknown experiment {name!r}; choose from {sorted(CANONICAL_EXPERIMENTS)}"
        )
    spec = CANONICAL_EXPERIMENTS[name](paper_scale=paper_scale)

    def heston_from(section, fallback: HestonParams) -> HestonParams:
        return HestonParams(
            x0=cfg.getfloat(section, "x0", fallback=fallback.x0),
            kappa=cfg.getfloat(section, "kappa", fallback=fallback.kappa),
            theta=cfg.getfloat(section, "theta", fallback=fallback.theta),
            nu=cfg.getfloat(section, "nu", fallback=fallback.nu),
            rho=cfg.getfloat(section, "rho", fallback=fallback.rho),
        )

    if cfg.has_section("market"):
        kind = cfg.get("market", "kind", fallback=spec.market_kind)
        if kind == "heston":
            base = spec.market_heston or HestonParams(0.04, 3.0, 0.09, 0.3, 0.0)
            spec = replace(spec, market_kind=kind, market_rbergomi=None,
                           market_heston=heston_from("market", base))
        elif kind == "rough_bergomi":
            base = spec.market_rbergomi or RoughBergomiParams(0.2, 0.5, 0.1)
            spec = replace(
                spec,
                market_kind=kind,
                market_heston=None,
                market_rbergomi=RoughBergomiParams(
                    sigma0=cfg.getfloat("market", "sigma0", fallback=base.sigma0),
                    eta=cfg.getfloat("market", "eta", fallback=base.eta),
                    hurst=cfg.getfloat("market", "hurst", fallback=base.hurst),
                ),
            )
        else:
            raise ValueError(f"unknown market kind {kind!r}")
        spec = replace(
            spec,
            s0=cfg.getfloat("market", "s0", fallback=spec.s0),
            r=cfg.getfloat("market", "r", fallback=spec.r),
        )
    if cfg.has_section("primary"):
        spec = replace(spec, primary=heston_from("primary", spec.primary))
    if cfg.has_section("grid"):
        spec = replace(
            spec,
            maturities=_parse_floats(
                cfg.get("grid", "maturities", fallback=" ".join(map(str, spec.maturities)))
            ),
            strikes=_parse_floats(
                cfg.get("grid", "strikes", fallback=" ".join(map(str, spec.strikes)))
            ),
            steps_per_year=cfg.getint("grid", "steps_per_year", fallback=spec.steps_per_year),
        )
    if cfg.has_section("mc"):
        spec = replace(
            spec,
            n_mc_market=cfg.getint("mc", "n_market", fallback=spec.n_mc_market),
            n_mc_calib=cfg.getint("mc", "n_calib", fallback=spec.n_mc_calib),
            seed_market=cfg.getint("mc", "seed_market", fallback=spec.seed_market),
            seed_calib=cfg.getint("mc", "seed_calib", fallback=spec.seed_calib),
            antithetic_market=cfg.getboolean(
                "mc", "antithetic_market", fallback=spec.antithetic_market
            ),
        )
    if cfg.has_section("calibration"):
        spec = replace(
            spec,
            max_iter=cfg.getint("calibration", "max_iter", fallback=spec.max_iter),
            gtol=cfg.getfloat("calibration", "gtol", fallback=spec.gtol),
            bound_scale=cfg.getfloat("calibration", "bound_scale", fallback=spec.bound_scale),
            n_restarts=cfg.getint("calibration", "restarts", fallback=spec.n_restarts),
        )
    if n_paths is not None:
        spec = replace(spec, n_mc_market=n_paths, n_mc_calib=n_paths)
    if seed is not None:
        spec = replace(spec, seed_market=seed, seed_calib=seed + 111)
    return spec


def _expansion_windows(path: Optional[str]):
    cfg = configparser.ConfigParser()
    if path:
        cfg.read(path)
    smile = cfg.get("expansion", "smile_maturity", fallback=None)
    return {
        "atm_window": (
            cfg.getfloat("expansion", "atm_min", fallback=0.0),
            cfg.getfloat("expansion", "atm_max", fallback=0.2),
        ),
        "smile_maturity": float(smile) if smile else None,
        "long_min_maturity": cfg.getfloat("expansion", "long_min", fallback=1.0),
    }


def _dump_simulation(spec: ExperimentSpec, out: str, n_vol_paths: int) -> None:
    """Debug dump of market terminal prices and a sample of vol paths."""
    import numpy as np

    from .process_sim import (
        euler_cir,
        market_terminal_prices,
        rough_bergomi_vol,
        simulate_brownian,
        volterra_fbm,
    )

    n = min(spec.n_mc_market, 20_000)
    batch = simulate_brownian(n, spec.n_steps, spec.horizon, spec.seed_market)
    snaps = market_terminal_prices(
        spec.market_kind, spec.market_params, spec.s0, spec.r, spec.maturities, batch
    )
    with open(os.path.join(out, "terminal_prices.csv"), "w") as fh:
        fh.write("path,maturity,price\n")
        for t in spec.maturities:
            for p, s in enumerate(snaps[t]):
                fh.write(f"{p},{t:.10g},{s:.10g}\n")
    if spec.market_kind == "heston":
        var = euler_cir(spec.market_heston, batch)
        vols = np.sqrt(np.maximum(var, 0.0))
    else:
        wh = volterra_fbm(spec.market_rbergomi.hurst, batch)
        vols = rough_bergomi_vol(spec.market_rbergomi, wh, batch.times)
    with open(os.path.join(out, "vol_paths.csv"), "w") as fh:
        fh.write("path,t,value\n")
        for p in range(min(n_vol_paths, n)):
            for t, v in zip(batch.times, vols[p]):
                fh.write(f"{p},{t:.10g},{v:.10g}\n")


def cmd_generate_market(args) -> int:
    spec = spec_from_config(args.config, args.paper_scale, args.paths, args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.expansion_surface:
        base = table2_expansion_spec() if (
            spec.market_heston and spec.market_heston.rho != 0.0
        ) else table1_expansion_spec()
        exp_spec = replace(
            base,
            market=spec.market_heston or base.market,
            n_mc=spec.n_mc_market,
            s0=spec.s0,
            r=spec.r,
            seed=spec.seed_market + 100,
        )
        rows = generate_expansion_surface(exp_spec)
        path = os.path.join(args.out, "expansion_surface.csv")
        with open(path, "w") as fh:
            fh.write("maturity,strike,iv\n")
            for t, k, iv in rows:
                fh.write(f"{t:.10g},{k:.10g},{iv:.10g}\n")
        with open(os.path.join(args.out, "expansion_manifest.json"), "w") as fh:
            json.dump(exp_spec.manifest(), fh, indent=1, sort_keys=True)
        print(f"wrote {len(rows)} surface rows to {path}")
        return 0
    quotes, ivs = generate_market(spec)
    write_market(args.out, spec, quotes, ivs)
    print(f"wrote {len(quotes)} quotes to {os.path.join(args.out, 'quotes.csv')}")
    if args.dump_sim is not None:
        _dump_simulation(spec, args.out, args.dump_sim)
        print("wrote terminal_prices.csv and vol_paths.csv")
    return 0


def cmd_calibrate_sig(args) -> int:
    spec = spec_from_config(args.config, args.paper_scale, args.paths, args.seed)
    quotes = load_quotes(args.quotes or os.path.join(args.out, "quotes.csv"))
    cache = features_for(spec, args.out, reuse=not args.rebuild_features)
    if args.dump_features is not None:
        cache.to_csv(os.path.join(args.out, "features_sample.csv"), args.dump_features)
        print("wrote features_sample.csv")
    results = run_sig_calibration(spec, quotes, cache, per_smile=args.per_smile,
                                  out_dir=args.out)
    joint = results["joint"]
    print(
        f"loss={joint.loss:.6g} max|iv error|={joint.max_iv_error:.6g} "
        f"iterations={joint.n_iterations} converged={joint.converged}"
    )
    for label, res in results.items():
        if label != "joint":
            print(f"  {label}: loss={res.loss:.6g} max|iv error|={res.max_iv_error:.6g}")
    return 0


def cmd_calibrate_expansion(args) -> int:
    surface = load_surface(args.surface or os.path.join(args.out, "expansion_surface.csv"))
    windows = _expansion_windows(args.config)
    spec = spec_from_config(args.config, args.paper_scale, args.paths, args.seed)
    fit = run_expansion_calibration(surface, spec.s0, spec.r, out_dir=args.out, **windows)
    print(
        f"sigma0={fit.sigma0:.6f} nu={fit.params.nu:.6f} kappa={fit.params.kappa:.6f} "
        f"theta={fit.params.theta:.6f} rho={fit.params.rho:.6f} "
        f"[route={fit.diagnostics['route']}]"
    )
    if args.reprice_grid:
        rows = expansion_iv_table(fit, spec)
        path = os.path.join(args.out, "exp_iv_table.csv")
        with open(path, "w") as fh:
            fh.write("maturity,strike,iv_exp\n")
            for t, k, iv in rows:
                fh.write(f"{t:.10g},{k:.10g},{iv:.10g}\n")
        print(f"wrote repriced grid to {path}")
    if args.formula_surface:
        from .heston_expansion import expansion_surface

        rows = expansion_surface(fit.params, fit.sigma0, spec.s0, spec.r,
                                 spec.maturities, spec.strikes)
        path = os.path.join(args.out, "expansion_formula_surface.csv")
        with open(path, "w") as fh:
            fh.write("maturity,strike,iv\n")
            for t, k, iv in rows:
                fh.write(f"{t:.10g},{k:.10g},{iv:.10g}\n")
        print(f"wrote formula-regenerated surface to {path}")
    return 0


def cmd_report(args) -> int:
    def read_table(name, col):
        path = os.path.join(args.out, name)
        if not os.path.exists(path):
            return None
        import csv as _csv

        rows = []
        with open(path) as fh:
            for row in _csv.DictReader(fh):
                rows.append((float(row["maturity"]), float(row["strike"]), float(row[col])))
        return rows

    market = read_table("market_ivs.csv", "iv")
    sig = read_table("sig_iv_table.csv", "iv_sig")
    if market is None or sig is None:
        print("report needs market_ivs.csv and sig_iv_table.csv in the output dir",
              file=sys.stderr)
        return 2
    exp = read_table("exp_iv_table.csv", "iv_exp")
    path = write_comparison(args.out, market, sig, exp)
    # per-maturity smile files suitable for external plotting
    sig_map = {(t, k): v for t, k, v in sig}
    exp_map = {(t, k): v for t, k, v in exp} if exp is not None else None
    for t in sorted({t for t, _, _ in market}):
        rows = sorted((k, v) for tt, k, v in market if tt == t)
        smile_path = os.path.join(args.out, f"report_smile_T{t:g}.csv")
        with open(smile_path, "w") as fh:
            header = "strike,iv_mkt,iv_sig" + (",iv_exp" if exp_map is not None else "")
            fh.write(header + "\n")
            for k, iv_mkt in rows:
                line = f"{k:.10g},{iv_mkt:.10g},{sig_map.get((t, k), float('nan')):.10g}"
                if exp_map is not None:
                    line += f",{exp_map.get((t, k), float('nan')):.10g}"
                fh.write(line + "\n")
    print(f"wrote {path}" + ("" if exp is not None else " (expansion columns omitted)"))
    return 0


def cmd_dump_labeling(args) -> int:
    from .tensor_algebra import get_labeling

    lab = get_labeling(args.alphabet, args.cap)
    lab.to_csv(args.out)
    print(f"wrote {lab.size} words to {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .acceptance import run_acceptance

    if args.config:
        spec = spec_from_config(args.config)
        print(f"config {args.config}: experiment {spec.name}, "
              f"{spec.n_mc_market} market / {spec.n_mc_calib} calibration paths")
        print("note: the battery always runs the canonical desk-scale setups")
    results = run_acceptance(
        criteria=args.criteria,
        out_dir=args.out,
        keep_artifacts=bool(args.out),
    )
    failed = [r for r in results if not r.passed]
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sigvol",
        description="Signature-based volatility calibration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file (see README)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--paths", type=int, help="override both MC path counts")
        p.add_argument("--seed", type=int, help="override seeds (market=SEED, calib=SEED+111)")
        p.add_argument("--paper-scale", action="store_true",
                       help="use the 800k-path profile")

    p = sub.add_parser("generate-market", help="simulate a synthetic market")
    common(p)
    p.add_argument("--expansion-surface", action="store_true",
                   help="emit the purpose-built surface for expansion calibration")
    p.add_argument("--dump-sim", type=int, metavar="N",
                   help="also dump terminal prices and the first N vol paths")
    p.set_defaults(func=cmd_generate_market)

    p = sub.add_parser("calibrate-sig", help="calibrate the signature model")
    common(p)
    p.add_argument("--quotes", help="quotes CSV (default <out>/quotes.csv)")
    p.add_argument("--per-smile", action="store_true",
                   help="also fit each maturity separately")
    p.add_argument("--rebuild-features", action="store_true",
                   help="ignore any persisted feature cache")
    p.add_argument("--dump-features", type=int, metavar="N",
                   help="dump the first N paths' features to CSV")
    p.set_defaults(func=cmd_calibrate_sig)

    p = sub.add_parser("calibrate-expansion",
                       help="calibrate the second-order Heston expansion")
    common(p)
    p.add_argument("--surface", help="IV surface CSV (default <out>/expansion_surface.csv)")
    p.add_argument("--reprice-grid", action="store_true",
                   help="also reprice the experiment grid with the fitted parameters")
    p.add_argument("--formula-surface", action="store_true",
                   help="also regenerate the grid surface from the expansion formulas")
    p.set_defaults(func=cmd_calibrate_expansion)

    p = sub.add_parser("report", help="emit comparison tables")
    p.add_argument("--out", required=True, help="directory holding run artifacts")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-labeling", help="write a word -> index table as CSV")
    p.add_argument("--alphabet", type=int, default=2, help="alphabet size d")
    p.add_argument("--cap", type=int, default=3, help="maximum word length")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_dump_labeling)

    p = sub.add_parser("selftest", help="run the acceptance battery")
    p.add_argument("--config", help="desk-scale config (parsed and summarized)")
    p.add_argument("--criteria", type=int, nargs="*",
                   help="criterion numbers to run (default: all)")
    p.add_argument("--out", help="keep artifacts in this directory")
    p.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
