"""Command-line front end.

Subcommands::

    growth        level-set filter + growth-bound table  -> B.csv, level_set.csv
    alpha-scan    alpha tables over T and delta            -> alpha_*.csv
    simulate      one closed-loop run                      -> closed_loop.csv, summary.json
    min-horizon   smallest certified horizon on the grid   -> min_horizon.json
    oracle-check  brute-force checks of the OCP solver     -> oracle.json

Exit codes: 0 success, 2 invalid configuration, 3 certification failed,
4 numerical failure (diverged solves, empty level set, table too short).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import alpha as alpha_mod
from .config import ConfigError, ExperimentConfig
from .dynamics import ZohControl, generator, integrate, quadratic_cost, scalar_integrator
from .engine import (
    BoundNotApplicable,
    long_horizon_value,
    performance_bound,
    run,
    save_log,
    summarize,
)
from .errors import CertificationFailed, ContractViolation, CoverageExceeded, HorizonMPCError
from .growth import GrowthBound, compute_B, level_set_filter
from .ocp import OcpSpec, solve, value_function

log = logging.getLogger("horizonmpc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CERTIFICATION = 3
EXIT_NUMERICAL = 4


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if args.out else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    return cfg.with_overrides(seed=args.seed, full_scale=args.full_scale)


def _growth_file(cfg: ExperimentConfig, args, out: Path) -> Path:
    if getattr(args, "growth_file", None):
        p = Path(args.growth_file)
    elif cfg.growth_file:
        p = cfg.resolve(cfg.growth_file)
    else:
        p = out / "B.csv"
    if not p.exists():
        raise ConfigError(f"growth table {p} not found (run the growth subcommand first or pass --growth-file)")
    return p


# --- subcommands -----------------------------------------------------------------


def cmd_growth(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    spec = cfg.growth_spec()
    grid_size = None
    if cfg.growth.states is not None:
        states = np.asarray(cfg.growth.states, dtype=float)
    else:
        grid = cfg.state_grid()
        grid_size = len(grid.points)
        pts, vals = level_set_filter(
            cfg.level_set_spec(), grid, cfg.level_set.threshold, threads=args.threads, return_values=True
        )
        with open(out / "level_set.csv", "w") as fh:
            fh.write(",".join([f"x{i}" for i in range(pts.shape[1])] + ["V_tau"]) + "\n")
            for p, v in zip(pts, vals):
                fh.write(",".join(repr(float(c)) for c in [*p, v]) + "\n")
        states = pts
    # the equilibrium itself carries no information (l* = 0)
    keep = np.array([spec.cost.stage_min(x) > 0 for x in states])
    states = states[keep]
    if states.shape[0] == 0:
        raise ConfigError("no state with positive stage minimum to evaluate")
    n_star = cfg.n_star()
    meta = {"config": cfg.name, "grid_size": grid_size, "n_star": n_star, "dt": spec.dt}
    B = compute_B(spec, states, n_star, threads=args.threads, cold_starts=cfg.growth.cold_starts, meta=meta)
    B.to_csv(out / "B.csv")
    print(f"growth bound: n*={B.n_star} coverage={B.coverage:g} dt={B.dt:g}")
    print(f"states evaluated: {states.shape[0]}" + (f" (grid {grid_size})" if grid_size else ""))
    print(f"unconverged solves: {B.meta['unconverged_solves']}; B(dt)={B.values[0]:.6g} B(end)={B.values[-1]:.6g}")
    print(f"wrote {out / 'B.csv'}")
    return EXIT_OK


def cmd_alpha_scan(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    B = GrowthBound.from_csv(_growth_file(cfg, args, out))
    a = cfg.alpha
    if a.T_max > B.coverage + 1e-9:
        n_req = int(math.ceil(a.T_max / B.dt - 1e-9))
        raise CoverageExceeded(a.T_max, n_req, B.n_star)
    m = int(math.floor(a.T_max / a.T_step + 1e-9))
    T_grid = alpha_mod.multiples(a.T_step, 1, m)
    fixed = alpha_mod.scan_fixed_delta(B, T_grid, a.delta)
    half = alpha_mod.scan_half(B, T_grid)
    by_delta = alpha_mod.scan_fixed_T(B, a.fixed_T, a.delta_step)
    fixed.to_csv(out / "alpha_fixed_delta.csv")
    half.to_csv(out / "alpha_half.csv")
    by_delta.to_csv(out / "alpha_fixed_T.csv")
    th_fixed = alpha_mod.sign_threshold(fixed, a.alpha_bar)
    th_half = alpha_mod.sign_threshold(half, a.alpha_bar)
    pos = by_delta.delta[by_delta.valid & (by_delta.alpha > a.alpha_bar)]
    print(f"alpha > {a.alpha_bar:g} for delta={a.delta:g} from T={th_fixed}")
    print(f"alpha > {a.alpha_bar:g} for delta=T/2 from T={th_half}")
    if pos.size:
        print(f"T={a.fixed_T:g}: alpha > {a.alpha_bar:g} for delta in [{pos.min():g}, {pos.max():g}]")
    else:
        print(f"T={a.fixed_T:g}: no delta with alpha > {a.alpha_bar:g}")
    _write_json(out / "alpha_summary.json", {
        "threshold_fixed_delta": th_fixed,
        "threshold_half": th_half,
        "fixed_T": a.fixed_T,
        "positive_delta_range": [float(pos.min()), float(pos.max())] if pos.size else None,
    })
    return EXIT_OK


def cmd_minhorizon(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    B = GrowthBound.from_csv(_growth_file(cfg, args, out))
    a = cfg.alpha
    half = args.delta == "half"
    delta = (lambda T: T / 2) if half else (a.delta if args.delta is None else float(args.delta))
    step = args.step if args.step is not None else a.T_step
    res = alpha_mod.min_stabilizing_horizon(B, delta, a.alpha_bar, step)
    report = {
        "delta": "T/2" if half else delta,
        "alpha_bar": a.alpha_bar,
        "step": step,
        "found": res.found,
        "T": res.T,
        "alpha": res.alpha,
        "previous_T": res.previous_T,
        "previous_alpha": res.previous_alpha,
        "required_n_star": res.required_n_star,
    }
    _write_json(out / "min_horizon.json", report)
    if res.found:
        print(f"minimal horizon T={res.T:g} (alpha={res.alpha:.6g}); "
              f"previous grid point T={res.previous_T} alpha={res.previous_alpha}")
    else:
        print(f"no certified horizon up to coverage {B.coverage:g}; "
              f"try a table with n*={res.required_n_star} (last alpha={res.previous_alpha})")
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    mcfg = cfg.mpc_config()
    x0 = cfg.x0()
    logd = run(mcfg, x0, cfg.disturbance(args.seed))
    sysm = mcfg.spec.system
    summary = summarize(logd, sysm.equilibrium_state)
    summary["horizon"] = mcfg.spec.horizon
    summary["x0"] = x0.tolist()
    gf = getattr(args, "growth_file", None) or cfg.growth_file
    if gf and cfg.engine.mode in ("fixed", "slack_monitored"):
        B = GrowthBound.from_csv(Path(gf) if getattr(args, "growth_file", None) else cfg.resolve(gf))
        try:
            summary["alpha_formula"] = alpha_mod.alpha_of(B, mcfg.spec.horizon, mcfg.delta).alpha
        except CoverageExceeded:
            summary["alpha_formula"] = None
    if mcfg.alpha_bar > 0 and logd.failure is None:
        try:
            V_inf = long_horizon_value(mcfg.spec, x0, cfg.engine.T_long)
            pb = performance_bound(logd, mcfg.alpha_bar, V_inf, equilibrium=sysm.equilibrium_state)
            summary["performance_bound"] = {"lhs": pb.lhs, "rhs": pb.rhs, "residual": pb.residual, "holds": pb.holds}
        except BoundNotApplicable as exc:
            summary["performance_bound"] = {"not_applicable": str(exc)}
    save_log(logd, out / "closed_loop.csv", meta={"config": cfg.name, "seed": cfg.ocp.seed})
    _write_json(out / "summary.json", summary)
    for key in ("mode", "steps", "t_end", "final_distance", "converged", "min_alpha_step",
                "final_slack", "final_alpha_agg", "exit_strategy_fired", "delta_histogram"):
        print(f"{key}: {summary[key]}")
    if logd.failure is not None:
        print(f"run stopped: {logd.failure}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def oracle_checks(method: str = "lbfgsb") -> list[dict]:
    """Scalar one-piece LQ problem against closed form and a u-grid search; equilibrium value."""
    results = []
    sysm = scalar_integrator()
    cost = quadratic_cost(sysm, lam=1.0)
    spec = OcpSpec(sysm, cost, horizon=1.0, dt=1.0, steps_per_sample=50, method=method)
    sol = solve(spec, [1.0])
    grid = np.round(np.arange(-1.0, 0.0 + 1e-12, 1e-4), 10)
    costs = [integrate(sysm, cost, [1.0], ZohControl(1.0, [[u]]), 50).cost for u in grid]
    i = int(np.argmin(costs))
    u = float(sol.control.values[0, 0])
    results.append({"check": "scalar LQ control", "value": u, "expected": -0.375, "grid": float(grid[i]),
                    "ok": bool(abs(u + 0.375) <= 1e-3 and abs(u - grid[i]) <= 1e-3)})
    results.append({"check": "scalar LQ value", "value": sol.value, "expected": 0.8125, "grid": float(costs[i]),
                    "ok": bool(abs(sol.value - 0.8125) <= 1e-3 and abs(sol.value - costs[i]) <= 1e-3)})
    gen = generator()
    gspec = OcpSpec(gen, quadratic_cost(gen), horizon=0.6, dt=0.05, steps_per_sample=4, method=method)
    v = value_function(gspec, gen.equilibrium_state, 1)
    results.append({"check": "generator value at equilibrium", "value": v, "expected": 0.0, "ok": bool(v <= 1e-8)})
    return results


def cmd_oracle_check(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    results = oracle_checks(cfg.ocp.method)
    for r in results:
        print(f"{'PASS' if r['ok'] else 'FAIL'} {r['check']}: {r['value']:.6g} (expected {r['expected']:g})")
    _write_json(out / "oracle.json", results)
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_NUMERICAL


COMMANDS = {
    "growth": cmd_growth,
    "alpha-scan": cmd_alpha_scan,
    "simulate": cmd_simulate,
    "min-horizon": cmd_minhorizon,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, default=None, help="solver seed override")
    common.add_argument("--threads", type=int, default=1, help="worker threads for grid sweeps")
    common.add_argument("--full-scale", action="store_true", help="grid spacing 0.02 and table dt 0.0125")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="horizonmpc", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("growth", parents=[common], help="level set and growth-bound table")
    for name in ("alpha-scan", "min-horizon", "simulate"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--growth-file", help="B table CSV (default: <out>/B.csv)")
    mh = sub.choices["min-horizon"]
    mh.add_argument("--delta", default=None, help="control horizon, or 'half' for delta = T/2")
    mh.add_argument("--step", type=float, default=None, help="horizon grid step")
    sub.add_parser("oracle-check", parents=[common], help="brute-force solver checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractViolation) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificationFailed as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATION
    except HorizonMPCError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
