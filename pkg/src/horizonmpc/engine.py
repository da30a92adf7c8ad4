"""Closed-loop receding-horizon execution with fixed, adaptive and updated control horizons.

Every mode shares one loop: measure, solve over ``[0, T)``, choose how much
of the minimizer to apply, integrate it, log value decrease and accrued stage
cost. The log keeps enough to recompute the slack

    s(t) = V_T(x0) - V_T(x(t)) - alpha_bar * int_0^t l

for any ``alpha_bar`` after the fact.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import Trajectory, ZohControl, integrate
from .errors import (
    AtEquilibrium,
    BoundNotApplicable,
    CertificationFailed,
    ContractViolation,
    IntegrationDiverged,
    SolveFailed,
)
from .ocp import OcpSolution, OcpSpec, best_solution, extend_control, shift_warm_start

log = logging.getLogger(__name__)

MODES = ("fixed", "adaptive", "adaptive_with_update", "slack_monitored")
EXIT_STRATEGIES = ("use_largest_tau", "abort")

Solver = Callable[[OcpSpec, np.ndarray, list], OcpSolution]
Disturbance = Callable[[float, np.ndarray], np.ndarray]


def _pieces(t: float, dt: float, what: str) -> int:
    r = t / dt
    n = int(round(r))
    if abs(r - n) > 1e-9 * max(1.0, r) or n < 1:
        raise ContractViolation(f"{what}={t} is not a positive multiple of the sampling period {dt}")
    return n


@dataclass(frozen=True, eq=False)
class Partition:
    """``0 = tau_0 < tau_1 < ... < tau_n = T`` with ``n >= 2``."""

    taus: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.taus, dtype=float)
        if t.ndim != 1 or t.size < 3:
            raise ContractViolation("a partition needs n >= 2 intervals")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ContractViolation("partition must start at 0 and increase strictly")
        object.__setattr__(self, "taus", t)

    @property
    def n(self) -> int:
        return self.taus.size - 1

    @property
    def T(self) -> float:
        return float(self.taus[-1])

    @classmethod
    def uniform(cls, T: float, step: float) -> "Partition":
        m = int(round(T / step))
        taus = step * np.arange(m + 1)
        taus[-1] = T
        return cls(taus)


@dataclass(frozen=True, eq=False)
class MpcConfig:
    spec: OcpSpec
    mode: str = "fixed"
    delta: float | None = None
    partition: Partition | None = None
    alpha_bar: float = 0.0
    exit_strategy: str = "use_largest_tau"
    sim_duration: float = 10.0
    slack_exit_threshold: float = 0.0
    cold_starts: bool = False
    equilibrium_tol: float = 1e-12

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        if self.exit_strategy not in EXIT_STRATEGIES:
            raise ContractViolation(f"exit_strategy must be one of {EXIT_STRATEGIES}")
        if not 0 <= self.alpha_bar < 1:
            raise ContractViolation("alpha_bar must lie in [0, 1)")
        if not self.sim_duration > 0:
            raise ContractViolation("sim_duration must be positive")
        T = self.spec.horizon
        if self.mode in ("fixed", "slack_monitored"):
            if self.delta is None or not 0 < self.delta < T:
                raise ContractViolation("fixed modes need 0 < delta < T")
            _pieces(self.delta, self.spec.dt, "delta")
        else:
            part = self.partition
            if part is None:
                raise ContractViolation("adaptive modes need a partition")
            if abs(part.T - T) > 1e-9 * T:
                raise ContractViolation("partition must end at the optimization horizon")
            for tau in part.taus[1:]:
                _pieces(tau, self.spec.dt, "partition point")


@dataclass(frozen=True)
class UpdateCheck:
    accepted: bool
    lhs: float
    rhs: float
    reason: str = ""


@dataclass(frozen=True)
class UpdateEvent:
    time: float
    j: int
    k: int
    accepted: bool
    lhs: float
    rhs: float
    reason: str = ""


@dataclass
class StepRecord:
    index: int
    t: float
    state: np.ndarray
    delta: float
    V: float
    V_next: float
    stage_integral: float
    alpha_step: float
    cum_stage: float
    slack: float
    alpha_agg: float
    tested: list = field(default_factory=list)
    exit_fired: bool = False
    at_equilibrium: bool = False
    guard_ok: bool = True
    updates: list = field(default_factory=list)
    end_state: np.ndarray | None = None
    t_end: float | None = None

    def __post_init__(self):
        if self.t_end is None:
            self.t_end = self.t + self.delta


@dataclass(eq=False)
class ClosedLoopLog:
    mode: str
    alpha_bar: float
    horizon: float
    dt: float
    x0: np.ndarray
    V0: float
    steps: list = field(default_factory=list)
    control_values: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    failure: str | None = None

    @property
    def t_end(self) -> float:
        return self.steps[-1].t_end if self.steps else 0.0

    @property
    def final_state(self) -> np.ndarray:
        return self.steps[-1].end_state if self.steps else self.x0

    @property
    def cum_stage(self) -> float:
        return self.steps[-1].cum_stage if self.steps else 0.0

    @property
    def applied_control(self) -> ZohControl:
        """Concatenation of every applied piece, covering ``[0, t_end)``."""
        return ZohControl(self.dt, np.vstack(self.control_values))

    @property
    def trajectory(self) -> Trajectory:
        """Dense closed loop; measurement disturbances appear as repeated times."""
        times, states, cost = [], [], []
        for t0, c0, tr in self.segments:
            times.append(t0 + tr.times)
            states.append(tr.states)
            cost.append(c0 + tr.accumulated_cost)
        return Trajectory(np.concatenate(times), np.vstack(states), np.concatenate(cost))

    def boundary_times(self) -> np.ndarray:
        return np.array([0.0] + [s.t_end for s in self.steps])

    def boundary_values(self) -> np.ndarray:
        return np.array([self.V0] + [s.V_next for s in self.steps])

    def boundary_stage(self) -> np.ndarray:
        return np.array([0.0] + [s.cum_stage for s in self.steps])

    def __eq__(self, other):
        if not isinstance(other, ClosedLoopLog):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.alpha_bar == other.alpha_bar
            and self.horizon == other.horizon
            and self.dt == other.dt
            and np.array_equal(self.x0, other.x0)
            and self.V0 == other.V0
            and self.failure == other.failure
            and len(self.steps) == len(other.steps)
            and all(_steps_equal(a, b) for a, b in zip(self.steps, other.steps))
        )


def _steps_equal(a: StepRecord, b: StepRecord) -> bool:
    scal = ("index", "t", "t_end", "delta", "V", "V_next", "stage_integral", "alpha_step", "cum_stage", "slack", "alpha_agg")
    for name in scal:
        x, y = getattr(a, name), getattr(b, name)
        if not (x == y or (isinstance(x, float) and math.isnan(x) and math.isnan(y))):
            return False
    return (
        np.array_equal(a.state, b.state)
        and np.array_equal(a.end_state, b.end_state)
        and a.exit_fired == b.exit_fired
        and a.at_equilibrium == b.at_equilibrium
        and a.guard_ok == b.guard_ok
        and [(u.accepted, u.j) for u in a.updates] == [(u.accepted, u.j) for u in b.updates]
    )


# --- pure monitoring functions ---------------------------------------------------


def check_update_condition(
    V_T_fresh_end: float,
    V_short: float | None,
    closed_loop_integral: float,
    fresh_integral: float,
    alpha_bar: float,
) -> UpdateCheck:
    """Lyapunov-type test for replacing the running plan at an intermediate time.

    Accept iff ``V_T(x_fresh(tau_k - tau_j)) - V_{T - tau_j}(x(tau_j))``
    is strictly below ``(1 - alpha_bar) int_0^{tau_j} l_cl - alpha_bar int_0^{tau_k - tau_j} l_fresh``.
    A missing shortened-horizon value rejects the update.
    """
    rhs = (1.0 - alpha_bar) * closed_loop_integral - alpha_bar * fresh_integral
    if V_short is None or not math.isfinite(V_short):
        return UpdateCheck(False, math.nan, rhs, "shortened-horizon value unavailable")
    lhs = V_T_fresh_end - V_short
    return UpdateCheck(bool(lhs < rhs), lhs, rhs)


def slack_series(log: ClosedLoopLog, alpha_bar: float) -> np.ndarray:
    """Rows ``(t, s(t))`` at every step boundary, starting with ``(0, 0)``."""
    t = log.boundary_times()
    s = log.V0 - log.boundary_values() - alpha_bar * log.boundary_stage()
    return np.column_stack([t, s])


def _boundary_index(log: ClosedLoopLog, t: float) -> int:
    bt = log.boundary_times()
    i = int(np.argmin(np.abs(bt - t)))
    if abs(bt[i] - t) > 1e-9 * max(1.0, abs(t)):
        raise ContractViolation(f"t={t} is not a logged step boundary")
    return i


def aggregated_alpha(log: ClosedLoopLog, t: float) -> float:
    """``(V_T(x0) - V_T(x(t))) / int_0^t l`` at a step boundary ``t``."""
    i = _boundary_index(log, t)
    den = log.boundary_stage()[i]
    if not den > 0:
        raise AtEquilibrium(f"no stage cost accrued up to t={t}")
    return (log.V0 - log.boundary_values()[i]) / den


@dataclass(frozen=True)
class PerformanceBound:
    lhs: float
    rhs: float
    residual: float
    slack_end: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def performance_bound(
    log: ClosedLoopLog,
    alpha_bar: float,
    V_inf_surrogate: float,
    convergence_tol: float = 0.05,
    equilibrium=None,
) -> PerformanceBound:
    """Truncated closed-loop cost against ``(1 - s_end / V_T(x0)) / alpha_bar * V_inf``.

    ``residual`` is ``alpha_bar * lhs - (V_T(x0) - s_end - V_T(x_end))``,
    zero up to rounding by construction of the slack.
    """
    if not alpha_bar > 0:
        raise BoundNotApplicable("alpha_bar must be positive")
    if not log.steps or log.failure is not None:
        raise BoundNotApplicable("run did not complete")
    if equilibrium is not None:
        dist = float(np.linalg.norm(log.final_state - np.asarray(equilibrium)))
        if dist > convergence_tol:
            raise BoundNotApplicable(f"final distance {dist:.3g} exceeds {convergence_tol}")
    if not log.V0 > 0:
        raise BoundNotApplicable("V_T(x0) vanishes")
    lhs = log.cum_stage
    s_end = float(slack_series(log, alpha_bar)[-1, 1])
    rhs = (1.0 - s_end / log.V0) / alpha_bar * V_inf_surrogate
    residual = alpha_bar * lhs - (log.V0 - s_end - log.steps[-1].V_next)
    return PerformanceBound(lhs, rhs, residual, s_end)


def long_horizon_value(spec: OcpSpec, x0, T_long: float | None = None, solver: Solver | None = None) -> float:
    """Surrogate for ``V_inf(x0)``: a single solve with horizon ``T_long`` (default ``4 T``)."""
    T_long = 4 * spec.horizon if T_long is None else T_long
    solver = solver or best_solution
    return solver(spec.with_horizon(T_long), np.asarray(x0, dtype=float), [None]).value


# --- closed-loop runner ------------------------------------------------------------------


class _Runner:
    def __init__(self, config: MpcConfig, x0, disturbance: Disturbance | None, solver: Solver | None):
        self.cfg = config
        self.spec = config.spec
        self.sys = config.spec.system
        self.us = self.sys.equilibrium_control
        self.spp = config.spec.steps_per_sample
        self.disturbance = disturbance
        self.solver = solver or best_solution
        x0 = np.ascontiguousarray(x0, dtype=float)
        if x0.shape != (self.sys.state_dim,):
            raise ContractViolation(f"x0 must have shape ({self.sys.state_dim},)")
        self.x0 = x0

    def solve(self, x, warm: ZohControl | None, horizon: float | None = None) -> OcpSolution:
        spec = self.spec if horizon is None else self.spec.with_horizon(horizon)
        starts: list = []
        if warm is not None:
            starts.append(extend_control(warm, spec.pieces, self.us))
        if warm is None or self.cfg.cold_starts:
            starts.append(None)
        return self.solver(spec, np.asarray(x, dtype=float), starts)

    def perturb(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.disturbance is None:
            return x
        return x + np.asarray(self.disturbance(t, x.copy()), dtype=float)

    def run(self) -> ClosedLoopLog:
        cfg = self.cfg
        out = ClosedLoopLog(cfg.mode, cfg.alpha_bar, self.spec.horizon, self.spec.dt, self.x0.copy(), math.nan)
        t = 0.0
        k = 0  # elapsed samples; times are k * dt to avoid drift
        x = self.x0.copy()
        cum = 0.0
        try:
            sol = self.solve(x, None)
        except (SolveFailed, IntegrationDiverged) as exc:
            out.failure = f"t=0: {exc}"
            return out
        out.V0 = sol.value
        idx = 0
        while t < cfg.sim_duration - 1e-9:
            try:
                rec, sol = self.step(idx, t, x, sol, cum, out)
            except (SolveFailed, IntegrationDiverged) as exc:
                out.failure = f"t={t:.6g}: {exc}"
                log.warning("closed loop stopped: %s", out.failure)
                break
            k += _pieces(rec.delta, self.spec.dt, "delta")
            rec.t_end = k * self.spec.dt
            out.steps.append(rec)
            cum = rec.cum_stage
            t = rec.t_end
            idx += 1
            x = self.perturb(t, rec.end_state)
            if not np.array_equal(x, rec.end_state):
                try:
                    sol = self.solve(x, sol.control)
                except (SolveFailed, IntegrationDiverged) as exc:
                    out.failure = f"t={t:.6g}: {exc}"
                    break
        return out

    # a step returns its record and the solution at the (undisturbed) end state
    def step(self, idx, t, x, sol, cum, out):
        mode = self.cfg.mode
        if mode in ("fixed", "slack_monitored"):
            d = _pieces(self.cfg.delta, self.spec.dt, "delta")
            return self._apply_plain(idx, t, x, sol, d, cum, out, tested=[], exit_fired=False)
        return self._adaptive(idx, t, x, sol, cum, out)

    def _finish(self, idx, t, x, V, sol_next, delta, stage, cum_before, out, **extra) -> StepRecord:
        cfg = self.cfg
        at_eq = stage < cfg.equilibrium_tol
        a_step = math.nan if at_eq else (V - sol_next.value) / stage
        cum = cum_before + stage
        s = out.V0 - sol_next.value - cfg.alpha_bar * cum
        a_agg = (out.V0 - sol_next.value) / cum if cum > 0 else math.nan
        guard = True
        if cfg.mode == "slack_monitored":
            guard = bool(s >= cfg.slack_exit_threshold)
        return StepRecord(
            index=idx,
            t=t,
            state=x.copy(),
            delta=delta,
            V=V,
            V_next=sol_next.value,
            stage_integral=stage,
            alpha_step=a_step,
            cum_stage=cum,
            slack=s,
            alpha_agg=a_agg,
            at_equilibrium=at_eq,
            guard_ok=guard,
            end_state=sol_next.trajectory.states[0].copy(),
            **extra,
        )

    def _segment(self, t0, x, control: ZohControl, cum_before, out) -> Trajectory:
        tr = integrate(self.sys, self.spec.cost, x, control, self.spp)
        out.segments.append((t0, cum_before, tr))
        out.control_values.append(np.array(control.values))
        return tr

    def _apply_plain(self, idx, t, x, sol, d, cum, out, tested, exit_fired, sol_next=None):
        tr = self._segment(t, x, sol.control[:d], cum, out)
        x_end = tr.final_state
        if sol_next is None:
            sol_next = self.solve(x_end, shift_warm_start(sol.control, d, self.us))
        rec = self._finish(
            idx, t, x, sol.value, sol_next, d * self.spec.dt, tr.cost, cum, out,
            tested=tested, exit_fired=exit_fired,
        )
        return rec, sol_next

    def _adaptive(self, idx, t, x, sol, cum, out):
        cfg = self.cfg
        part = cfg.partition
        dt = self.spec.dt
        n = part.n
        tested = []
        chosen = None
        candidates = {}
        for k in range(1, n):
            d = _pieces(part.taus[k], dt, "tau")
            node = d * self.spp
            x_pred = sol.trajectory.states[node]
            stage = float(sol.trajectory.accumulated_cost[node])
            cand = self.solve(x_pred, shift_warm_start(sol.control, d, self.us))
            candidates[k] = cand
            if stage < cfg.equilibrium_tol:
                tested.append((float(part.taus[k]), math.nan))
                chosen = k
                break
            a = (sol.value - cand.value) / stage
            tested.append((float(part.taus[k]), a))
            if a > cfg.alpha_bar:
                chosen = k
                break
        exit_fired = chosen is None
        if exit_fired:
            if cfg.exit_strategy == "abort":
                raise CertificationFailed(t, tested)
            chosen = n - 1
        d = _pieces(part.taus[chosen], dt, "tau")
        if cfg.mode == "adaptive_with_update" and chosen > 1:
            return self._apply_with_updates(idx, t, x, sol, chosen, cum, out, tested, exit_fired)
        return self._apply_plain(idx, t, x, sol, d, cum, out, tested, exit_fired, sol_next=candidates[chosen])

    def _apply_with_updates(self, idx, t, x, sol, k, cum, out, tested, exit_fired):
        """Apply ``[tau_j, tau_{j+1})`` pieces, re-planning at each ``tau_j`` when the test passes."""
        cfg = self.cfg
        dt = self.spec.dt
        T = self.spec.horizon
        taus = cfg.partition.taus
        tau_k = float(taus[k])
        plan = sol.control  # plan[0] acts at the current anchor time
        anchor = 0.0
        x_cur = x.copy()
        cl_int = 0.0
        events = []
        for j in range(0, k):
            seg_len = _pieces(taus[j + 1] - taus[j], dt, "partition gap")
            offset = _pieces(taus[j] - anchor, dt, "offset") if taus[j] > anchor else 0
            piece = plan[offset : offset + seg_len]
            tr = self._segment(t + taus[j], x_cur, piece, cum + cl_int, out)
            cl_int += tr.cost
            x_cur = tr.final_state
            if j + 1 == k:
                break
            tau_j = float(taus[j + 1])
            x_meas = self.perturb(t + tau_j, x_cur)
            x_cur = x_meas
            ev = self._try_update(t, j + 1, k, tau_j, tau_k, T, x_meas, plan, anchor, cl_int)
            events.append(ev[0])
            if ev[0].accepted:
                plan, anchor = ev[1], tau_j
        sol_next = self.solve(x_cur, plan[_pieces(tau_k - anchor, dt, "offset") :])
        rec = self._finish(
            idx, t, x, sol.value, sol_next, tau_k, cl_int, cum, out,
            tested=tested, exit_fired=exit_fired, updates=events,
        )
        return rec, sol_next

    def _try_update(self, t, j, k, tau_j, tau_k, T, x_meas, plan, anchor, cl_int):
        dt = self.spec.dt
        shift = _pieces(tau_j - anchor, dt, "offset")
        warm = extend_control(plan[shift:], self.spec.pieces, self.us) if shift < plan.pieces else None
        fresh = self.solve(x_meas, warm)
        try:
            short = self.solve(x_meas, fresh.control[: _pieces(T - tau_j, dt, "short horizon")], horizon=T - tau_j)
            V_short = short.value
        except (SolveFailed, IntegrationDiverged):
            V_short = None
        d_rest = _pieces(tau_k - tau_j, dt, "remaining")
        node = d_rest * self.spp
        x_pred = fresh.trajectory.states[node]
        fresh_int = float(fresh.trajectory.accumulated_cost[node])
        V_end = self.solve(x_pred, shift_warm_start(fresh.control, d_rest, self.us)).value
        chk = check_update_condition(V_end, V_short, cl_int, fresh_int, self.cfg.alpha_bar)
        ev = UpdateEvent(t + tau_j, j, k, chk.accepted, chk.lhs, chk.rhs, chk.reason)
        return ev, fresh.control


def run(config: MpcConfig, x0, disturbance: Disturbance | None = None, solver: Solver | None = None) -> ClosedLoopLog:
    """Dispatch on ``config.mode``."""
    return _Runner(config, x0, disturbance, solver).run()


def _require(config: MpcConfig, *modes: str):
    if config.mode not in modes:
        raise ContractViolation(f"mode {config.mode!r} not accepted here (expected {modes})")


def run_fixed(config: MpcConfig, x0, disturbance=None, solver=None) -> ClosedLoopLog:
    _require(config, "fixed")
    return run(config, x0, disturbance, solver)


def run_slack_monitored(config: MpcConfig, x0, disturbance=None, solver=None) -> ClosedLoopLog:
    _require(config, "slack_monitored")
    return run(config, x0, disturbance, solver)


def run_adaptive(config: MpcConfig, x0, disturbance=None, solver=None) -> ClosedLoopLog:
    _require(config, "adaptive")
    return run(config, x0, disturbance, solver)


def run_adaptive_with_update(config: MpcConfig, x0, disturbance=None, solver=None) -> ClosedLoopLog:
    _require(config, "adaptive_with_update")
    return run(config, x0, disturbance, solver)


# --- persistence -----------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _encode_tested(tested) -> str:
    return ";".join(f"{_fmt(t)}:{_fmt(a)}" for t, a in tested)


def _decode_tested(s: str) -> list:
    if not s:
        return []
    return [tuple(float(v) for v in item.split(":")) for item in s.split(";")]


def _encode_updates(events) -> str:
    return ";".join(
        f"{_fmt(e.time)}:{e.j}:{e.k}:{int(e.accepted)}:{_fmt(e.lhs)}:{_fmt(e.rhs)}" for e in events
    )


def _decode_updates(s: str) -> list:
    out = []
    for item in filter(None, s.split(";")):
        t, j, k, acc, lhs, rhs = item.split(":")
        out.append(UpdateEvent(float(t), int(j), int(k), bool(int(acc)), float(lhs), float(rhs)))
    return out


def log_columns(state_dim: int) -> list[str]:
    xs = [f"x{i}" for i in range(state_dim)]
    return (
        ["step", "t", "t_end", *xs, "delta", "V_T", "V_T_next", "stage_integral", "cum_stage",
         "alpha_step", "slack", "alpha_agg", "exit_fired", "at_equilibrium", "guard_ok",
         "updates_accepted", "updates_rejected"]
        + [f"end_{x}" for x in xs]
        + ["tested", "update_events"]
    )


def save_log(log: ClosedLoopLog, path: str | Path, meta: dict | None = None) -> Path:
    """One CSV row per step (fixed column order) plus a JSON run sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = log.x0.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(log_columns(n))
        for s in log.steps:
            acc = sum(e.accepted for e in s.updates)
            w.writerow(
                [s.index, _fmt(s.t), _fmt(s.t_end), *map(_fmt, s.state), _fmt(s.delta), _fmt(s.V), _fmt(s.V_next),
                 _fmt(s.stage_integral), _fmt(s.cum_stage), _fmt(s.alpha_step), _fmt(s.slack), _fmt(s.alpha_agg),
                 int(s.exit_fired), int(s.at_equilibrium), int(s.guard_ok), acc, len(s.updates) - acc,
                 *map(_fmt, s.end_state), _encode_tested(s.tested), _encode_updates(s.updates)]
            )
    side = {
        "mode": log.mode,
        "alpha_bar": log.alpha_bar,
        "horizon": log.horizon,
        "dt": log.dt,
        "x0": log.x0.tolist(),
        "V0": log.V0,
        "failure": log.failure,
        "meta": meta or {},
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
    return path


def load_log(path: str | Path) -> ClosedLoopLog:
    """Rebuild the step records of a saved log (dense segments are not stored)."""
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    x0 = np.array(side["x0"], dtype=float)
    n = x0.size
    out = ClosedLoopLog(side["mode"], side["alpha_bar"], side["horizon"], side["dt"], x0, side["V0"],
                        failure=side["failure"])
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.steps.append(
                StepRecord(
                    index=int(r["step"]),
                    t=float(r["t"]),
                    state=np.array([float(r[f"x{i}"]) for i in range(n)]),
                    delta=float(r["delta"]),
                    V=float(r["V_T"]),
                    V_next=float(r["V_T_next"]),
                    stage_integral=float(r["stage_integral"]),
                    alpha_step=float(r["alpha_step"]),
                    cum_stage=float(r["cum_stage"]),
                    slack=float(r["slack"]),
                    alpha_agg=float(r["alpha_agg"]),
                    tested=_decode_tested(r["tested"]),
                    exit_fired=bool(int(r["exit_fired"])),
                    at_equilibrium=bool(int(r["at_equilibrium"])),
                    guard_ok=bool(int(r["guard_ok"])),
                    updates=_decode_updates(r["update_events"]),
                    end_state=np.array([float(r[f"end_x{i}"]) for i in range(n)]),
                    t_end=float(r["t_end"]),
                )
            )
    return out


def summarize(log: ClosedLoopLog, equilibrium=None, convergence_tol: float = 0.05) -> dict:
    """Run summary: convergence, final distance, min step alpha, final slack and aggregated alpha."""
    steps = log.steps
    alphas = [s.alpha_step for s in steps if not math.isnan(s.alpha_step)]
    dist = None
    if equilibrium is not None:
        dist = float(np.linalg.norm(log.final_state - np.asarray(equilibrium)))
    hist: dict[str, int] = {}
    for s in steps:
        key = f"{s.delta:.6g}"
        hist[key] = hist.get(key, 0) + 1
    return {
        "mode": log.mode,
        "steps": len(steps),
        "t_end": log.t_end,
        "failure": log.failure,
        "final_distance": dist,
        "converged": None if dist is None else bool(dist < convergence_tol and log.failure is None),
        "min_alpha_step": min(alphas) if alphas else None,
        "final_slack": steps[-1].slack if steps else 0.0,
        "final_alpha_agg": steps[-1].alpha_agg if steps else None,
        "exit_strategy_fired": sum(s.exit_fired for s in steps),
        "updates_accepted": sum(sum(e.accepted for e in s.updates) for s in steps),
        "delta_histogram": hist,
    }
