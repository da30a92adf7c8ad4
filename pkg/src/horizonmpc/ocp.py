"""Finite-horizon optimal control over zero-order-hold controls (direct single shooting)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .dynamics import ControlSystem, QuadraticCost, Trajectory, ZohControl, integrate, is_admissible
from .errors import ContractViolation, IntegrationDiverged, SolveFailed

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
BACKTRACK = 0.5


@dataclass(frozen=True, eq=False)
class OcpSpec:
    """Problem data for ``min_u J_T(x, u)`` over ZOH controls of period ``dt``.

    ``method`` selects the optimizer (``"pgd"``: projected gradient with
    Armijo backtracking, ``"lbfgsb"``: scipy's L-BFGS-B). ``gradient`` selects
    exact discrete-adjoint gradients or central finite differences.
    """

    system: ControlSystem
    cost: QuadraticCost
    horizon: float
    dt: float
    state_penalty: float = 1e4
    steps_per_sample: int = 10
    method: str = "pgd"
    gradient: str = "adjoint"
    tol: float = 1e-6
    max_iter: int = 500
    multistarts: int = 5
    seed: int = 0
    fd_step: float = 1e-6

    def __post_init__(self):
        if not (self.horizon > 0 and self.dt > 0):
            raise ContractViolation("horizon and dt must be positive")
        ratio = self.horizon / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ContractViolation(f"horizon {self.horizon} is not a positive multiple of dt {self.dt}")
        if self.method not in ("pgd", "lbfgsb"):
            raise ContractViolation(f"unknown method {self.method!r}")
        if self.gradient not in ("adjoint", "fd"):
            raise ContractViolation(f"unknown gradient {self.gradient!r}")
        if self.steps_per_sample < 1 or self.state_penalty < 0:
            raise ContractViolation("steps_per_sample >= 1 and state_penalty >= 0 required")

    @property
    def pieces(self) -> int:
        return int(round(self.horizon / self.dt))

    def with_horizon(self, horizon: float) -> "OcpSpec":
        return replace(self, horizon=horizon)


@dataclass(frozen=True, eq=False)
class OcpSolution:
    control: ZohControl
    value: float
    trajectory: Trajectory
    converged: bool
    iterations: int
    admissible: bool
    penalized_value: float = math.nan


class _Problem:
    """Objective and gradient closures over one ``(spec, x0)`` pair."""

    def __init__(self, spec: OcpSpec, x0: np.ndarray):
        self.spec = spec
        sysm = spec.system
        self.x0 = x0
        self.h = spec.dt / spec.steps_per_sample
        self.shape = (spec.pieces, sysm.control_dim)
        self.lo = np.broadcast_to(sysm.control_box[:, 0], self.shape)
        self.hi = np.broadcast_to(sysm.control_box[:, 1], self.shape)
        self.cargs = spec.cost.kernel_args()
        self.box = (
            np.ascontiguousarray(sysm.state_box[:, 0]),
            np.ascontiguousarray(sysm.state_box[:, 1]),
            float(spec.state_penalty),
        )
        self.evals = 0

    def project(self, U: np.ndarray) -> np.ndarray:
        return np.clip(U, self.lo, self.hi)

    def value(self, U: np.ndarray) -> float:
        self.evals += 1
        s = self.spec
        J, _, _ = _kernels.cost_only(
            s.system.f, s.system.params, self.x0, np.ascontiguousarray(U), self.h, s.steps_per_sample,
            *self.cargs, *self.box,
        )
        return J

    def value_and_grad(self, U: np.ndarray) -> tuple[float, np.ndarray]:
        s = self.spec
        U = np.ascontiguousarray(U)
        if s.gradient == "adjoint":
            self.evals += 1
            return _kernels.cost_and_grad(
                s.system.f, s.system.fx, s.system.fu, s.system.params, self.x0, U, self.h,
                s.steps_per_sample, *self.cargs, *self.box,
            )
        J = self.value(U)
        G = np.zeros_like(U)
        for idx in np.ndindex(U.shape):
            step = s.fd_step * max(1.0, abs(U[idx]))
            up = U.copy()
            up[idx] += step
            dn = U.copy()
            dn[idx] -= step
            G[idx] = (self.value(up) - self.value(dn)) / (2 * step)
        return J, G


def _pgd(prob: _Problem, U0: np.ndarray, tol: float, max_iter: int):
    """Projected gradient descent, Barzilai-Borwein trial step + Armijo backtracking."""
    U = prob.project(U0)
    J, G = prob.value_and_grad(U)
    if not math.isfinite(J):
        raise IntegrationDiverged(0.0, "initial control diverges")
    gmax = float(np.max(np.abs(G))) if G.size else 0.0
    step = 1.0 / gmax if gmax > 0 else 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pg = prob.project(U - G) - U
        if np.linalg.norm(pg) < tol:
            converged = True
            it -= 1
            break
        accepted = False
        for _ in range(60):
            Un = prob.project(U - step * G)
            d = Un - U
            if not np.any(d):
                break
            Jn = prob.value(Un)
            if math.isfinite(Jn) and Jn <= J + ARMIJO_C * float(np.sum(G * d)):
                accepted = True
                break
            step *= BACKTRACK
        if not accepted:
            break
        Jn, Gn = prob.value_and_grad(Un)
        s = (Un - U).ravel()
        y = (Gn - G).ravel()
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 1e-300 else step * 2.0
        U, J, G = Un, Jn, Gn
    return U, converged, it


def _lbfgsb(prob: _Problem, U0: np.ndarray, tol: float, max_iter: int):
    shape = prob.shape

    def fun(z):
        J, G = prob.value_and_grad(z.reshape(shape))
        if not math.isfinite(J):
            return 1e300, np.zeros_like(z)
        return J, G.ravel()

    bounds = [
        (None if math.isinf(lo) else lo, None if math.isinf(hi) else hi)
        for lo, hi in zip(prob.lo.ravel(), prob.hi.ravel())
    ]
    z0 = prob.project(U0).ravel()
    if not math.isfinite(prob.value(z0.reshape(shape))):
        raise IntegrationDiverged(0.0, "initial control diverges")
    res = minimize(
        fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15, "maxcor": 20},
    )
    U = prob.project(res.x.reshape(shape))
    pg = prob.project(U - prob.value_and_grad(U)[1]) - U
    return U, bool(res.success or np.linalg.norm(pg) < tol), int(res.nit)


def _check_x0(spec: OcpSpec, x0) -> np.ndarray:
    x0 = np.ascontiguousarray(x0, dtype=float)
    if x0.shape != (spec.system.state_dim,):
        raise ContractViolation(f"x0 must have shape ({spec.system.state_dim},)")
    return x0


def solve(spec: OcpSpec, x0, warm_start: ZohControl | None = None) -> OcpSolution:
    """Local minimizer of the penalized cost from one start.

    The start is ``warm_start`` if given, else the equilibrium control. The
    reported ``value`` is the penalty-free cost of the returned control.
    """
    x0 = _check_x0(spec, x0)
    sysm = spec.system
    if warm_start is None:
        U0 = np.tile(sysm.equilibrium_control, (spec.pieces, 1))
    else:
        if warm_start.values.shape != (spec.pieces, sysm.control_dim):
            raise ContractViolation(
                f"warm start has shape {warm_start.values.shape}, expected {(spec.pieces, sysm.control_dim)}"
            )
        U0 = np.array(warm_start.values)
    prob = _Problem(spec, x0)
    try:
        if spec.method == "pgd":
            U, conv, it = _pgd(prob, U0, spec.tol, spec.max_iter)
        else:
            U, conv, it = _lbfgsb(prob, U0, spec.tol, spec.max_iter)
    except IntegrationDiverged as exc:
        raise SolveFailed(str(exc)) from exc
    control = ZohControl(spec.dt, U)
    traj = integrate(sysm, spec.cost, x0, control, spec.steps_per_sample)
    ok, _ = is_admissible(sysm, traj, control)
    return OcpSolution(
        control=control,
        value=traj.cost,
        trajectory=traj,
        converged=conv,
        iterations=it,
        admissible=ok,
        penalized_value=prob.value(U),
    )


def start_controls(spec: OcpSpec, count: int | None = None) -> list[ZohControl]:
    """Deterministic multistart set: u*, box corners, then seeded random draws."""
    count = spec.multistarts if count is None else count
    sysm = spec.system
    N, m = spec.pieces, sysm.control_dim
    us = sysm.equilibrium_control
    lo, hi = sysm.control_box[:, 0], sysm.control_box[:, 1]
    lo_c = np.where(np.isfinite(lo), lo, us - 1.0)
    hi_c = np.where(np.isfinite(hi), hi, us + 1.0)
    rng = np.random.default_rng(spec.seed)
    starts = [us, lo_c, hi_c]
    while len(starts) < count:
        starts.append(rng.uniform(lo_c, hi_c, size=(N, m)))
    out = []
    for s in starts[:count]:
        vals = np.broadcast_to(s, (N, m)) if np.ndim(s) == 1 else s
        out.append(ZohControl(spec.dt, vals))
    return out


def best_solution(spec: OcpSpec, x0, starts: list[ZohControl | None]) -> OcpSolution:
    """Solve from every start and keep the lowest penalized value."""
    best = None
    for st in starts:
        try:
            sol = solve(spec, x0, st)
        except SolveFailed:
            continue
        if best is None or sol.penalized_value < best.penalized_value:
            best = sol
    if best is None:
        raise SolveFailed(f"all {len(starts)} starts diverged from x0={np.asarray(x0).tolist()}")
    return best


def value_function(spec: OcpSpec, x0, multistarts: int | None = None) -> float:
    """``V_T(x0)`` as the minimum over the deterministic multistart set."""
    return best_solution(spec, x0, start_controls(spec, multistarts)).value


def shift_warm_start(previous: ZohControl, shift_steps: int, fill) -> ZohControl:
    """Drop the first ``shift_steps`` pieces and append copies of ``fill``."""
    if not 1 <= shift_steps <= previous.pieces:
        raise ContractViolation(f"shift_steps must be in [1, {previous.pieces}], got {shift_steps}")
    fill = np.atleast_1d(np.asarray(fill, dtype=float))
    tail = np.tile(fill, (shift_steps, 1))
    return ZohControl(previous.dt, np.vstack([previous.values[shift_steps:], tail]))


def extend_control(previous: ZohControl, pieces: int, fill) -> ZohControl:
    """Pad or truncate to ``pieces`` pieces, padding with ``fill``."""
    fill = np.atleast_1d(np.asarray(fill, dtype=float))
    vals = previous.values[:pieces]
    if vals.shape[0] < pieces:
        vals = np.vstack([vals, np.tile(fill, (pieces - vals.shape[0], 1))])
    return ZohControl(previous.dt, vals)
