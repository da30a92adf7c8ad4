"""Control systems, quadratic running costs and RK4 integration under ZOH controls."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import _kernels
from .errors import ContractViolation, IntegrationDiverged

EQUILIBRIUM_TOL = 1e-8

GENERATOR_PARAMS = {"b1": 34.29, "b2": 0.0, "b3": 0.149, "b4": 0.3341, "P": 28.22, "E": 0.2405}
GENERATOR_EQUILIBRIUM = (1.124603730, 0.0, 0.9122974248)
GENERATOR_CONTROL_BOUND = 10.0


def _as_box(box, dim: int, name: str) -> np.ndarray:
    arr = np.array(
        [[-math.inf if lo is None else lo, math.inf if hi is None else hi] for lo, hi in box],
        dtype=float,
    )
    if arr.shape != (dim, 2):
        raise ContractViolation(f"{name} must have shape ({dim}, 2), got {arr.shape}")
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ContractViolation(f"{name} has lower bound above upper bound")
    return arr


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """Time-invariant control system ``x' = f(x, u)`` with box constraints.

    ``f``, ``fx`` and ``fu`` are numba-compiled functions of ``(x, u, params)``
    returning the right-hand side and its Jacobians.
    """

    name: str
    state_dim: int
    control_dim: int
    f: Callable
    fx: Callable
    fu: Callable
    params: np.ndarray
    state_box: np.ndarray
    control_box: np.ndarray
    equilibrium_state: np.ndarray
    equilibrium_control: np.ndarray
    meta: dict = field(default_factory=dict)
    check_equilibrium: bool = True

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "params", np.ascontiguousarray(self.params, dtype=float))
        set_(self, "state_box", _as_box(self.state_box, self.state_dim, "state_box"))
        set_(self, "control_box", _as_box(self.control_box, self.control_dim, "control_box"))
        xs = np.asarray(self.equilibrium_state, dtype=float).reshape(self.state_dim)
        us = np.asarray(self.equilibrium_control, dtype=float).reshape(self.control_dim)
        set_(self, "equilibrium_state", xs)
        set_(self, "equilibrium_control", us)
        for arr in (self.params, self.state_box, self.control_box, xs, us):
            arr.flags.writeable = False
        if not in_box(xs, self.state_box):
            raise ContractViolation("equilibrium state lies outside the state box")
        if not in_box(us, self.control_box):
            raise ContractViolation("equilibrium control lies outside the control box")
        res = np.max(np.abs(self.rhs(xs, us)))
        if self.check_equilibrium and res > EQUILIBRIUM_TOL:
            raise ContractViolation(f"f(x*, u*) = {res:.3g} is not an equilibrium (tol {EQUILIBRIUM_TOL})")

    def rhs(self, x, u) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        u = np.ascontiguousarray(u, dtype=float)
        return self.f(x, u, self.params)

    def to_dict(self) -> dict:
        return {
            "model": self.meta.get("model", self.name),
            "name": self.name,
            "state_dim": self.state_dim,
            "control_dim": self.control_dim,
            "params": self.meta.get("params", self.params.tolist()),
            "state_box": _box_to_json(self.state_box),
            "control_box": _box_to_json(self.control_box),
            "equilibrium_state": self.equilibrium_state.tolist(),
            "equilibrium_control": self.equilibrium_control.tolist(),
        }


def _box_to_json(box: np.ndarray) -> list:
    return [[None if math.isinf(lo) else lo, None if math.isinf(hi) else hi] for lo, hi in box]


def in_box(v, box: np.ndarray) -> bool:
    v = np.asarray(v, dtype=float)
    return bool(np.all(v >= box[:, 0]) and np.all(v <= box[:, 1]))


def eval_rhs(system: ControlSystem, x, u) -> np.ndarray:
    """Evaluate ``f(x, u)`` after checking dimensions."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (system.state_dim,) or u.shape != (system.control_dim,):
        raise ContractViolation(
            f"expected x of shape ({system.state_dim},) and u of shape ({system.control_dim},), "
            f"got {x.shape} and {u.shape}"
        )
    return system.rhs(x, u)


# --- model constructors -----------------------------------------------------


def generator(
    control_bound: float = GENERATOR_CONTROL_BOUND,
    params: dict | None = None,
    equilibrium_state=GENERATOR_EQUILIBRIUM,
) -> ControlSystem:
    """Synchronous generator with ``x1 in [0, pi/2]`` and ``x3 >= 0``."""
    prm = dict(GENERATOR_PARAMS)
    prm.update(params or {})
    vec = [prm[k] for k in ("b1", "b2", "b3", "b4", "P", "E")]
    return ControlSystem(
        name="generator",
        state_dim=3,
        control_dim=1,
        f=_kernels.generator_f,
        fx=_kernels.generator_fx,
        fu=_kernels.generator_fu,
        params=np.array(vec),
        state_box=[(0.0, math.pi / 2), (None, None), (0.0, None)],
        control_box=[(-control_bound, control_bound)],
        equilibrium_state=equilibrium_state,
        equilibrium_control=[0.0],
        meta={"model": "generator", "params": prm},
    )


def linear(
    A,
    B,
    c=None,
    *,
    name: str = "linear",
    state_box=None,
    control_box=None,
    equilibrium_state=None,
    equilibrium_control=None,
    check_equilibrium: bool = True,
) -> ControlSystem:
    """Affine system ``x' = A x + B u + c``; boxes default to unbounded.

    ``check_equilibrium=False`` admits drift-only probes without a rest point.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = A.shape[0], B.shape[1]
    if A.shape != (n, n) or B.shape[0] != n:
        raise ContractViolation(f"incompatible shapes A{A.shape}, B{B.shape}")
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float).reshape(n)
    p = np.concatenate([[n, m], A.ravel(), B.ravel(), c])
    return ControlSystem(
        name=name,
        state_dim=n,
        control_dim=m,
        f=_kernels.linear_f,
        fx=_kernels.linear_fx,
        fu=_kernels.linear_fu,
        params=p,
        state_box=state_box if state_box is not None else [(None, None)] * n,
        control_box=control_box if control_box is not None else [(None, None)] * m,
        equilibrium_state=np.zeros(n) if equilibrium_state is None else equilibrium_state,
        equilibrium_control=np.zeros(m) if equilibrium_control is None else equilibrium_control,
        meta={"model": "linear", "params": {"A": A.tolist(), "B": B.tolist(), "c": c.tolist()}},
        check_equilibrium=check_equilibrium,
    )


def scalar_integrator(**kw) -> ControlSystem:
    """``x' = u``."""
    return linear([[0.0]], [[1.0]], name="scalar_integrator", **kw)


def scalar_stable(**kw) -> ControlSystem:
    """``x' = -x + u``."""
    return linear([[-1.0]], [[1.0]], name="scalar_stable", **kw)


BUILTIN_SYSTEMS: dict[str, Callable[..., ControlSystem]] = {
    "generator": generator,
    "scalar_integrator": scalar_integrator,
    "scalar_stable": scalar_stable,
}


def system_from_dict(d: dict[str, Any] | str) -> ControlSystem:
    """Build a system from a built-in name or a JSON-style definition.

    A definition has a ``model`` key (``generator`` or ``linear``), optional
    ``params``, and optional ``state_box``/``control_box`` (``null`` for an
    unbounded side) and equilibrium overrides.
    """
    if isinstance(d, str):
        if d not in BUILTIN_SYSTEMS:
            raise ContractViolation(f"unknown system {d!r}; built-ins: {sorted(BUILTIN_SYSTEMS)}")
        return BUILTIN_SYSTEMS[d]()
    d = dict(d)
    model = d.get("model", d.get("name"))
    if model == "generator":
        sys = generator(
            params=d.get("params"),
            equilibrium_state=d.get("equilibrium_state", GENERATOR_EQUILIBRIUM),
        )
        return ControlSystem(
            name=d.get("name", "generator"),
            state_dim=3,
            control_dim=1,
            f=sys.f,
            fx=sys.fx,
            fu=sys.fu,
            params=sys.params,
            state_box=d.get("state_box", _box_to_json(sys.state_box)),
            control_box=d.get("control_box", _box_to_json(sys.control_box)),
            equilibrium_state=sys.equilibrium_state,
            equilibrium_control=d.get("equilibrium_control", sys.equilibrium_control),
            meta=sys.meta,
        )
    if model in ("scalar_integrator", "scalar_stable") and "params" not in d:
        base = BUILTIN_SYSTEMS[model]()
        d["params"] = base.meta["params"]
        d.setdefault("name", model)
        model = "linear"
    if model == "linear":
        prm = d.get("params", {})
        return linear(
            prm["A"],
            prm["B"],
            prm.get("c"),
            name=d.get("name", "linear"),
            state_box=d.get("state_box"),
            control_box=d.get("control_box"),
            equilibrium_state=d.get("equilibrium_state"),
            equilibrium_control=d.get("equilibrium_control"),
        )
    raise ContractViolation(f"unknown model {model!r}")


def load_system(path: str | Path) -> ControlSystem:
    with open(path) as fh:
        return system_from_dict(json.load(fh))


# --- running cost -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """``l(x, u) = sum_i w_i (x_i - x_ref_i)^2 + lam |u - u_ref|^2``.

    ``stage_min`` is the infimum over the control box. With
    ``unsquared_stage_min=True`` it returns the Euclidean distance instead of
    its square (sensitivity probe).
    """

    state_ref: np.ndarray
    control_ref: np.ndarray
    lam: float = 0.01
    state_weights: np.ndarray | None = None
    control_box: np.ndarray | None = None
    unsquared_stage_min: bool = False

    def __post_init__(self):
        xr = np.ascontiguousarray(self.state_ref, dtype=float).ravel()
        ur = np.ascontiguousarray(self.control_ref, dtype=float).ravel()
        w = np.ones_like(xr) if self.state_weights is None else np.asarray(self.state_weights, float).ravel()
        if w.shape != xr.shape or np.any(w < 0) or self.lam < 0:
            raise ContractViolation("cost weights must be nonnegative and match the state dimension")
        object.__setattr__(self, "state_ref", xr)
        object.__setattr__(self, "control_ref", ur)
        object.__setattr__(self, "state_weights", np.ascontiguousarray(w))
        if self.control_box is not None:
            object.__setattr__(self, "control_box", np.asarray(self.control_box, dtype=float))

    def eval(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(
            np.sum(self.state_weights * (x - self.state_ref) ** 2) + self.lam * np.sum((u - self.control_ref) ** 2)
        )

    def stage_min(self, x) -> float:
        x = np.asarray(x, dtype=float)
        sq = float(np.sum(self.state_weights * (x - self.state_ref) ** 2))
        if self.unsquared_stage_min:
            sq = math.sqrt(sq)
        ctrl = 0.0
        if self.lam > 0 and self.control_box is not None:
            nearest = np.clip(self.control_ref, self.control_box[:, 0], self.control_box[:, 1])
            ctrl = self.lam * float(np.sum((nearest - self.control_ref) ** 2))
        return sq + ctrl

    def kernel_args(self):
        return self.state_ref, self.state_weights, self.control_ref, float(self.lam)


def quadratic_cost(
    system: ControlSystem,
    lam: float = 0.01,
    *,
    penalize_deviation_from_equilibrium: bool = False,
    state_weights=None,
    unsquared_stage_min: bool = False,
) -> QuadraticCost:
    """Shipped cost ``|x - x*|^2 + lam |u|^2`` (or ``lam |u - u*|^2``)."""
    uref = system.equilibrium_control if penalize_deviation_from_equilibrium else np.zeros(system.control_dim)
    return QuadraticCost(
        state_ref=system.equilibrium_state,
        control_ref=uref,
        lam=lam,
        state_weights=state_weights,
        control_box=system.control_box,
        unsquared_stage_min=unsquared_stage_min,
    )


# --- ZOH controls and trajectories ------------------------------------------


@dataclass(frozen=True, eq=False)
class ZohControl:
    """Piecewise-constant control; ``values[k]`` acts on ``[k dt, (k+1) dt)``."""

    dt: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ContractViolation("ZOH control needs at least one piece")
        if not self.dt > 0:
            raise ContractViolation("sampling period must be positive")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def pieces(self) -> int:
        return self.values.shape[0]

    @property
    def duration(self) -> float:
        return self.pieces * self.dt

    def __getitem__(self, sl: slice) -> "ZohControl":
        return ZohControl(self.dt, self.values[sl])

    def __eq__(self, other):
        return (
            isinstance(other, ZohControl)
            and self.dt == other.dt
            and np.array_equal(self.values, other.values)
        )

    @classmethod
    def constant(cls, dt: float, pieces: int, value) -> "ZohControl":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(dt, np.tile(value, (pieces, 1)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    accumulated_cost: np.ndarray

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def cost(self) -> float:
        return float(self.accumulated_cost[-1])

    def state_at(self, t: float) -> np.ndarray:
        """State at a node time (nearest node)."""
        return self.states[int(np.argmin(np.abs(self.times - t)))]

    def cost_at(self, t: float) -> float:
        return float(self.accumulated_cost[int(np.argmin(np.abs(self.times - t)))])


def integrate(system: ControlSystem, cost: QuadraticCost, x0, u: ZohControl, steps_per_sample: int = 10) -> Trajectory:
    """Classical RK4 on the cost-augmented state with step ``dt / steps_per_sample``.

    Raises
    ------
    IntegrationDiverged
        If a non-finite state appears; carries the time of failure.
    """
    if steps_per_sample < 1:
        raise ContractViolation("steps_per_sample must be >= 1")
    x0 = np.ascontiguousarray(x0, dtype=float)
    if x0.shape != (system.state_dim,) or not np.all(np.isfinite(x0)):
        raise ContractViolation("x0 must be a finite state vector")
    if u.values.shape[1] != system.control_dim:
        raise ContractViolation("control dimension mismatch")
    h = u.dt / steps_per_sample
    X, C, fail = _kernels.rollout(
        system.f, system.params, x0, np.ascontiguousarray(u.values), h, steps_per_sample, *cost.kernel_args()
    )
    if fail >= 0:
        raise IntegrationDiverged(fail * h)
    times = np.arange(X.shape[0]) * h
    return Trajectory(times, X, C)


@dataclass(frozen=True)
class Violation:
    time: float
    coordinate: int
    kind: str  # "state" or "control"
    value: float


def is_admissible(system: ControlSystem, traj: Trajectory, u: ZohControl, tol: float = 0.0):
    """Box check on every trajectory node and control value.

    Returns ``(ok, first_violation_or_None)``.
    """
    lo, hi = system.control_box[:, 0], system.control_box[:, 1]
    bad_u = (u.values < lo - tol) | (u.values > hi + tol)
    first_u = None
    if bad_u.any():
        k, j = np.argwhere(bad_u)[0]
        first_u = Violation(k * u.dt, int(j), "control", float(u.values[k, j]))
    lo, hi = system.state_box[:, 0], system.state_box[:, 1]
    bad_x = (traj.states < lo - tol) | (traj.states > hi + tol)
    first_x = None
    if bad_x.any():
        k, j = np.argwhere(bad_x)[0]
        first_x = Violation(float(traj.times[k]), int(j), "state", float(traj.states[k, j]))
    cands = [v for v in (first_u, first_x) if v is not None]
    if not cands:
        return True, None
    return False, min(cands, key=lambda v: v.time)
