"""Tabulated growth bounds ``V_t(x) <= B(t) l*(x)`` from sampled finite-horizon values."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ZohControl
from .errors import ContractViolation, EmptyLevelSet, ExcludedState
from .ocp import OcpSpec, best_solution, extend_control, start_controls

log = logging.getLogger(__name__)

PAPER_SPACING = 0.02
DESK_SPACING = 0.1


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Cartesian grid ``center_i + k * spacing_i`` with ``|k * spacing_i| <= a_i``, clipped to a box."""

    center: np.ndarray
    half_widths: np.ndarray
    spacing: np.ndarray
    state_box: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).ravel()
        a = np.broadcast_to(np.asarray(self.half_widths, dtype=float), c.shape).copy()
        s = np.broadcast_to(np.asarray(self.spacing, dtype=float), c.shape).copy()
        if np.any(a <= 0) or np.any(s <= 0):
            raise ContractViolation("half widths and spacing must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_widths", a)
        object.__setattr__(self, "spacing", s)

    def axes(self) -> list[np.ndarray]:
        out = []
        for c, a, s in zip(self.center, self.half_widths, self.spacing):
            k = int(math.floor(a / s + 1e-9))
            out.append(c + s * np.arange(-k, k + 1))
        return out

    @property
    def points(self) -> np.ndarray:
        pts = np.array(list(itertools.product(*self.axes())), dtype=float)
        if self.state_box is not None:
            box = np.asarray(self.state_box, dtype=float)
            keep = np.all((pts >= box[:, 0]) & (pts <= box[:, 1]), axis=1)
            pts = pts[keep]
        return pts


@dataclass(eq=False)
class GrowthBound:
    """Monotone table ``values[n-1] = B(n dt)`` for ``n = 1..n_star``.

    ``argmax[n-1]`` indexes into ``states`` (the state attaining the
    supremum); ``unconverged[n-1]`` flags entries whose attaining solve did
    not meet the optimizer tolerance.
    """

    dt: float
    values: np.ndarray
    argmax: np.ndarray
    states: np.ndarray | None = None
    unconverged: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.argmax = np.asarray(self.argmax, dtype=int)
        if self.unconverged is None:
            self.unconverged = np.zeros(self.values.shape, dtype=bool)
        self.unconverged = np.asarray(self.unconverged, dtype=bool)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ContractViolation("growth bound needs at least one entry")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ContractViolation("growth bound entries must be finite and positive")
        if np.any(np.diff(self.values) < 0):
            raise ContractViolation("growth bound entries must be nondecreasing")

    @property
    def n_star(self) -> int:
        return int(self.values.size)

    @property
    def coverage(self) -> float:
        return self.n_star * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.n_star + 1)

    def __eq__(self, other):
        if not isinstance(other, GrowthBound):
            return NotImplemented
        same_states = (self.states is None and other.states is None) or (
            self.states is not None and other.states is not None and np.array_equal(self.states, other.states)
        )
        return (
            self.dt == other.dt
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.argmax, other.argmax)
            and np.array_equal(self.unconverged, other.unconverged)
            and same_states
        )

    @classmethod
    def from_values(cls, dt: float, values) -> "GrowthBound":
        """Table from raw values; the monotone envelope is applied."""
        v = np.maximum.accumulate(np.asarray(values, dtype=float))
        return cls(dt, v, np.full(v.shape, -1))

    @classmethod
    def constant(cls, value: float, dt: float, n_star: int) -> "GrowthBound":
        return cls(dt, np.full(n_star, float(value)), np.full(n_star, -1))

    @classmethod
    def exponential(cls, overshoot: float, decay: float, dt: float, n_star: int) -> "GrowthBound":
        """``B(t) = C * int_0^t exp(-mu s) ds`` sampled at the right endpoints."""
        t = dt * np.arange(1, n_star + 1)
        return cls(dt, overshoot * (1.0 - np.exp(-decay * t)) / decay, np.full(n_star, -1))

    # --- persistence ------------------------------------------------------

    def to_csv(self, path: str | Path, meta: dict | None = None) -> Path:
        """Write ``n, t, B, argmax_state_id, unconverged`` plus a JSON sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "t", "B", "argmax_state_id", "unconverged"])
            for n, (t, b, a, u) in enumerate(zip(self.times, self.values, self.argmax, self.unconverged), 1):
                w.writerow([n, repr(float(t)), repr(float(b)), int(a), int(u)])
        side = {
            "dt": self.dt,
            "n_star": self.n_star,
            "states": None if self.states is None else self.states.tolist(),
            "meta": {**self.meta, **(meta or {})},
        }
        with open(sidecar_path(path), "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "GrowthBound":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        values = [float(r["B"]) for r in rows]
        argmax = [int(r["argmax_state_id"]) for r in rows]
        unconv = [bool(int(r.get("unconverged", 0))) for r in rows]
        side_p = sidecar_path(path)
        side = json.loads(side_p.read_text()) if side_p.exists() else {}
        dt = side.get("dt")
        if dt is None:
            dt = float(rows[0]["t"])
        states = side.get("states")
        return cls(
            float(dt),
            np.array(values),
            np.array(argmax),
            None if states is None else np.array(states, dtype=float),
            np.array(unconv),
            side.get("meta", {}),
        )


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


@dataclass(eq=False)
class StateBound:
    """Per-state table: raw values ``V_{n dt}(x)``, their monotone ratio to ``l*(x)``."""

    state: np.ndarray
    stage_min: float
    raw_values: np.ndarray
    values: np.ndarray
    converged: np.ndarray


def state_bound(spec: OcpSpec, x, n_star: int, cold_starts: bool = True) -> StateBound:
    """Solve ``V_{n dt}(x)`` for ``n = 1..n_star`` along a warm-started horizon chain.

    Each horizon starts from the previous minimizer padded with ``u*``; with
    ``cold_starts`` the constant ``u*`` start is tried as well. Any control's
    cost is an upper bound of the value, so unconverged entries stay valid.
    """
    x = np.ascontiguousarray(x, dtype=float)
    lstar = spec.cost.stage_min(x)
    if not lstar > 0:
        raise ExcludedState(f"state {x.tolist()} has zero stage minimum (equilibrium)")
    if n_star < 1:
        raise ContractViolation("n_star must be >= 1")
    us = spec.system.equilibrium_control
    raw = np.empty(n_star)
    conv = np.empty(n_star, dtype=bool)
    prev: ZohControl | None = None
    for n in range(1, n_star + 1):
        spec_n = spec.with_horizon(n * spec.dt)
        starts: list[ZohControl | None] = []
        if prev is not None:
            starts.append(extend_control(prev, n, us))
        if cold_starts or prev is None:
            starts.append(None)
        sol = best_solution(spec_n, x, starts)
        raw[n - 1] = sol.value
        conv[n - 1] = sol.converged
        prev = sol.control
    return StateBound(x, lstar, raw, np.maximum.accumulate(raw) / lstar, conv)


def compute_Bx(spec: OcpSpec, x, n_star: int, cold_starts: bool = True) -> np.ndarray:
    """``B_x(n dt) = max_{m <= n} V_{m dt}(x) / l*(x)`` for ``n = 1..n_star``."""
    return state_bound(spec, x, n_star, cold_starts).values


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def grid_values(spec: OcpSpec, points, multistarts: int | None = None, threads: int = 1) -> np.ndarray:
    """``V_T`` at every point (multistart minimum)."""
    starts = start_controls(spec, multistarts)
    return np.array(_map(lambda x: best_solution(spec, x, starts).value, list(np.asarray(points)), threads))


def level_set_filter(
    spec: OcpSpec,
    grid: StateGrid,
    threshold: float,
    multistarts: int | None = None,
    threads: int = 1,
    return_values: bool = False,
):
    """Grid points with ``V_tau(x) <= threshold`` (``tau`` is ``spec.horizon``).

    Raises
    ------
    EmptyLevelSet
        If no grid point qualifies.
    """
    pts = grid.points
    if math.isinf(threshold) and threshold > 0:
        return (pts, np.full(len(pts), np.nan)) if return_values else pts
    vals = grid_values(spec, pts, multistarts, threads)
    keep = vals <= threshold
    if not keep.any():
        raise EmptyLevelSet(
            f"no grid point has V_{spec.horizon:g} <= {threshold:g} (min {vals.min():.4g} over {len(pts)} points)"
        )
    log.info("level set: %d of %d grid points", int(keep.sum()), len(pts))
    return (pts[keep], vals[keep]) if return_values else pts[keep]


def combine_bounds(bounds: list[StateBound], dt: float, meta: dict | None = None) -> GrowthBound:
    """Entrywise supremum over states followed by the monotone envelope."""
    if not bounds:
        raise ContractViolation("need at least one state")
    table = np.vstack([b.values for b in bounds])
    conv = np.vstack([b.converged for b in bounds])
    arg = np.argmax(table, axis=0)
    sup = table[arg, np.arange(table.shape[1])]
    env = np.maximum.accumulate(sup)
    # provenance follows the envelope: an entry lifted by the running max keeps the earlier argmax
    owner = arg.copy()
    for n in range(1, env.size):
        if env[n] > sup[n]:
            owner[n] = owner[n - 1]
    unconv = ~conv[owner, np.arange(table.shape[1])]
    return GrowthBound(dt, env, owner, np.vstack([b.state for b in bounds]), unconv, dict(meta or {}))


def compute_B(
    spec: OcpSpec,
    states,
    n_star: int,
    threads: int = 1,
    cold_starts: bool = True,
    meta: dict | None = None,
) -> GrowthBound:
    """``B(n dt) = sup_x B_x(n dt)`` over ``states`` with provenance."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ContractViolation("states must be nonempty")
    bounds = _map(lambda x: state_bound(spec, x, n_star, cold_starts), list(states), threads)
    nonconv = sum(int((~b.converged).sum()) for b in bounds)
    info = {"n_states": len(bounds), "unconverged_solves": nonconv, **(meta or {})}
    return combine_bounds(bounds, spec.dt, info)


def default_n_star(dt: float, t_max: float = 3.0) -> int:
    """Smallest ``n`` with ``n dt >= t_max``."""
    return int(math.ceil(t_max / dt - 1e-9))
