"""Experiment configuration: one JSON document describing system, cost, solver, grid and runs.

Every section is optional and falls back to the defaults below, so the
smallest valid document is ``{"system": "scalar_integrator"}``. Unknown keys
are rejected, which catches typos before a long sweep starts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .dynamics import ControlSystem, QuadraticCost, quadratic_cost, system_from_dict
from .engine import MpcConfig, Partition
from .errors import ContractViolation
from .growth import PAPER_SPACING, StateGrid, default_n_star
from .ocp import OcpSpec

log = logging.getLogger(__name__)

PAPER_SCALE_DT = 0.0125


class ConfigError(ContractViolation):
    """Malformed or out-of-range configuration."""


@dataclass
class CostSettings:
    lam: float = 0.01
    penalize_deviation_from_equilibrium: bool = False
    state_weights: list[float] | None = None
    unsquared_stage_min: bool = False


@dataclass
class OcpSettings:
    """Solver settings for the closed-loop problems (horizon ``T``, sampling ``dt``)."""

    horizon: float = 2.6
    dt: float = 0.05
    steps_per_sample: int = 4
    method: str = "lbfgsb"
    gradient: str = "adjoint"
    tol: float = 1e-6
    max_iter: int = 500
    multistarts: int = 1
    state_penalty: float = 1e4
    seed: int = 0


@dataclass
class GridSettings:
    """State grid around ``center`` (defaults to the equilibrium)."""

    half_widths: list[float] = field(default_factory=lambda: [0.4, 0.5, 0.9])
    spacing: float = 0.1
    center: list[float] | None = None
    clip_to_state_box: bool = True


@dataclass
class LevelSetSettings:
    horizon: float = 0.6
    threshold: float = 0.0081
    multistarts: int = 1


@dataclass
class GrowthSettings:
    """Growth-bound table: sampling ``dt`` and coverage ``t_max``.

    ``states`` (explicit list) bypasses the grid and the level-set filter.
    """

    dt: float = 0.0125
    t_max: float = 3.0
    steps_per_sample: int = 2
    cold_starts: bool = False
    states: list[list[float]] | None = None


@dataclass
class AlphaSettings:
    """Scan ranges: ``T`` from ``T_step`` to ``T_max``; a fixed-``T`` sweep over ``delta``."""

    alpha_bar: float = 0.0
    delta: float = 0.05
    T_step: float = 0.05
    T_max: float = 3.0
    fixed_T: float = 1.25
    delta_step: float = 0.05


@dataclass
class EngineSettings:
    mode: str = "fixed"
    x0: list[float] | None = None
    delta: float = 0.05
    partition_step: float = 0.05
    alpha_bar: float = 0.0
    exit_strategy: str = "use_largest_tau"
    duration: float = 10.0
    slack_exit_threshold: float = 0.0
    cold_starts: bool = False
    T_long: float | None = None
    disturbance: dict | None = None


@dataclass
class ExperimentConfig:
    system: Any = "generator"
    cost: CostSettings = field(default_factory=CostSettings)
    ocp: OcpSettings = field(default_factory=OcpSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    level_set: LevelSetSettings = field(default_factory=LevelSetSettings)
    growth: GrowthSettings = field(default_factory=GrowthSettings)
    alpha: AlphaSettings = field(default_factory=AlphaSettings)
    engine: EngineSettings = field(default_factory=EngineSettings)
    growth_file: str | None = None
    output_dir: str = "out"
    name: str = "experiment"
    base_dir: str = field(default=".", repr=False)

    # --- loading ----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        allowed = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw: dict[str, Any] = {"base_dir": str(base_dir)}
        for key, value in d.items():
            sub = _SECTIONS.get(key)
            if sub is None:
                kw[key] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            names = {f.name for f in fields(sub)}
            bad = set(value) - names
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            kw[key] = sub(**value)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file {path} does not exist")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # --- validation -------------------------------------------------------

    def validate(self) -> None:
        def positive(name, v):
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")

        def unit(name, v):
            if not (isinstance(v, (int, float)) and 0 <= v < 1):
                raise ConfigError(f"{name} must lie in [0, 1), got {v!r}")

        positive("ocp.horizon", self.ocp.horizon)
        positive("ocp.dt", self.ocp.dt)
        positive("growth.dt", self.growth.dt)
        positive("growth.t_max", self.growth.t_max)
        positive("grid.spacing", self.grid.spacing)
        for w in self.grid.half_widths:
            positive("grid.half_widths", w)
        positive("level_set.horizon", self.level_set.horizon)
        if not (isinstance(self.level_set.threshold, (int, float)) and self.level_set.threshold >= 0):
            raise ConfigError("level_set.threshold must be nonnegative")
        unit("alpha.alpha_bar", self.alpha.alpha_bar)
        unit("engine.alpha_bar", self.engine.alpha_bar)
        for name in ("delta", "T_step", "T_max", "fixed_T", "delta_step"):
            positive(f"alpha.{name}", getattr(self.alpha, name))
        positive("engine.delta", self.engine.delta)
        positive("engine.partition_step", self.engine.partition_step)
        positive("engine.duration", self.engine.duration)
        if self.cost.lam < 0:
            raise ConfigError("cost.lam must be nonnegative")
        for name in ("steps_per_sample", "max_iter", "multistarts"):
            v = getattr(self.ocp, name)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"ocp.{name} must be a positive integer")
        if self.growth_file is not None and not self.resolve(self.growth_file).exists():
            raise ConfigError(f"growth_file {self.growth_file} does not exist")
        if isinstance(self.system, str) and self.system.endswith(".json"):
            if not self.resolve(self.system).exists():
                raise ConfigError(f"system file {self.system} does not exist")
        if self.engine.disturbance is not None:
            _check_disturbance(self.engine.disturbance)
        try:
            sysm = self.build_system()
            self.ocp_spec()
            if self.engine.x0 is not None and len(self.engine.x0) != sysm.state_dim:
                raise ConfigError(f"engine.x0 must have {sysm.state_dim} entries")
            if self.grid.center is not None and len(self.grid.center) != sysm.state_dim:
                raise ConfigError(f"grid.center must have {sysm.state_dim} entries")
            if len(self.grid.half_widths) not in (1, sysm.state_dim):
                raise ConfigError(f"grid.half_widths must have 1 or {sysm.state_dim} entries")
            self.mpc_config()
        except ConfigError:
            raise
        except (ContractViolation, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # --- builders ---------------------------------------------------------

    def build_system(self) -> ControlSystem:
        s = self.system
        if isinstance(s, str) and s.endswith(".json"):
            s = json.loads(self.resolve(s).read_text())
        return system_from_dict(s)

    def build_cost(self, system: ControlSystem | None = None) -> QuadraticCost:
        system = system or self.build_system()
        c = self.cost
        return quadratic_cost(
            system,
            c.lam,
            penalize_deviation_from_equilibrium=c.penalize_deviation_from_equilibrium,
            state_weights=c.state_weights,
            unsquared_stage_min=c.unsquared_stage_min,
        )

    def ocp_spec(self, horizon: float | None = None, dt: float | None = None, steps_per_sample: int | None = None,
                 multistarts: int | None = None) -> OcpSpec:
        sysm = self.build_system()
        o = self.ocp
        return OcpSpec(
            system=sysm,
            cost=self.build_cost(sysm),
            horizon=o.horizon if horizon is None else horizon,
            dt=o.dt if dt is None else dt,
            state_penalty=o.state_penalty,
            steps_per_sample=o.steps_per_sample if steps_per_sample is None else steps_per_sample,
            method=o.method,
            gradient=o.gradient,
            tol=o.tol,
            max_iter=o.max_iter,
            multistarts=o.multistarts if multistarts is None else multistarts,
            seed=o.seed,
        )

    def growth_spec(self) -> OcpSpec:
        """Template for the growth chain; its horizon is overwritten per entry."""
        g = self.growth
        return self.ocp_spec(horizon=g.dt, dt=g.dt, steps_per_sample=g.steps_per_sample)

    def level_set_spec(self) -> OcpSpec:
        g = self.growth
        return self.ocp_spec(
            horizon=self.level_set.horizon, dt=g.dt, steps_per_sample=g.steps_per_sample,
            multistarts=self.level_set.multistarts,
        )

    def state_grid(self) -> StateGrid:
        sysm = self.build_system()
        center = sysm.equilibrium_state if self.grid.center is None else self.grid.center
        box = sysm.state_box if self.grid.clip_to_state_box else None
        return StateGrid(np.asarray(center, float), np.asarray(self.grid.half_widths, float),
                         np.asarray(self.grid.spacing, float), box)

    def n_star(self) -> int:
        return default_n_star(self.growth.dt, self.growth.t_max)

    def mpc_config(self, horizon: float | None = None) -> MpcConfig:
        e = self.engine
        spec = self.ocp_spec(horizon=horizon)
        partition = None
        if e.mode in ("adaptive", "adaptive_with_update"):
            partition = Partition.uniform(spec.horizon, e.partition_step)
        return MpcConfig(
            spec=spec,
            mode=e.mode,
            delta=e.delta if e.mode in ("fixed", "slack_monitored") else None,
            partition=partition,
            alpha_bar=e.alpha_bar,
            exit_strategy=e.exit_strategy,
            sim_duration=e.duration,
            slack_exit_threshold=e.slack_exit_threshold,
            cold_starts=e.cold_starts,
        )

    def x0(self) -> np.ndarray:
        if self.engine.x0 is None:
            return np.array(self.build_system().equilibrium_state)
        return np.asarray(self.engine.x0, dtype=float)

    def disturbance(self, seed: int | None = None):
        d = self.engine.disturbance
        if d is None:
            return None
        return make_disturbance(d, self.ocp.dt, self.ocp.seed if seed is None else seed)

    # --- overrides --------------------------------------------------------

    def with_overrides(self, seed: int | None = None, full_scale: bool = False,
                       output_dir: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, ocp=replace(cfg.ocp, seed=seed))
        if full_scale:
            log.warning(
                "full scale: grid spacing %g and table spacing %g; expect a sweep of hours, not minutes",
                PAPER_SPACING, PAPER_SCALE_DT,
            )
            cfg = replace(cfg, grid=replace(cfg.grid, spacing=PAPER_SPACING),
                          growth=replace(cfg.growth, dt=PAPER_SCALE_DT))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        cfg.validate()
        return cfg


_SECTIONS = {
    "cost": CostSettings,
    "ocp": OcpSettings,
    "grid": GridSettings,
    "level_set": LevelSetSettings,
    "growth": GrowthSettings,
    "alpha": AlphaSettings,
    "engine": EngineSettings,
}


# --- disturbances --------------------------------------------------------------


def _check_disturbance(d: dict) -> None:
    kind = d.get("kind")
    if kind == "impulse":
        times, offsets = d.get("times"), d.get("offsets")
        if not isinstance(times, list) or not isinstance(offsets, list) or len(times) != len(offsets):
            raise ConfigError("impulse disturbance needs equally long 'times' and 'offsets' lists")
    elif kind == "uniform":
        if not (isinstance(d.get("amplitude"), (int, float)) and d["amplitude"] >= 0):
            raise ConfigError("uniform disturbance needs a nonnegative 'amplitude'")
    else:
        raise ConfigError(f"unknown disturbance kind {kind!r} (expected 'impulse' or 'uniform')")


def make_disturbance(d: dict, dt: float, seed: int = 0):
    """Additive perturbation hook ``(t, x) -> dx`` applied at measurement instants.

    ``impulse``: fixed offsets at listed times. ``uniform``: i.i.d. draws in
    ``[-amplitude, amplitude]`` per coordinate, seeded by the sample index so
    the result does not depend on how often the hook is called.
    """
    _check_disturbance(d)
    if d["kind"] == "impulse":
        table = [(float(t), np.asarray(o, dtype=float)) for t, o in zip(d["times"], d["offsets"])]

        def impulse(t, x):
            for ti, off in table:
                if abs(t - ti) <= 1e-9 * max(1.0, abs(ti)):
                    return off
            return np.zeros_like(x)

        return impulse

    amp = float(d["amplitude"])
    start = float(d.get("start", 0.0))
    stop = float(d.get("stop", math.inf))
    base = int(d.get("seed", seed))

    def uniform(t, x):
        if not start <= t <= stop:
            return np.zeros_like(x)
        k = int(round(t / dt))
        rng = np.random.default_rng([base, k])
        return rng.uniform(-amp, amp, size=x.shape)

    return uniform
