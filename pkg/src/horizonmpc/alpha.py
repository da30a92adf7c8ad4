"""Closed-form suboptimality index from a tabulated growth bound.

For a table ``B`` with plateaus ``B(t) = B(n dt)`` on ``((n-1) dt, n dt]``::

    I1 = int_delta^T 1/B,   I2 = int_{T-delta}^T 1/B
    alpha(T, delta) = 1 - exp(-I1) exp(-I2) / ((1 - exp(-I1)) (1 - exp(-I2)))
                    = 1 - 1 / (expm1(I1) * expm1(I2))

The second form is used for evaluation. It is symmetric in ``(I1, I2)``
bit for bit and keeps precision for small integrals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import AtEquilibrium, ContractViolation, CoverageExceeded, DegenerateHorizon
from .growth import GrowthBound

GRID_SNAP = 1e-9


@dataclass(frozen=True)
class AlphaReport:
    T: float
    delta: float
    alpha: float
    integral_delta_T: float
    integral_Tmd_T: float

    def formula_alpha(self) -> float:
        """Textbook form evaluated from the stored integrals (audit path)."""
        e1 = math.exp(-self.integral_delta_T)
        e2 = math.exp(-self.integral_Tmd_T)
        return 1.0 - (e1 * e2) / ((1.0 - e1) * (1.0 - e2))


def _cumulative(B: GrowthBound) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(B.dt / B.values)])


def _primitive(B: GrowthBound, cum: np.ndarray, t: float) -> float:
    """``int_0^t 1/B``; grid points are snapped so on-grid sums are exact."""
    if t < 0:
        raise ContractViolation(f"negative time {t}")
    r = t / B.dt
    n = int(round(r))
    if abs(r - n) <= GRID_SNAP * max(1.0, r):
        if n > B.n_star:
            raise CoverageExceeded(t, n, B.n_star)
        return float(cum[n])
    n = int(math.floor(r))
    if n >= B.n_star:
        raise CoverageExceeded(t, n + 1, B.n_star)
    return float(cum[n] + (t - n * B.dt) / B.values[n])


def inv_B_integral(B: GrowthBound, a: float, b: float) -> float:
    """Exact ``int_a^b 1/B(t) dt`` for the right-endpoint plateau extension."""
    if not 0 <= a <= b:
        raise ContractViolation(f"need 0 <= a <= b, got a={a}, b={b}")
    cum = _cumulative(B)
    return _primitive(B, cum, b) - _primitive(B, cum, a)


def _alpha_from_integrals(i1: float, i2: float) -> float:
    if i1 <= 0 or i2 <= 0:
        raise DegenerateHorizon(f"vanishing integral (I1={i1}, I2={i2})")
    return 1.0 - 1.0 / (math.expm1(i1) * math.expm1(i2))


def alpha_of(B: GrowthBound, T: float, delta: float) -> AlphaReport:
    """Suboptimality index ``alpha_{T, delta}`` together with both integrals."""
    if not 0 < delta < T:
        raise ContractViolation(f"need 0 < delta < T, got delta={delta}, T={T}")
    cum = _cumulative(B)
    fT = _primitive(B, cum, T)
    i1 = fT - _primitive(B, cum, delta)
    i2 = fT - _primitive(B, cum, T - delta)
    return AlphaReport(float(T), float(delta), _alpha_from_integrals(i1, i2), i1, i2)


def divergence_probe(B: GrowthBound, T: float, deltas) -> list[float]:
    """``alpha_{T, delta}`` along a (decreasing) sequence of control horizons."""
    return [alpha_of(B, T, d).alpha for d in deltas]


@dataclass(frozen=True)
class HorizonSearch:
    """Result of the minimal-horizon search.

    When ``found`` is false, ``required_n_star`` names a table length worth
    trying (twice the current coverage) and ``T`` is ``None``.
    """

    found: bool
    T: float | None
    alpha: float | None
    previous_T: float | None
    previous_alpha: float | None
    required_n_star: int | None = None


def min_stabilizing_horizon(
    B: GrowthBound,
    delta: float | Callable[[float], float],
    alpha_bar: float = 0.0,
    step: float | None = None,
) -> HorizonSearch:
    """Smallest ``T = m * step > delta`` with ``alpha_{T, delta} > alpha_bar``.

    ``delta`` may be a function of ``T`` (e.g. ``lambda T: T / 2``).
    ``step`` defaults to the table spacing.
    """
    if not 0 <= alpha_bar < 1:
        raise ContractViolation("alpha_bar must lie in [0, 1)")
    step = B.dt if step is None else float(step)
    m_max = int(math.floor(B.coverage / step + GRID_SNAP))
    prev_T = prev_a = None
    for m in range(1, m_max + 1):
        T = m * step
        d = delta(T) if callable(delta) else float(delta)
        if not 0 < d < T - GRID_SNAP * step:
            continue
        a = alpha_of(B, T, d).alpha
        if a > alpha_bar:
            return HorizonSearch(True, T, a, prev_T, prev_a)
        prev_T, prev_a = T, a
    return HorizonSearch(False, None, None, prev_T, prev_a, required_n_star=2 * B.n_star)


def a_posteriori_alpha(V_now: float, V_next: float, stage_integral: float) -> float:
    """Observed decrease ratio ``(V_now - V_next) / int l``.

    Raises
    ------
    AtEquilibrium
        If ``stage_integral <= 0``.
    """
    if not stage_integral > 0:
        raise AtEquilibrium(f"stage integral {stage_integral} is not positive")
    return (V_now - V_next) / stage_integral


# --- scans --------------------------------------------------------------------


@dataclass(eq=False)
class AlphaScan:
    """Rows ``(T, delta, alpha, valid)``; invalid rows carry ``alpha = nan``."""

    T: np.ndarray
    delta: np.ndarray
    alpha: np.ndarray
    valid: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, AlphaScan):
            return NotImplemented
        return (
            np.array_equal(self.T, other.T)
            and np.array_equal(self.delta, other.delta)
            and np.array_equal(self.alpha, other.alpha, equal_nan=True)
            and np.array_equal(self.valid, other.valid)
        )

    def __len__(self):
        return len(self.T)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "delta", "alpha", "valid"])
            for T, d, a, v in zip(self.T, self.delta, self.alpha, self.valid):
                w.writerow([repr(float(T)), repr(float(d)), repr(float(a)), int(v)])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "AlphaScan":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            np.array([float(r["T"]) for r in rows]),
            np.array([float(r["delta"]) for r in rows]),
            np.array([float(r["alpha"]) for r in rows]),
            np.array([bool(int(r["valid"])) for r in rows]),
        )

    def table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pivot to ``(T_grid, delta_grid, alpha[T, delta])``."""
        Tg = np.unique(self.T)
        dg = np.unique(self.delta)
        tab = np.full((Tg.size, dg.size), np.nan)
        tab[np.searchsorted(Tg, self.T), np.searchsorted(dg, self.delta)] = self.alpha
        return Tg, dg, tab


def scan_pairs(B: GrowthBound, pairs) -> AlphaScan:
    """Evaluate ``alpha`` at arbitrary ``(T, delta)`` pairs, marking invalid ones."""
    Ts, ds, als, ok = [], [], [], []
    for T, d in pairs:
        try:
            a = alpha_of(B, T, d).alpha
            valid = True
        except (ContractViolation, CoverageExceeded, DegenerateHorizon):
            a, valid = math.nan, False
        Ts.append(T)
        ds.append(d)
        als.append(a)
        ok.append(valid)
    return AlphaScan(np.array(Ts, float), np.array(ds, float), np.array(als, float), np.array(ok, bool))


def scan_grid(B: GrowthBound, T_grid, delta_grid) -> AlphaScan:
    return scan_pairs(B, [(T, d) for T in T_grid for d in delta_grid])


def scan_fixed_delta(B: GrowthBound, T_grid, delta: float) -> AlphaScan:
    return scan_pairs(B, [(T, delta) for T in T_grid])


def scan_half(B: GrowthBound, T_grid) -> AlphaScan:
    return scan_pairs(B, [(T, T / 2) for T in T_grid])


def scan_fixed_T(B: GrowthBound, T: float, step: float) -> AlphaScan:
    """``alpha_{T, n step}`` for ``n = 1 .. T/step - 1``."""
    m = int(round(T / step))
    return scan_pairs(B, [(T, n * step) for n in range(1, m)])


def multiples(step: float, start: int, stop: int) -> np.ndarray:
    """``step * [start, ..., stop]`` computed as integer multiples (no accumulation error)."""
    return step * np.arange(start, stop + 1)


def sign_threshold(scan: AlphaScan, level: float = 0.0) -> float | None:
    """Smallest ``T`` in the scan after which every valid row has ``alpha > level``."""
    order = np.argsort(scan.T)
    T, a, v = scan.T[order], scan.alpha[order], scan.valid[order]
    bad = v & ~(a > level)
    if not (v & ~bad).any():
        return None
    last_bad = np.nonzero(bad)[0]
    if last_bad.size == 0:
        return float(T[v][0])
    after = np.nonzero(v & (np.arange(T.size) > last_bad[-1]))[0]
    return float(T[after[0]]) if after.size else None
