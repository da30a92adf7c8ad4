import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gen_spec
from horizonmpc.dynamics import GENERATOR_EQUILIBRIUM, linear, quadratic_cost, scalar_integrator
from horizonmpc.errors import ContractViolation, EmptyLevelSet, ExcludedState
from horizonmpc.growth import (
    GrowthBound,
    StateBound,
    StateGrid,
    combine_bounds,
    compute_B,
    compute_Bx,
    default_n_star,
    level_set_filter,
    state_bound,
)
from horizonmpc.ocp import OcpSpec


@pytest.fixture(scope="module")
def lq_spec():
    sysm = scalar_integrator()
    return OcpSpec(sysm, quadratic_cost(sysm, lam=1.0), horizon=1.0, dt=1.0, steps_per_sample=50, method="lbfgsb")


def test_single_piece_entry(lq_spec):
    Bx = compute_Bx(lq_spec, [1.0], 1)
    assert abs(Bx[0] - 0.8125) < 1e-3


def test_entries_nondecreasing(lq_spec):
    Bx = compute_Bx(lq_spec, [1.0], 4)
    assert np.all(np.diff(Bx) >= 0)
    assert Bx[0] <= Bx[1]


def test_drift_only_grows_without_bound():
    drift = linear([[0.0]], [[0.0]], c=[1.0], check_equilibrium=False)
    spec = OcpSpec(drift, quadratic_cost(drift, lam=0.0), 0.5, 0.5, steps_per_sample=20, method="lbfgsb")
    x = 1.0
    Bx = compute_Bx(spec, [x], 6)
    t = 0.5 * np.arange(1, 7)
    exact = ((x + t) ** 3 - x**3) / 3  # int_0^t (x + s)^2 ds, l*(x) = 1
    np.testing.assert_allclose(Bx, exact, rtol=1e-8)
    assert np.all(np.diff(Bx) > 0)


def test_equilibrium_is_excluded(lq_spec):
    with pytest.raises(ExcludedState):
        compute_Bx(lq_spec, [0.0], 2)


def test_singleton_equals_state_table(lq_spec):
    B = compute_B(lq_spec, [[1.0]], 3)
    np.testing.assert_array_equal(B.values, compute_Bx(lq_spec, [1.0], 3))


def test_two_states_entrywise_max(gen):
    spec = gen_spec(gen, 0.05)
    a = np.array(GENERATOR_EQUILIBRIUM) + [0.1, 0.0, 0.0]
    b = np.array(GENERATOR_EQUILIBRIUM) + [0.0, 0.3, 0.0]
    Ba, Bb = compute_Bx(spec, a, 6), compute_Bx(spec, b, 6)
    B = compute_B(spec, [a, b], 6)
    np.testing.assert_array_equal(B.values, np.maximum.accumulate(np.maximum(Ba, Bb)))
    for n, k in enumerate(B.argmax):
        assert B.values[n] == [Ba, Bb][k][n]


def test_threads_do_not_change_results(gen):
    spec = gen_spec(gen, 0.05)
    states = np.array(GENERATOR_EQUILIBRIUM) + np.array([[0.1, 0, 0], [0, 0.2, 0], [0, 0, 0.3]])
    assert compute_B(spec, states, 4, threads=1) == compute_B(spec, states, 4, threads=3)


def test_bound_dominates_sampled_values(gen):
    spec = gen_spec(gen, 0.05)
    states = np.array(GENERATOR_EQUILIBRIUM) + np.array([[0.1, -0.1, 0.0], [-0.1, 0.2, 0.1]])
    B = compute_B(spec, states, 5)
    for x in states:
        sb = state_bound(spec, x, 5)
        assert np.all(sb.raw_values <= B.values * sb.stage_min * (1 + 1e-12))


def test_combine_provenance_follows_envelope():
    mk = lambda v: StateBound(np.zeros(1), 1.0, np.array(v), np.array(v), np.ones(len(v), bool))
    B = combine_bounds([mk([1.0, 3.0, 3.0]), mk([2.0, 2.0, 2.5])], 0.1)
    np.testing.assert_array_equal(B.values, [2.0, 3.0, 3.0])
    np.testing.assert_array_equal(B.argmax, [1, 0, 0])


def test_grid_points_and_box():
    g = StateGrid(np.array([0.0, 0.0]), np.array([0.2, 0.1]), np.array([0.1, 0.1]))
    assert g.points.shape == (15, 2)
    clipped = StateGrid(np.array([0.0]), np.array([0.2]), np.array([0.1]), np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(clipped.points[:, 0], [0.0, 0.1, 0.2])
    with pytest.raises(ContractViolation):
        StateGrid(np.zeros(1), np.ones(1), np.zeros(1))


def test_infinite_threshold_returns_grid(lq_spec):
    g = StateGrid(np.array([0.0]), np.array([1.0]), np.array([0.5]))
    assert np.array_equal(level_set_filter(lq_spec, g, math.inf), g.points)


def test_zero_threshold(lq_spec):
    on = StateGrid(np.array([0.0]), np.array([1.0]), np.array([0.5]))
    np.testing.assert_array_equal(level_set_filter(lq_spec, on, 0.0, 1), [[0.0]])
    off = StateGrid(np.array([0.25]), np.array([0.5]), np.array([0.5]))
    with pytest.raises(EmptyLevelSet):
        level_set_filter(lq_spec, off, 0.0, 1)


def test_generator_level_set_contains_nearest_point(gen):
    # one coarse slice through the rest point keeps the test fast
    spec = gen_spec(gen, 0.6, dt=0.0125, spp=2)
    grid = StateGrid(np.array(GENERATOR_EQUILIBRIUM), np.array([0.4, 0.5, 0.9]), np.array([0.1, 0.1, 0.1]),
                     gen.state_box)
    pts = grid.points
    near = pts[np.argmin(np.linalg.norm(pts - GENERATOR_EQUILIBRIUM, axis=1))]
    sub = StateGrid(np.array(GENERATOR_EQUILIBRIUM), np.array([0.1, 0.1, 0.1]), np.array([0.1, 0.1, 0.1]),
                    gen.state_box)
    members = level_set_filter(spec, sub, 0.0081, 1)
    assert any(np.allclose(m, near) for m in members)
    assert len(members) < len(sub.points)


def test_csv_round_trip(tmp_path):
    B = GrowthBound(0.1, np.array([0.5, 1.0, 1.0]), np.array([0, 1, 1]), np.array([[1.0], [2.0]]),
                    np.array([False, True, False]), {"note": "x"})
    B.to_csv(tmp_path / "B.csv")
    back = GrowthBound.from_csv(tmp_path / "B.csv")
    assert back == B and back.meta["note"] == "x"


def test_table_validation():
    with pytest.raises(ContractViolation):
        GrowthBound(0.1, np.array([1.0, 0.5]), np.array([0, 0]))
    with pytest.raises(ContractViolation):
        GrowthBound(0.1, np.array([0.0, 1.0]), np.array([0, 0]))


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=40))
def test_from_values_is_monotone_envelope(raw):
    B = GrowthBound.from_values(0.1, raw)
    assert np.all(np.diff(B.values) >= 0)
    assert np.all(B.values >= np.asarray(raw))


def test_default_n_star():
    assert default_n_star(0.0125, 3.0) == 240
    assert default_n_star(0.05) == 60
