import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from horizonmpc.dynamics import (
    GENERATOR_EQUILIBRIUM,
    ControlSystem,
    ZohControl,
    eval_rhs,
    generator,
    integrate,
    is_admissible,
    linear,
    load_system,
    quadratic_cost,
    scalar_integrator,
    system_from_dict,
)
from horizonmpc.errors import ContractViolation, IntegrationDiverged


def test_generator_rest_point(gen):
    assert np.max(np.abs(eval_rhs(gen, GENERATOR_EQUILIBRIUM, [0.0]))) < 1e-8


def test_generator_rhs_by_hand(gen):
    b1, b2, b3, b4, P, E = 34.29, 0.0, 0.149, 0.3341, 28.22, 0.2405
    x1, x2, x3 = 1.2, 0.1, 0.9
    expected = [x2, -b1 * x3 * math.sin(x1) - b2 * x2 + P, b3 * math.cos(x1) - b4 * x3 + E + 0.0]
    np.testing.assert_allclose(eval_rhs(gen, [x1, x2, x3], [0.0]), expected, rtol=1e-14)


def test_integrator_rhs(integrator):
    assert eval_rhs(integrator, [5.0], [-1.0])[0] == -1.0


def test_rhs_dimension_check(gen):
    with pytest.raises(ContractViolation):
        eval_rhs(gen, [1.0, 0.0], [0.0])


def test_rejects_non_equilibrium():
    with pytest.raises(ContractViolation):
        linear([[0.0]], [[1.0]], c=[1.0])
    drift = linear([[0.0]], [[0.0]], c=[1.0], check_equilibrium=False)
    assert eval_rhs(drift, [0.0], [0.0])[0] == 1.0


def test_rejects_equilibrium_outside_box():
    with pytest.raises(ContractViolation):
        scalar_integrator(state_box=[(1.0, 2.0)])


def test_stays_at_rest(integrator):
    cost = quadratic_cost(integrator, lam=1.0)
    tr = integrate(integrator, cost, [0.0], ZohControl.constant(0.1, 10, 0.0))
    assert np.all(tr.states == 0.0) and tr.cost == 0.0


def test_decay_cost_closed_form(stable):
    cost = quadratic_cost(stable, lam=0.0)
    tr = integrate(stable, cost, [1.0], ZohControl.constant(1.0, 1, 0.0), steps_per_sample=50)
    assert abs(tr.cost - (1 - math.exp(-2)) / 2) < 1e-8
    assert abs(tr.final_state[0] - math.exp(-1)) < 1e-9


def test_rk4_fourth_order(stable):
    cost = quadratic_cost(stable, lam=0.0)
    exact = (1 - math.exp(-2)) / 2
    errs = [abs(integrate(stable, cost, [1.0], ZohControl.constant(1.0, 1, 0.0), n).cost - exact) for n in (4, 8)]
    assert 12 < errs[0] / errs[1] < 20


def test_generator_equilibrium_is_invariant(gen, gen_cost):
    tr = integrate(gen, gen_cost, GENERATOR_EQUILIBRIUM, ZohControl.constant(0.05, 12, 0.0))
    assert tr.cost <= 1e-10


def test_cost_matches_quadrature_of_nodes(gen, gen_cost):
    rng = np.random.default_rng(3)
    u = ZohControl(0.05, rng.uniform(-1, 1, (8, 1)))
    fine = integrate(gen, gen_cost, [1.1, 0.05, 0.95], u, steps_per_sample=64)
    # trapezoid over the fine nodes of the integrand l(x(t), u(t))
    ucol = np.repeat(u.values[:, 0], 64)
    lvals = np.array([gen_cost.eval(x, [ui]) for x, ui in zip(fine.states[:-1], ucol)])
    lend = np.array([gen_cost.eval(x, [ui]) for x, ui in zip(fine.states[1:], ucol)])
    h = 0.05 / 64
    assert abs(fine.cost - np.sum(h * (lvals + lend) / 2)) < 1e-6


def test_integration_is_deterministic(gen, gen_cost):
    u = ZohControl(0.05, np.linspace(-2, 2, 10))
    a = integrate(gen, gen_cost, [1.0, 0.0, 1.0], u)
    b = integrate(gen, gen_cost, [1.0, 0.0, 1.0], u)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.accumulated_cost, b.accumulated_cost)


def test_divergence_reports_time():
    blow = linear([[50.0]], [[1.0]])
    with pytest.raises(IntegrationDiverged) as exc:
        integrate(blow, quadratic_cost(blow), [1.0], ZohControl.constant(1.0, 30, 0.0), steps_per_sample=2)
    assert exc.value.time > 0


def test_admissible_generator_run(gen, gen_cost):
    u = ZohControl.constant(0.05, 10, 0.0)
    tr = integrate(gen, gen_cost, [1.1, 0.0, 0.9], u)
    ok, v = is_admissible(gen, tr, u)
    assert ok and v is None


def test_admissibility_reports_first_violation(integrator):
    boxed = scalar_integrator(state_box=[(-1.0, 1.0)])
    u = ZohControl.constant(0.5, 4, 1.0)
    tr = integrate(boxed, quadratic_cost(boxed), [0.0], u)
    ok, v = is_admissible(boxed, tr, u, tol=1e-9)
    assert not ok and v.coordinate == 0 and v.kind == "state"
    assert 1.0 < v.time <= 1.5 and tr.final_state[0] == pytest.approx(2.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(-100, 100))
def test_unbounded_is_always_admissible(us, x0):
    sysm = scalar_integrator()
    u = ZohControl(0.1, us)
    tr = integrate(sysm, quadratic_cost(sysm), [x0], u, steps_per_sample=1)
    assert is_admissible(sysm, tr, u)[0]


def test_zoh_slicing_and_equality():
    u = ZohControl(0.5, [1.0, 2.0, 3.0])
    assert u.pieces == 3 and u.duration == 1.5
    assert u[1:] == ZohControl(0.5, [2.0, 3.0])
    with pytest.raises(ContractViolation):
        ZohControl(0.0, [1.0])


def test_stage_min_squared_and_unsquared(gen):
    x = np.array(GENERATOR_EQUILIBRIUM) + [0.3, 0.4, 0.0]
    assert abs(quadratic_cost(gen).stage_min(x) - 0.25) < 1e-12
    assert abs(quadratic_cost(gen, unsquared_stage_min=True).stage_min(x) - 0.5) < 1e-12


def test_system_dict_round_trip(tmp_path, gen):
    import json

    for sysm in (gen, scalar_integrator(state_box=[(-2.0, None)])):
        p = tmp_path / f"{sysm.name}.json"
        p.write_text(json.dumps(sysm.to_dict()))
        back = load_system(p)
        assert isinstance(back, ControlSystem)
        assert np.array_equal(back.state_box, sysm.state_box)
        assert np.array_equal(back.params, sysm.params)
    assert system_from_dict("scalar_stable").name == "scalar_stable"
    with pytest.raises(ContractViolation):
        system_from_dict("pendulum")


def test_generator_control_bound_override():
    g = generator(control_bound=2.0)
    assert np.array_equal(g.control_box, [[-2.0, 2.0]])
