import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from horizonmpc.dynamics import generator, quadratic_cost, scalar_integrator, scalar_stable
from horizonmpc.ocp import OcpSpec

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# the recovery scenario's initial state, used by several modules
X0_RECOVERY = np.array([1.03960373, -0.085, 0.9122974248])


@pytest.fixture(scope="session")
def gen():
    return generator()


@pytest.fixture(scope="session")
def gen_cost(gen):
    return quadratic_cost(gen)


@pytest.fixture(scope="session")
def integrator():
    return scalar_integrator()


@pytest.fixture(scope="session")
def scalar_lq(integrator):
    """x' = u, l = x^2 + u^2, one piece of length 1."""
    return OcpSpec(integrator, quadratic_cost(integrator, lam=1.0), horizon=1.0, dt=1.0, steps_per_sample=50,
                   method="lbfgsb")


@pytest.fixture(scope="session")
def stable():
    return scalar_stable()


def gen_spec(gen, horizon, dt=0.05, spp=4, **kw):
    kw.setdefault("method", "lbfgsb")
    return OcpSpec(gen, quadratic_cost(gen), horizon=horizon, dt=dt, steps_per_sample=spp, **kw)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts (one line per criterion) at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
