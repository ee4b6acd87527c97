"""Shared, session-scoped numerical fixtures (profiles and benchmark runs are reused)."""

import numpy as np
import pytest

from latticewaves.exitlab import ExitConfig, adjoint_mode, front_back_pair, normalize_pair, run_exit
from latticewaves.floquet import analyse
from latticewaves.waves import front_seed, solve_profile
from latticewaves.zoo import nagumo, tristable


@pytest.fixture(scope="session")
def nagumo_front():
    """Nagumo h=1, a=0.3 front from 1 (left) to 0 (right); c > 0."""
    m = nagumo(1.0, 0.3)
    return solve_profile(m, front_seed(m, 1.0, 0.0, Xi=40, m=32, c0=0.2))


@pytest.fixture(scope="session")
def nagumo_floquet(nagumo_front):
    return analyse(nagumo_front.model, nagumo_front)


@pytest.fixture(scope="session")
def bench_front():
    """Exit benchmark front: Nagumo h=0.5, a=0.3 on a wider grid."""
    m = nagumo(0.5, 0.3)
    return solve_profile(m, front_seed(m, 1.0, 0.0, Xi=80, m=32, c0=0.5))


@pytest.fixture(scope="session")
def bench_pair(bench_front):
    model, pm, pp = front_back_pair(bench_front)
    rep, _ = analyse(model, pp)
    return model, pm, pp, rep.lambda_decay


@pytest.fixture(scope="session")
def bench_cfg(bench_pair):
    model, pm, pp, lam = bench_pair
    return ExitConfig(model, pm, pp, tau_minus=-30.0, tau_plus=30.0, tau_star=60.0, delta=1e-3,
                      perturbation="site", t_end=20.0, lam=lam)


@pytest.fixture(scope="session")
def bench_modes(bench_pair):
    _, pm, pp, _ = bench_pair
    return adjoint_mode(pm), adjoint_mode(pp)


@pytest.fixture(scope="session")
def bench_report(bench_cfg, bench_modes):
    return run_exit(bench_cfg, modes=bench_modes)


@pytest.fixture(scope="session")
def tristable_pair():
    m = tristable(1.0, -0.7, 0.7)
    pp = solve_profile(m, front_seed(m, 0.0, 1.0, Xi=60, c0=0.1))
    pm = solve_profile(m, front_seed(m, -1.0, 0.0, Xi=60, c0=-0.1))
    return normalize_pair(pm, pp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
