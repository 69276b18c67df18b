import numpy as np
import pytest

from nvrpg import _backend
from nvrpg.gridworld import build_gridworld, chain_2state, frozen_lake_8x8
from nvrpg.mdp import make_rng
from nvrpg.policy import PolicyParams, TabularSoftmax


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def chain():
    return chain_2state()


@pytest.fixture(scope="session")
def lake():
    return build_gridworld(frozen_lake_8x8())


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    if request.param == "numba" and not _backend.HAVE_NUMBA:
        pytest.skip("numba not installed")
    old = _backend.get_backend()
    _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(old)


def random_tabular(num_states, num_actions, rng, scale=1.0):
    param = TabularSoftmax(num_states, num_actions)
    return PolicyParams(scale * rng.standard_normal(param.dim), param)


def zero_policy(mdp):
    param = TabularSoftmax(mdp.num_states, mdp.num_actions)
    return PolicyParams(np.zeros(param.dim), param)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def record_verdict(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} C{number:<2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
