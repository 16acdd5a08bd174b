import warnings

import pytest

from dmcvqkd import channel as ch
from dmcvqkd.dimred import CorrectionSet, LinearisationPoints
from dmcvqkd.entropy import SolveOptions, build_problem, solve
from dmcvqkd.protocol import ProtocolParams, build_operators
from dmcvqkd.special import gauss_radau

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="Solution may be inaccurate")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def make_problem(params, loss_db, ops=None, chi=0.0, m=None, **kwargs):
    ops = ops or build_operators(params)
    q = ch.test_distribution(params, ch.ChannelParams.from_loss_db(loss_db, chi, chi))
    points = LinearisationPoints.at(float(q[-1]), ops.kappa)
    cor = CorrectionSet.build(points, ops.kappa, params.d_z)
    rule = gauss_radau(m or params.m)
    return build_problem(ops, rule, q, cor, params.gamma, **kwargs)


@pytest.fixture(scope="session")
def params():
    return ProtocolParams()


@pytest.fixture(scope="session")
def ops(params):
    return build_operators(params)


@pytest.fixture(scope="session")
def small_params():
    return ProtocolParams(n_max=4)


@pytest.fixture(scope="session")
def small_ops(small_params):
    return build_operators(small_params)


@pytest.fixture(scope="session")
def problem_2db(params, ops):
    return make_problem(params, 2.0, ops)


@pytest.fixture(scope="session")
def cert_2db(problem_2db):
    return solve(problem_2db, SolveOptions())


@pytest.fixture(scope="session")
def small_problem(small_params, small_ops):
    return make_problem(small_params, 1.0, small_ops)


@pytest.fixture(scope="session")
def small_cert(small_problem):
    return solve(small_problem, SolveOptions())
