import os

import numpy as np
import pytest

from contmpc.benchmark import build_benchmark
from contmpc.continuation import linear_eta
from contmpc.ocp import PlantModel, euler_ocp


def scalar_lq(h=2, stage_x_weight=0.0, terminal_weight=1.0):
    """``xdot = u`` with unit Euler step, so ``fd = x + u``; cost ``u^2`` per step and
    ``terminal_weight * x^2`` at the end."""
    plant = PlantModel(
        n=1, m=1,
        f=lambda x, u, t: np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        fx=lambda x, u, t: np.zeros(np.shape(x)[:-1] + (1, 1)),
        fu=lambda x, u, t: np.ones(np.shape(x)[:-1] + (1, 1)))
    spec = euler_ocp(
        plant, h, 1.0,
        stage=lambda x, u, t: stage_x_weight * np.sum(x * x, -1) + np.sum(u * u, -1),
        stage_x=lambda x, u, t: 2 * stage_x_weight * x,
        stage_u=lambda x, u, t: 2 * u,
        terminal=lambda x, t: terminal_weight * np.sum(x * x, -1),
        terminal_x=lambda x, t: 2 * terminal_weight * x)
    return plant, spec, linear_eta(1.0)


@pytest.fixture(scope="session")
def bench():
    return build_benchmark()


@pytest.fixture
def lq2():
    return scalar_lq(2)


slow = pytest.mark.skipif(os.environ.get("CONTMPC_SLOW") != "1",
                          reason="long reproduction run; set CONTMPC_SLOW=1")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
