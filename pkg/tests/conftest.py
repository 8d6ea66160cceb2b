import numpy as np
import pytest

from wardflow.synth import canonical_spec, sample_dataset
from wardflow.types import SmmParams, StateSpace, Trajectory

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines after the normal test report."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance verdicts")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def single_exit_params(hold_day: int = 3, max_hold: int = 5) -> SmmParams:
    """One ward, one exit, deterministic stay of ``hold_day`` days."""
    space = StateSpace(transient=("A",), absorbing=("out",))
    hold = np.zeros((1, 2, 2, max_hold))
    hold[0, :, :, 0] = 1.0
    hold[0, 0, 1] = 0.0
    hold[0, 0, 1, hold_day - 1] = 1.0
    return SmmParams(
        space=space,
        weight=np.array([1.0]),
        initial=np.array([[1.0, 0.0]]),
        trans=np.array([[[0.0, 1.0], [0.0, 1.0]]]),
        hold=hold,
    )


def two_ward_params(max_hold: int = 4) -> SmmParams:
    """Two wards, two exits, genuinely stochastic; hand-checkable sizes."""
    space = StateSpace(transient=("A", "B"), absorbing=("home", "died"))
    s = 4
    trans = np.zeros((1, s, s))
    trans[0, 0] = [0.0, 0.6, 0.3, 0.1]
    trans[0, 1] = [0.35, 0.0, 0.55, 0.1]
    trans[0, 2, 2] = 1.0
    trans[0, 3, 3] = 1.0
    hold = np.zeros((1, s, s, max_hold))
    hold[0, 0, 1] = [0.5, 0.3, 0.2, 0.0]
    hold[0, 0, 2] = [0.2, 0.4, 0.3, 0.1]
    hold[0, 0, 3] = [1.0, 0.0, 0.0, 0.0]
    hold[0, 1, 0] = [0.1, 0.2, 0.3, 0.4]
    hold[0, 1, 2] = [0.25, 0.25, 0.25, 0.25]
    hold[0, 1, 3] = [0.0, 1.0, 0.0, 0.0]
    hold[0, 2, :, 0] = 1.0
    hold[0, 3, :, 0] = 1.0
    return SmmParams(
        space=space,
        weight=np.array([1.0]),
        initial=np.array([[0.7, 0.3, 0.0, 0.0]]),
        trans=trans,
        hold=hold,
    )


@pytest.fixture(scope="session")
def canonical():
    return canonical_spec()


@pytest.fixture(scope="session")
def canonical_sample(canonical):
    trajs, labels, report = sample_dataset(canonical, 600, seed=11)
    return trajs, labels, report


def make_traj(visits, exit_state, traj_id="t"):
    return Trajectory(visits=tuple(visits), exit_state=exit_state, traj_id=traj_id)
