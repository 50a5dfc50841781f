import numpy as np
import pytest

from supr.kinematics import PoseState
from supr.synth import synth_model


@pytest.fixture(scope="session")
def toy():
    return synth_model(0, 120, 8, foot_net=True)


@pytest.fixture(scope="session")
def full():
    return synth_model(0, full_size=True)


def random_pose(rng, k, scale=0.5, translation=True):
    rot = scale * rng.normal(size=(k, 3))
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norms > 3.0, rot * (3.0 / norms), rot)
    return PoseState(rot, rng.normal(size=3) if translation else np.zeros(3))


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
