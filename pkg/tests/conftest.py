import numpy as np
import pytest

from lldn.bev import GridSpec
from lldn.synth import SceneConfig, generate_frame

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def grid():
    return GridSpec()


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(16, 16, 1.92, 0.96, 0.0, -7.68)


@pytest.fixture(scope="session")
def frame(grid):
    return generate_frame(SceneConfig(lane_count=4, occluded=1, points=4096), seed=11, grid=grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
