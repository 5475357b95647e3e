import numpy as np
import pytest

from eitshape.grid_fem import build_crossed_grid


@pytest.fixture(scope="session")
def mesh16():
    return build_crossed_grid(16)


@pytest.fixture(scope="session")
def mesh32():
    return build_crossed_grid(32)


@pytest.fixture(scope="session")
def mesh64():
    return build_crossed_grid(64)


@pytest.fixture(scope="session")
def mesh128():
    return build_crossed_grid(128)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def disk_indicator(mesh, cx=0.5, cy=0.5, r=0.2):
    """Centroid rasterization of a disk."""
    c = mesh.centroids
    return (np.hypot(c[:, 0] - cx, c[:, 1] - cy) < r).astype(float)


# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_REPORT: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_REPORT.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_REPORT:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_REPORT):
            terminalreporter.write_line(line)
