import sys

import numpy as np
import pytest

from anglefield import neural
from anglefield.geometry import LabeledCloud, build_index, extract_patch
from anglefield.pipeline import TrainConfig, train


def plane_grid(n=7):
    g = np.linspace(-1.0, 1.0, n)
    x, y = np.meshgrid(g, g)
    pts = np.column_stack([x.ravel(), y.ravel(), np.zeros(n * n)])
    return LabeledCloud(pts, np.tile([0.0, 0.0, 1.0], (n * n, 1)))


@pytest.fixture(scope="session")
def plane_patch():
    cloud = plane_grid()
    return extract_patch(build_index(cloud), cloud, 24, 16)


@pytest.fixture(scope="session")
def fresh_model():
    return neural.init_model(11)


@pytest.fixture(scope="session")
def plane_overfit(plane_patch):
    """Model overfit to the single plane patch: k=16, 500 steps, defaults."""
    cfg = TrainConfig(k=16, epochs=500, seed=0)
    return train([], cfg, training_set=[(plane_patch, np.array([0.0, 0.0, 1.0]))])


@pytest.fixture(scope="session")
def plane_model(plane_overfit):
    return plane_overfit[0]


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
