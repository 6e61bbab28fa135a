import numpy as np
import pytest

from gncprior.foe import FoEModel
from gncprior.spline import SplineGrid


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def random_model(depth=2, channels=4, seed=0, noise=0.05, grid=None):
    """Small model with perturbed activations so every partial is non-trivial."""
    rng = np.random.default_rng(seed)
    grid = grid or SplineGrid(15, 6)
    m = FoEModel.create(depth=depth, channels=channels, grid=grid, seed=seed)
    for layer in m.layers:
        layer.weights = layer.weights + noise * rng.standard_normal(layer.weights.shape)
        layer.conv.kernels = layer.conv.kernels * (1 + 0.1 * rng.standard_normal(layer.conv.kernels.shape))
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
