# Add shared fixtures here
import numpy as np
import pytest

from gptube.core.gp import Dataset, GpModel, Hyperparams


@pytest.fixture
def model_1d():
    """sin(x) on 15 points of [-2, 2], fixed hyperparameters."""
    X = np.linspace(-2.0, 2.0, 15)[:, None]
    return GpModel(Dataset(X, np.sin(X[:, 0])), [Hyperparams(1.0, (0.5,), 1e-4)])


@pytest.fixture
def model_2d():
    """Autonomous 2-D map learned on a 5x5 grid of [-1, 1]²."""
    g = np.linspace(-1.0, 1.0, 5)
    X = np.array([[a, b] for a in g for b in g])
    Y = np.column_stack([0.9 * X[:, 0] + 0.1 * X[:, 1],
                         0.5 * np.sin(X[:, 0]) + 0.8 * X[:, 1]])
    h = Hyperparams(1.0, (0.8, 0.8), 1e-4)
    return GpModel(Dataset(X, Y), [h, h])


@pytest.fixture
def controlled_model():
    """One state, one control: x' = 0.9x + 0.1u on a 7x7 grid."""
    g = np.linspace(-1.0, 1.0, 7)
    X = np.array([[x, u] for x in g for u in g])
    Y = 0.9 * X[:, 0] + 0.1 * X[:, 1]
    return GpModel(Dataset(X, Y), [Hyperparams(1.0, (1.0, 1.0), 1e-4)])


@pytest.fixture
def prior_model():
    """One training point far away: the posterior near the origin is the prior."""
    return GpModel(Dataset([[100.0]], [0.0]), [Hyperparams(1.0, (0.5,), 1e-4)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path / "out")
