import numpy as np
import pytest

from meflab import data, models


class Quadratic1D:
    """J(x) = scale * sum(x^2) / 2 per sample, ignoring labels."""

    dtype = np.float64

    def __init__(self, scale=1.0):
        self.scale = scale

    def loss(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        return self.scale * 0.5 * np.square(x.reshape(len(x), -1)).sum(axis=1)

    def loss_and_grad(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        return self.loss(x, y), self.scale * x


class LinearLoss:
    """J(x) = w . x, constant gradient."""

    dtype = np.float64

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def loss(self, x, y):
        return np.asarray(x, dtype=np.float64).reshape(len(x), -1) @ self.w.ravel()

    def loss_and_grad(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        return self.loss(x, y), np.broadcast_to(self.w, x.shape).copy()


@pytest.fixture(scope="session")
def shapes():
    return data.shapes16_splits(200, 50, seed=3)


@pytest.fixture(scope="session")
def trained_mlp(shapes):
    train, test = shapes
    model = models.build(models.make_spec("mlp"), 0)
    return models.train(model, train, test, models.TrainConfig(lr=0.05, epochs=15))[0]


def random_model(arch, seed, dtype=np.float64, **kw):
    return models.build(models.make_spec(arch, **kw), seed, dtype=dtype)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
