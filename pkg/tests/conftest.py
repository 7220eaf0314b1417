import numpy as np
import pytest

from mest.losses import ConvexLoss
from mest.solver import BoxSpec, MinimizerOnBoundary, brute_force_fit

LOSS_KINDS = ("huber", "power", "quantile")


def random_loss(kind: str, rng: np.random.Generator) -> ConvexLoss:
    if kind == "huber":
        return ConvexLoss.huber(rng.uniform(0.3, 2.5))
    if kind == "power":
        return ConvexLoss.power(float(rng.choice([1.0, 2.0, rng.uniform(1.0, 2.0)])))
    return ConvexLoss.quantile(rng.uniform(0.1, 0.9))


def random_instance(rng: np.random.Generator, n_max: int = 50, p_max: int = 3):
    """Small regression instance with heavy-ish noise and a full-rank design."""
    p = int(rng.integers(1, p_max + 1))
    n = int(rng.integers(max(8, 3 * p), n_max + 1))
    X = rng.standard_normal((n, p))
    if p > 1 and rng.random() < 0.5:
        X[:, 0] = 1.0
    beta = rng.uniform(-3, 3, p)
    y = X @ beta + rng.standard_t(3, n)
    return X, y


def oracle_fit(X, y, loss):
    """Brute-force minimum, centred on least squares, widening the box as needed."""
    center = np.linalg.lstsq(X, y, rcond=None)[0]
    half = 2.0
    for _ in range(8):
        try:
            return brute_force_fit(X, y, loss, BoxSpec(tuple(center), half))
        except MinimizerOnBoundary:
            half *= 2.0
    raise RuntimeError("oracle box kept growing")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
