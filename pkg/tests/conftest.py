import numpy as np
import pytest

from ossa.estimator import OpenSetAttributor
from ossa.synthdata import DEFAULT_SEEN, DEFAULT_UNSEEN, build_dataset


@pytest.fixture(scope="session")
def small_data():
    """3 seen + 1 unseen synthetic classes, small counts."""
    return build_dataset(DEFAULT_SEEN[:3], DEFAULT_UNSEEN[:1], counts=(60, 10, 30), unseen_test=40, seed=5)


@pytest.fixture(scope="session")
def trained_attributor(small_data):
    train = small_data.select("train")
    return OpenSetAttributor(epochs=6, random_state=3).fit(train.X, train.y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance as acc

    if not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.format_line(number))
