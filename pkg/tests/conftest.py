import numpy as np
import pytest

from maaf.autodiff import precision
from maaf.synthetic_css import gen_dataset


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 48-train / 16-test synthetic dataset shared across tests."""
    root = tmp_path_factory.mktemp("tiny_css")
    gen_dataset(48, 16, seed=3, out_dir=root)
    return root


ACCEPTANCE_LINES: list = []
ACCEPTANCE_TABLES: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES, ACCEPTANCE_TABLES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    for title, table in ACCEPTANCE_TABLES.items():
        terminalreporter.section(title)
        terminalreporter.write_line(table)
