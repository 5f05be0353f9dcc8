import numpy as np
import pytest

from mvdxx.synthdata import Dataset, build_dataset


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    build_dataset(3, root, n_cond_max=10, resolution=64, seed=5, grid_res=32)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return Dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
