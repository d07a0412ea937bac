import numpy as np
import pytest

from space_lab import datastore as ds
from space_lab import task_model as tm

# the frozen desk-scale defaults every regression value in this suite pins
DEFAULT_TASK_SEED = 7
DEFAULT_RUN_SEED = 11


@pytest.fixture(scope="session")
def default_task():
    return ds.make_task(DEFAULT_TASK_SEED, 3, 3, 4)


@pytest.fixture(scope="session")
def small_task():
    return ds.make_task(13, 3, 2, 2)


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)


def random_model(vocab, length, prompts, seed):
    return tm.AutoregressiveTable.random(vocab, length, prompts,
                                         np.random.default_rng(seed))
