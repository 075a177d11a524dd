import numpy as np
import pytest

from semibev.synthworld import gen_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Eight training samples (two labeled) and four evaluation samples."""
    root = tmp_path_factory.mktemp("tiny")
    gen_dataset(8, 0.25, 3, root / "train")
    gen_dataset(4, 1.0, 103, root / "eval")
    return root


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """The desk set: 512 training samples at 10% labeled, 128 eval samples.

    Returns (root, seconds spent generating).
    """
    import time

    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    gen_dataset(512, 0.1, 0, root / "train")
    gen_dataset(128, 1.0, 1000, root / "eval")
    return root, time.perf_counter() - start
