import os
from pathlib import Path

import numpy as np
import pytest

from weightforge.data import load_mnist_idx, synth_dataset

REPO_ROOT = Path(__file__).resolve().parents[1]


def mnist_dir():
    return Path(os.environ.get("WEIGHTFORGE_MNIST_DIR", REPO_ROOT / "data" / "mnist"))


def mnist_available():
    d = mnist_dir()
    return all(
        (d / f"{stem}.gz").exists() or (d / stem).exists()
        for stem in (
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        )
    )


def _mnist_path(stem):
    d = mnist_dir()
    return d / f"{stem}.gz" if (d / f"{stem}.gz").exists() else d / stem


requires_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not present")


@pytest.fixture(scope="session")
def mnist_train():
    if not mnist_available():
        pytest.skip("MNIST IDX files not present")
    return load_mnist_idx(
        _mnist_path("train-images-idx3-ubyte"), _mnist_path("train-labels-idx1-ubyte")
    )


@pytest.fixture(scope="session")
def mnist_test():
    if not mnist_available():
        pytest.skip("MNIST IDX files not present")
    return load_mnist_idx(
        _mnist_path("t10k-images-idx3-ubyte"), _mnist_path("t10k-labels-idx1-ubyte")
    )


@pytest.fixture(scope="session")
def blobs_train():
    return synth_dataset(num_classes=10, n=2000, seed=7)


@pytest.fixture(scope="session")
def blobs_test():
    return synth_dataset(num_classes=10, n=500, seed=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
