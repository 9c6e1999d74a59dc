import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from falconlab.data import Dataset, write_idx  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def blob_images(n, size=12, seed=0, num_classes=4):
    """Toy image classes: a bright square in one of four quadrants plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = 0.1 * rng.random((n, size, size))
    half = size // 2
    for i, y in enumerate(labels):
        r, c = divmod(int(y), 2)
        imgs[i, r * half + 1 : r * half + half - 1, c * half + 1 : c * half + half - 1] += 0.8
    return np.clip(imgs, 0, 1), labels


@pytest.fixture
def tiny_images():
    x, y = blob_images(160)
    return Dataset(x, y, "train", 4)


@pytest.fixture
def idx_dir(tmp_path):
    """A miniature MNIST-layout directory with 4-class 12x12 images."""
    x, y = blob_images(300, seed=1)
    xt, yt = blob_images(80, seed=2)
    write_idx(np.rint(x * 255), y, tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    write_idx(np.rint(xt * 255), yt, tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    return tmp_path
