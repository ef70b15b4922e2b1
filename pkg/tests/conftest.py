from pathlib import Path

import numpy as np
import pytest

from featlens.data import Dataset, write_idx
from featlens.host import FrozenHost, HostConfig, build_host, freeze


@pytest.fixture
def tiny_host_config() -> HostConfig:
    # 16x16 input -> 8x8 -> 4x4 feature maps, N=4 (16 block channels)
    return HostConfig(input_hw=(16, 16), stage_widths=(4,), bottleneck_width=4, seed=0)


@pytest.fixture
def tiny_host(tiny_host_config) -> FrozenHost:
    return freeze(build_host(tiny_host_config))


def make_images(count: int, size: int = 16, seed: int = 0):
    """Blob images whose position encodes the label (0..3), plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 4
    images = rng.integers(0, 40, size=(count, size, size)).astype(np.uint8)
    half = size // 2
    corners = [(2, 2), (2, half), (half, 2), (half, half)]
    for image, label in zip(images, labels):
        top, left = corners[label]
        image[top : top + half - 4, left : left + half - 4] = 220
    return images, labels


@pytest.fixture
def tiny_dataset() -> Dataset:
    images, labels = make_images(16)
    return Dataset(images, labels, "train")


@pytest.fixture
def mnist_dir(tmp_path: Path) -> Path:
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    train_images, train_labels = make_images(16, seed=1)
    test_images, test_labels = make_images(8, seed=2)
    write_idx(data_dir / "train-images-idx3-ubyte", train_images)
    write_idx(data_dir / "train-labels-idx1-ubyte", train_labels.astype(np.uint8))
    write_idx(data_dir / "t10k-images-idx3-ubyte", test_images)
    write_idx(data_dir / "t10k-labels-idx1-ubyte", test_labels.astype(np.uint8))
    return data_dir
