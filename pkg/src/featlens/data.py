from __future__ import annotations

__all__ = [
    "Dataset",
    "load_mnist_idx",
    "load_mnist",
    "resolve_data_dir",
    "make_rotated_dataset",
    "prepare_batch",
    "write_idx",
]

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._constants import ENV_DATA_DIR, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES
from .errors import IdxFormatError, ShapeError
from .transforms import CanvasPolicy, TransformSpec, apply_transform, resize_image
from .types import HW, PathType


module_logger = logging.getLogger(__name__)
module_logger.addHandler(logging.NullHandler())


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    # applied transform per image, if any
    specs: Optional[List[TransformSpec]] = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ShapeError(f"images must be (N, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.specs is not None and len(self.specs) != len(self.images):
            raise ShapeError(f"{len(self.specs)} transform specs for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Union[Sequence[int], np.ndarray, slice]) -> Dataset:
        if isinstance(indices, slice):
            indices = np.arange(len(self))[indices]
        indices = np.asarray(indices, dtype=np.int64)
        specs = None if self.specs is None else [self.specs[i] for i in indices]
        return Dataset(self.images[indices], self.labels[indices], self.split, specs)

    def batches(
        self, batch_size: int, rng: Optional[np.random.Generator] = None
    ) -> Iterator[np.ndarray]:
        """Index arrays of consecutive batches; shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield order[start : start + batch_size]

    @property
    def angles(self) -> np.ndarray:
        if self.specs is None:
            return np.zeros(len(self))
        return np.array([s.angle_deg for s in self.specs])


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fin:
            return fin.read()
    with open(path, "rb") as fin:
        return fin.read()


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, f"truncated header ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(path, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise IdxFormatError(
            path, f"truncated payload: {len(raw) - header} of {expected} bytes for dims {dims}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_mnist_idx(images_path: PathType, labels_path: PathType, split: str = "train") -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(
            labels_path, f"{len(labels)} labels but {len(images)} images in {images_path}"
        )
    module_logger.info(f"loaded {len(images)} {split} images of {images.shape[1:]} from {images_path}")
    return Dataset(images.copy(), labels.astype(np.int64), split)


def resolve_data_dir(data_dir: Optional[PathType] = None) -> Path:
    if data_dir:
        return Path(data_dir)
    return Path(os.environ.get(ENV_DATA_DIR, "data"))


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}(.gz) not found in {data_dir}")


def load_mnist(split: str = "train", data_dir: Optional[PathType] = None) -> Dataset:
    if split not in MNIST_FILES:
        raise ValueError(f"unsupported split: {split}")
    root = resolve_data_dir(data_dir)
    images_name, labels_name = MNIST_FILES[split]
    return load_mnist_idx(_find(root, images_name), _find(root, labels_name), split)


def write_idx(path: PathType, array: np.ndarray):
    """Write a uint8 array as an IDX file (images: 3-D, labels: 1-D)."""
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    with open(path, "wb") as fout:
        fout.write(struct.pack(">I", magic))
        fout.write(struct.pack(f">{array.ndim}I", *array.shape))
        fout.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def make_rotated_dataset(
    dataset: Dataset,
    angles: Union[float, Tuple[float, float]] = (0.0, 360.0),
    seed: int = 0,
) -> Dataset:
    """Rotate every image by an angle drawn uniformly from ``angles`` (or fixed)."""
    rng = np.random.default_rng(seed)
    if isinstance(angles, tuple):
        drawn = rng.uniform(angles[0], angles[1], size=len(dataset))
    else:
        drawn = np.full(len(dataset), float(angles))
    specs = [TransformSpec.rotation(a) for a in drawn]
    images = np.stack(
        [apply_transform(img, spec) for img, spec in zip(dataset.images, specs)]
    ) if len(dataset) else dataset.images.copy()
    return Dataset(images, dataset.labels.copy(), dataset.split, specs)


def prepare_batch(
    images: np.ndarray,
    input_hw: HW,
    spec: Union[TransformSpec, Sequence[TransformSpec], None] = None,
    policy: CanvasPolicy = CanvasPolicy.PAD,
) -> np.ndarray:
    """uint8 (B, H, W) -> float32 (B, 1, h, w) in [0, 1], resized then transformed."""
    specs: Sequence[Optional[TransformSpec]]
    if spec is None or isinstance(spec, TransformSpec):
        specs = [spec] * len(images)
    else:
        specs = spec
    out = []
    for img, s in zip(images, specs):
        x = resize_image(img.astype(np.float64) / 255.0, input_hw)
        if s is not None:
            x = apply_transform(x, s, policy)
        out.append(x)
    return np.stack(out)[:, None].astype(np.float32)
