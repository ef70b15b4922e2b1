"""
FLNS checkpoint format (little-endian):

    magic    4 bytes  b"FLNS"
    version  u32
    count    u32
    count x entry:
        name     u16 length + UTF-8 bytes
        rank     u8
        dims     rank x u32
        payload  prod(dims) x f32, row-major
"""

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "dumps_checkpoint",
    "loads_checkpoint",
    "sidecar_path",
    "save_with_sidecar",
    "load_with_sidecar",
]

import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple, Union

import numpy as np

from ._constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from ._io import dump_config_file, load_config_file
from .errors import CheckpointError
from .types import NamedTensors, PathType

EntriesType = Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


def dumps_checkpoint(entries: EntriesType) -> bytes:
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    names = [name for name, _ in items]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise CheckpointError(f"duplicate tensor names: {duplicates}")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(items))]
    for name, value in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:32]}...")
        array = np.ascontiguousarray(value, dtype="<f4")
        if array.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {array.ndim} too large")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: {what} needs {size} bytes at offset {self.offset}, "
                f"{len(self.raw) - self.offset} left"
            )
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk


def loads_checkpoint(raw: bytes) -> NamedTensors:
    reader = _Reader(raw)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack("<II", reader.take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries: Dict[str, np.ndarray] = {}
    for index in range(count):
        label = f"entry {index}"
        (name_len,) = struct.unpack("<H", reader.take(2, f"{label} name length"))
        name = reader.take(name_len, f"{label} name").decode("utf-8")
        label = f"entry {index} ({name!r})"
        if name in entries:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", reader.take(1, f"{label} rank"))
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{label} dims"))
        size = int(np.prod(dims)) if rank else 1
        payload = reader.take(4 * size, f"{label} payload")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if reader.offset != len(raw):
        raise CheckpointError(f"{len(raw) - reader.offset} trailing bytes after {count} entries")
    return entries


def save_checkpoint(entries: EntriesType, path: PathType, mkdir: bool = True):
    path = Path(path)
    if mkdir:
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fout:
        fout.write(dumps_checkpoint(entries))


def load_checkpoint(path: PathType) -> NamedTensors:
    with open(path, "rb") as fin:
        return loads_checkpoint(fin.read())


def sidecar_path(path: PathType) -> Path:
    return Path(path).with_suffix(".yaml")


def save_with_sidecar(entries: EntriesType, path: PathType, settings: Mapping[str, Any]):
    """Checkpoint plus a YAML file (same stem) holding the settings to rebuild it."""
    save_checkpoint(entries, path)
    dump_config_file(dict(settings), sidecar_path(path))


def load_with_sidecar(path: PathType) -> Tuple[NamedTensors, Dict[str, Any]]:
    entries = load_checkpoint(path)
    sidecar = sidecar_path(path)
    settings = load_config_file(sidecar) if sidecar.exists() else {}
    return entries, settings
