import struct

import numpy as np
import pytest

from featlens.checkpoint import (
    dumps_checkpoint,
    load_checkpoint,
    load_with_sidecar,
    loads_checkpoint,
    save_checkpoint,
    save_with_sidecar,
    sidecar_path,
)
from featlens.errors import CheckpointError


@pytest.fixture
def entries():
    rng = np.random.default_rng(0)
    return {
        "conv.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "conv.bias": rng.normal(size=4).astype(np.float32),
        "alpha": np.array(0.25, dtype=np.float32),
        "empty": np.zeros((0, 5), dtype=np.float32),
    }


def test_round_trip_is_bitwise(tmp_path, entries):
    save_checkpoint(entries, tmp_path / "nested" / "model.flns")
    loaded = load_checkpoint(tmp_path / "nested" / "model.flns")
    assert list(loaded) == list(entries)
    for name, value in entries.items():
        assert loaded[name].shape == value.shape
        assert loaded[name].dtype == np.float32
        assert loaded[name].tobytes() == value.tobytes()


def test_layout():
    raw = dumps_checkpoint([("w", np.array([1.5, -2.0], dtype=np.float32))])
    assert raw[:4] == b"FLNS"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,)
    assert raw[14:15] == b"w"
    assert struct.unpack("<BI", raw[15:20]) == (1, 2)
    assert struct.unpack("<2f", raw[20:]) == (1.5, -2.0)


def test_empty_checkpoint():
    raw = dumps_checkpoint({})
    assert len(raw) == 12
    assert loads_checkpoint(raw) == {}


def test_truncated_checkpoint_names_entry(entries):
    raw = dumps_checkpoint(entries)
    with pytest.raises(CheckpointError, match="conv.bias"):
        # cut inside the second payload
        loads_checkpoint(raw[: raw.index(b"conv.bias") + 20])
    with pytest.raises(CheckpointError, match="truncated"):
        loads_checkpoint(raw[:-1])
    with pytest.raises(CheckpointError):
        loads_checkpoint(b"")


def test_invalid_header():
    raw = dumps_checkpoint({"a": np.ones(2, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        loads_checkpoint(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(raw + b"\x00")


def test_duplicate_names():
    value = np.zeros(1, dtype=np.float32)
    with pytest.raises(CheckpointError, match="duplicate"):
        dumps_checkpoint([("a", value), ("a", value)])

    # hand-built file with a repeated entry
    entry = dumps_checkpoint([("a", value)])[12:]
    raw = b"FLNS" + struct.pack("<II", 1, 2) + entry + entry
    with pytest.raises(CheckpointError, match="duplicate"):
        loads_checkpoint(raw)


def test_values_are_stored_as_float32():
    loaded = loads_checkpoint(dumps_checkpoint({"x": np.array([0.1, 2.0], dtype=np.float64)}))
    np.testing.assert_array_equal(loaded["x"], np.array([0.1, 2.0], dtype=np.float32))


def test_sidecar(tmp_path, entries):
    path = tmp_path / "host.flns"
    assert sidecar_path(path) == tmp_path / "host.yaml"
    settings = {"host": {"input_hw": [16, 16], "seed": 0}, "lens_bins": ["rot90"]}
    save_with_sidecar(entries, path, settings)
    loaded, loaded_settings = load_with_sidecar(path)
    assert loaded_settings == settings
    assert set(loaded) == set(entries)

    save_checkpoint(entries, tmp_path / "bare.flns")
    _, missing = load_with_sidecar(tmp_path / "bare.flns")
    assert missing == {}
