"""Binary checkpoint format: round trips, determinism, namespaces, errors."""

import numpy as np
import pytest

from vcmr.checkpoint import (
    CheckpointError,
    load_checkpoint,
    merge_namespaces,
    save_checkpoint,
    split_namespace,
)


def sample_arrays(seed=0):
    r = np.random.default_rng(seed)
    return {
        "a.w": r.normal(size=(3, 4)),
        "a.b": np.zeros(4),
        "scalar": np.array(2.5),
        "deep.nest.k": r.normal(size=(2, 2, 2)),
    }


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "model.ckpt"
    arrays = sample_arrays()
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].dtype == np.float64
        assert np.array_equal(loaded[name], arrays[name])


def test_save_is_byte_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, sample_arrays())
    save_checkpoint(p2, sample_arrays())
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, sample_arrays())
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, sample_arrays())
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_namespace_split_and_merge():
    retr = {"w": np.ones(2), "b": np.zeros(2)}
    loc = {"w": np.full(2, 3.0)}
    merged = merge_namespaces(retriever=retr, localizer=loc)
    assert set(merged) == {"retriever.w", "retriever.b", "localizer.w"}
    back = split_namespace(merged, "retriever")
    assert set(back) == {"w", "b"}
    assert np.array_equal(back["w"], retr["w"])
    assert split_namespace(merged, "missing") == {}
