"""Tests for the text+binary artifact container and hashing helpers."""

import os

import numpy as np
import pytest

from xmodal_uap.errors import StorageError
from xmodal_uap.serialization import (
    bytes_to_floats,
    canonical_kv_text,
    config_hash,
    fingerprint_bytes,
    floats_to_bytes,
    read_artifact,
    write_artifact,
)


def test_artifact_round_trip(tmp_path):
    path = str(tmp_path / "thing.bin")
    blob = floats_to_bytes(np.arange(12, dtype=np.float32))
    header = {"alpha": "1", "name": "demo"}
    write_artifact(path, "demo-kind", header, blob)
    got_header, got_blob = read_artifact(path, "demo-kind")
    assert got_header["alpha"] == "1"
    assert got_header["name"] == "demo"
    assert got_blob == blob


def test_artifact_wrong_kind_rejected(tmp_path):
    path = str(tmp_path / "thing.bin")
    write_artifact(path, "kind-a", {}, b"xy")
    with pytest.raises(StorageError):
        read_artifact(path, "kind-b")


def test_artifact_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "thing.bin")
    with open(path, "wb") as fh:
        fh.write(b"#something else v1\n---\n")
    with pytest.raises(StorageError):
        read_artifact(path, "kind-a")


def test_artifact_truncated_blob_rejected(tmp_path):
    path = str(tmp_path / "thing.bin")
    write_artifact(path, "kind-a", {}, b"0123456789")
    with open(path, "rb") as fh:
        raw = fh.read()
    with open(path, "wb") as fh:
        fh.write(raw[:-3])
    with pytest.raises(StorageError):
        read_artifact(path, "kind-a")


def test_artifact_rejects_illegal_header_keys(tmp_path):
    path = str(tmp_path / "thing.bin")
    with pytest.raises(StorageError):
        write_artifact(path, "kind-a", {"bad:key": "1"}, b"")
    with pytest.raises(StorageError):
        write_artifact(path, "kind-a", {"key": "line\nbreak"}, b"")


def test_no_temp_file_left_behind(tmp_path):
    path = str(tmp_path / "thing.bin")
    write_artifact(path, "kind-a", {"k": "v"}, b"abc")
    leftovers = [n for n in os.listdir(tmp_path) if n.endswith(".tmp")]
    assert leftovers == []


def test_canonical_kv_text_sorts_keys():
    text = canonical_kv_text({"zeta": 1, "alpha": 2})
    assert text.index("alpha") < text.index("zeta")
    assert text.endswith("\n")


def test_canonical_kv_text_float_repr():
    text = canonical_kv_text({"x": 0.1})
    assert "x=0.1" in text


def test_config_hash_sensitivity():
    base = config_hash({"a": 1, "b": 2.5})
    assert base == config_hash({"b": 2.5, "a": 1})
    assert base != config_hash({"a": 1, "b": 2.5000001})
    assert base != config_hash({"a": 1, "b": 2.5, "c": 0})
    assert len(base) == 16


def test_fingerprint_bytes_shape():
    fp = fingerprint_bytes(b"hello")
    assert len(fp) == 16
    assert fp == fingerprint_bytes(b"hello")
    assert fp != fingerprint_bytes(b"hello!")


def test_float_blob_round_trip():
    rng = np.random.default_rng(2)
    values = rng.normal(size=257).astype(np.float32)
    blob = floats_to_bytes(values)
    back = bytes_to_floats(blob, 257)
    np.testing.assert_array_equal(back, values)


def test_float_blob_count_mismatch():
    blob = floats_to_bytes(np.zeros(4, dtype=np.float32))
    with pytest.raises(StorageError):
        bytes_to_floats(blob, 5)
