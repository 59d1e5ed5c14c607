"""Checkpoint roundtrips and fail-closed loading."""

import struct

import numpy as np
import pytest

from conftest import make_config
from d2dmoe.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from d2dmoe.errors import FormatError
from d2dmoe.models import build_model, forward
from d2dmoe.moe import cluster_sites


def roundtrip(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    return load_checkpoint(path)


def test_roundtrip_params_exact(tiny_model, tmp_path):
    loaded = roundtrip(tiny_model, tmp_path)
    assert set(loaded.params) == set(tiny_model.params)
    for name, t in tiny_model.params.items():
        got = loaded.params[name]
        assert got.data.dtype == t.data.dtype
        np.testing.assert_array_equal(got.data, t.data)


def test_roundtrip_preserves_outputs(tiny_model, tmp_path, rng):
    x = rng.integers(0, 64, size=10)
    want = forward(tiny_model, x).logits.data
    got = forward(roundtrip(tiny_model, tmp_path), x).logits.data
    np.testing.assert_array_equal(want, got)


def test_roundtrip_config_and_forms(tmp_path):
    model = build_model(make_config(ffn_kind="gated", activation="gelu"), seed=1)
    loaded = roundtrip(model, tmp_path)
    assert loaded.config == model.config
    assert loaded.forms == model.forms


def test_roundtrip_partitions(tiny_model, tmp_path):
    cluster_sites(tiny_model, ["0.ffn"], n_experts=4, seed=0)
    loaded = roundtrip(tiny_model, tmp_path)
    assert "0.ffn" in loaded.partitions
    np.testing.assert_array_equal(loaded.partitions["0.ffn"].assignment,
                                  tiny_model.partitions["0.ffn"].assignment)


def test_save_is_byte_stable(tiny_model, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(tiny_model, p1)
    save_checkpoint(tiny_model, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_bad_magic(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_truncated_data_section(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 100])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_corrupt_header_json(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes())
    # first byte after magic + u64 length is the JSON opening brace
    blob[len(MAGIC) + 8] = ord("[")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_absurd_header_length(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC):len(MAGIC) + 8] = struct.pack("<Q", 1 << 40)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_data_section_alignment(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    blob = path.read_bytes()
    header_len = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])[0]
    assert (len(MAGIC) + 8 + header_len) % 64 == 0
