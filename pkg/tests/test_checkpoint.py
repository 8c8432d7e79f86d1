import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from bottlegan import checkpoint
from bottlegan.exceptions import CheckpointError
from bottlegan.models import ModelBundle

GOLDEN = Path(__file__).parent / "data" / "golden.bgan"

TENSORS = {
    "w": np.array([[1.0, -2.0], [3.5, 0.125]], dtype=np.float32),
    "s": np.array(0.25, dtype=np.float32),
    "vé": np.array([7.0, 8.0, 9.0], dtype=np.float32),
}


def handmade(tensors):
    """Byte layout written out field by field, little-endian."""
    out = b"BGAN" + struct.pack("<I", 1) + struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<q", d)
        for v in arr.reshape(-1).tolist():
            out += struct.pack("<f", v)
    return out


def test_encode_matches_handmade_layout():
    assert checkpoint.encode(TENSORS) == handmade(TENSORS)


def test_golden_file():
    data = GOLDEN.read_bytes()
    assert data == handmade(TENSORS)
    decoded = checkpoint.decode(data)
    assert list(decoded) == list(TENSORS)
    for name, arr in TENSORS.items():
        assert decoded[name].dtype == np.float32
        assert decoded[name].shape == arr.shape
        assert np.array_equal(decoded[name], arr)


def test_bundle_round_trip_bitwise(tmp_path):
    bundle = ModelBundle([3, 1, 4], width=16, code_dim=8, disc_channels=(8, 16, 16), seed=5)
    loaded = checkpoint.checkpoint_roundtrip(bundle, tmp_path / "b.bgan")
    assert loaded.bank.ids == [3, 1, 4]
    a, b = bundle.state_dict(), loaded.state_dict()
    assert list(a) == list(b)
    for name in a:
        assert torch.equal(a[name], b[name]), name


def test_partial_bundle_keeps_generators(tmp_path):
    bundle = ModelBundle([2], width=8, code_dim=4, seed=1)
    tensors = checkpoint.bundle_tensors(bundle, ModelBundle.GENERATOR_KEYS)
    assert not any(k.startswith(("D_s", "D_c")) for k in tensors)
    rebuilt = checkpoint.bundle_from_tensors(checkpoint.decode(checkpoint.encode(tensors)))
    for name, value in tensors.items():
        assert torch.equal(rebuilt.state_dict()[name], value)


def test_bad_magic():
    data = bytearray(checkpoint.encode(TENSORS))
    data[0:4] = b"XXXX"
    with pytest.raises(CheckpointError):
        checkpoint.decode(bytes(data))


def test_version_mismatch():
    data = bytearray(checkpoint.encode(TENSORS))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.decode(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_truncated(cut):
    data = checkpoint.encode(TENSORS)
    with pytest.raises(CheckpointError):
        checkpoint.decode(data[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        checkpoint.decode(checkpoint.encode(TENSORS) + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "absent.bgan")


def test_foreign_tensor_rejected():
    tensors = checkpoint.bundle_tensors(ModelBundle([0], width=8, code_dim=4))
    tensors = {**{k: v.numpy() for k, v in tensors.items()}, "extra": np.zeros(1, np.float32)}
    with pytest.raises(CheckpointError):
        checkpoint.bundle_from_tensors(tensors)
