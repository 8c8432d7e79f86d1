"""Versioned binary tensor container.

Layout (all integers little-endian)::

    b"BGAN" | u32 version | u32 n_tensors
    repeated n_tensors times:
        u32 name_len | name (UTF-8) | u32 rank | i64 dims[rank] | f32 data[prod(dims)]

Tensors are written in float32; integer buffers such as style ids round-trip
exactly as long as they stay below 2**24.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError

MAGIC = b"BGAN"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def encode(tensors):
    """Serialize a mapping of name -> array-like to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.array(value, dtype=_F32, order="C")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode(data):
    """Parse bytes produced by :func:`encode` into name -> float32 ndarray."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a BGAN checkpoint (bad magic bytes)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError("corrupt tensor name") from err
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}q", take(8 * rank))
        if any(d < 0 for d in dims):
            raise CheckpointError(f"negative dimension in {name}")
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype=_F32).reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(tensors, path):
    Path(path).write_bytes(encode(tensors))


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return decode(data)


def bundle_tensors(bundle, keys=None):
    """State dict of a bundle, optionally restricted to top-level submodules."""
    state = bundle.state_dict()
    if keys is not None:
        state = {k: v for k, v in state.items() if k.split(".", 1)[0] in keys}
    return state


def _count(tensors, prefix):
    n = 0
    while f"{prefix}.{n}.weight" in tensors:
        n += 1
    return n


def bundle_from_tensors(tensors, seed=0):
    """Rebuild a :class:`~bottlegan.models.ModelBundle` from decoded tensors.

    Architecture sizes are inferred from tensor shapes. Discriminators
    absent from the container (client messages) keep a fresh initialization.
    """
    from .models import ModelBundle

    try:
        codes = tensors["bank.codes"]
        ids = tensors["bank.style_ids"].astype(np.int64).tolist()
        depth = _count(tensors, "G_s.hidden")
        n_adain = 0
        while f"G_s.adain.{n_adain}.affine.weight" in tensors:
            n_adain += 1
        width = tensors["G_s.hidden.0.weight"].shape[0]
        n_down = _count(tensors, "D_c.down")
        disc = tuple(tensors[f"D_c.down.{i}.weight"].shape[0] for i in range(n_down)) or (64, 128, 256)
        bundle = ModelBundle(
            ids, width=width, depth=depth, n_adain=n_adain, code_dim=codes.shape[1],
            noise_sigma=float(tensors["bank.noise_sigma"]), disc_channels=disc, seed=seed,
        )
    except (KeyError, IndexError) as err:
        raise CheckpointError(f"checkpoint is missing tensor {err}") from None
    state = bundle.state_dict()
    for name, arr in tensors.items():
        if name not in state:
            raise CheckpointError(f"unexpected tensor {name}")
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        state[name] = torch.from_numpy(arr).to(state[name].dtype)
    bundle.load_state_dict(state)
    return bundle


def save_bundle(bundle, path, keys=None):
    save(bundle_tensors(bundle, keys), path)


def load_bundle(path):
    return bundle_from_tensors(load(path))


def checkpoint_roundtrip(bundle, path):
    save_bundle(bundle, path)
    return load_bundle(path)
