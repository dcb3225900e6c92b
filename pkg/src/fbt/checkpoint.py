"""Flat binary checkpoint format.

Layout: magic ``FBT1`` followed by one record per entry:
``<u32 name length><name utf-8><u8 dtype tag><u8 rank><u32 x rank dims><raw values>``,
all integers and floats little-endian. Entries cover both trainable parameters
and persistent buffers (batch-norm running statistics), keyed by their
hierarchical names, so a reloaded model reproduces evaluation exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Module

MAGIC = b"FBT1"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1}


class CheckpointError(IOError):
    """Malformed checkpoint file or mismatch against the target model."""


def _entries(model: Module):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b


def save_checkpoint(model: Module, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in _entries(model):
            raw = np.ascontiguousarray(arr)
            key = raw.dtype.str.lstrip("<>=|")
            if key not in _TAG_FOR_KIND:
                raise CheckpointError(f"cannot serialize {name!r} with dtype {raw.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _TAG_FOR_KIND[key], raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            fh.write(raw.astype(raw.dtype.newbyteorder("<"), copy=False).tobytes())


def read_checkpoint(path) -> dict:
    """Parse a checkpoint file into {name: array}."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    entries: dict[str, np.ndarray] = {}
    off = 4
    try:
        while off < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            tag, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            dtype = _DTYPE_TAGS.get(tag)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = count * dtype.itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims)
            off += nbytes
            entries[name] = arr
    except (struct.error, ValueError) as err:
        raise CheckpointError(f"{path}: truncated or corrupt record ({err})") from err
    return entries


def load_checkpoint(model: Module, path) -> None:
    """Load parameters and buffers by name; every name and shape must match."""
    entries = read_checkpoint(path)
    loaded = set()
    for name, p in model.named_parameters():
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = entries[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: shape {arr.shape} for {name!r}, model has {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        loaded.add(name)
    for name, b in model.named_buffers():
        if name not in entries:
            raise CheckpointError(f"{path}: missing buffer {name!r}")
        arr = entries[name]
        if arr.shape != b.shape:
            raise CheckpointError(f"{path}: shape {arr.shape} for buffer {name!r}, model has {b.shape}")
        b[...] = arr.astype(b.dtype, copy=False)
        loaded.add(name)
    extra = set(entries) - loaded
    if extra:
        raise CheckpointError(f"{path}: unexpected entries {sorted(extra)[:4]}")
