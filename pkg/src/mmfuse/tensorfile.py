"""Binary tensor files and multi-tensor archives.

Record layout: 8-byte magic ``MMFKTNSR``, u8 dtype tag (0 = float32,
1 = float64), u8 rank, rank little-endian u64 dims, then the raw
little-endian scalars in row-major order.  An archive is records laid
back to back in one file; a sidecar JSON manifest (``<path>.json``)
maps tensor names to byte offsets.
"""

from __future__ import annotations

import json
import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import TensorFileError

MAGIC = b"MMFKTNSR"
_TAG_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FOR_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def manifest_path(archive_path: str) -> str:
    return str(archive_path) + ".json"


def write_record(fh: BinaryIO, arr: np.ndarray) -> int:
    """Append one tensor record; returns the offset it starts at."""
    if arr.dtype not in _TAG_FOR_DTYPE:
        raise TensorFileError(f"cannot serialize dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise TensorFileError(f"rank {arr.ndim} outside serializable range 1..255")
    offset = fh.tell()
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _TAG_FOR_DTYPE[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return offset


def read_record(fh: BinaryIO) -> np.ndarray:
    head = fh.read(len(MAGIC))
    if head != MAGIC:
        raise TensorFileError(f"bad magic {head!r}; not a tensor record")
    meta = fh.read(2)
    if len(meta) != 2:
        raise TensorFileError("truncated record header")
    tag, rank = struct.unpack("<BB", meta)
    if tag not in _DTYPE_FOR_TAG:
        raise TensorFileError(f"unknown dtype tag {tag}")
    if rank < 1:
        raise TensorFileError(f"invalid rank {rank}")
    dim_bytes = fh.read(8 * rank)
    if len(dim_bytes) != 8 * rank:
        raise TensorFileError("truncated dimension list")
    shape = struct.unpack(f"<{rank}Q", dim_bytes)
    if any(s < 1 for s in shape):
        raise TensorFileError(f"non-positive dimension in {shape}")
    dtype = _DTYPE_FOR_TAG[tag]
    count = int(np.prod(shape))
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise TensorFileError("truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))


def write_tensor(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_record(fh, arr)


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)


def write_archive(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors back to back plus the ``<path>.json`` manifest."""
    offsets: dict[str, int] = {}
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            offsets[name] = write_record(fh, arr)
    with open(manifest_path(path), "w") as mh:
        json.dump(offsets, mh, indent=1, sort_keys=True)


def read_manifest(path: str) -> dict[str, int]:
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise TensorFileError(f"no manifest {mpath} beside archive {path}")
    with open(mpath) as mh:
        raw = json.load(mh)
    if not isinstance(raw, dict):
        raise TensorFileError(f"manifest {mpath} is not a name->offset object")
    return {str(k): int(v) for k, v in raw.items()}


def read_archive(path: str) -> dict[str, np.ndarray]:
    offsets = read_manifest(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name, off in offsets.items():
            fh.seek(off)
            out[name] = read_record(fh)
    return out


def read_from_archive(path: str, name: str) -> np.ndarray:
    """Seek one named tensor without loading the rest."""
    offsets = read_manifest(path)
    if name not in offsets:
        raise TensorFileError(f"archive {path} has no tensor named {name!r}")
    with open(path, "rb") as fh:
        fh.seek(offsets[name])
        return read_record(fh)
