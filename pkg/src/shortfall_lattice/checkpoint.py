"""Binary checkpoints for DP value slices.

Layout (little-endian)::

    magic    4s   b"SFDP"
    version  u16
    flags    u16  bit 0: float32 payload; bit 1: PLUS bound
    digest   32s  instance digest
    n, M, k  3 x u32
    payload  (2k+1) * (2k+1) * (M+1) floats, row-major in (i, j, lambda)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .dp import Bound, ValueSlice

MAGIC = b"SFDP"
VERSION = 1
_HEADER = struct.Struct("<4sHH32sIII")
_F32 = 1
_PLUS = 2


class CheckpointError(Exception):
    pass


class DigestMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def checkpoint_save(vs: ValueSlice, path) -> None:
    data = np.asarray(vs.data)
    if data.dtype == np.float32:
        flags, out = _F32, data.astype("<f4", copy=False)
    else:
        flags, out = 0, data.astype("<f8", copy=False)
    if Bound(vs.bound) is Bound.PLUS:
        flags |= _PLUS
    side = 2 * vs.k + 1
    if data.shape != (side, side, vs.M + 1):
        raise ValueError(f"slice shape {data.shape} inconsistent with k={vs.k}, M={vs.M}")
    if len(vs.params_digest) != 32:
        raise ValueError("params_digest must be 32 bytes")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, vs.params_digest, vs.n, vs.M, vs.k))
        fh.write(np.ascontiguousarray(out).tobytes())
    os.replace(tmp, path)


def checkpoint_load(path, expected_digest: bytes | None = None,
                    expected_k: int | None = None) -> ValueSlice:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpoint(f"{path}: header truncated")
    magic, version, flags, digest, n, M, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a DP checkpoint")
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatch(f"{path}: checkpoint belongs to a different instance")
    if expected_k is not None and k != expected_k:
        raise CheckpointError(f"{path}: checkpoint at k={k}, expected k={expected_k}")
    dtype = np.dtype("<f4") if flags & _F32 else np.dtype("<f8")
    side = 2 * k + 1
    count = side * side * (M + 1)
    body = raw[_HEADER.size:]
    if len(body) != count * dtype.itemsize:
        raise TruncatedCheckpoint(f"{path}: payload has {len(body)} bytes, "
                                  f"expected {count * dtype.itemsize}")
    data = np.frombuffer(body, dtype=dtype).reshape(side, side, M + 1)
    data = data.astype(dtype.newbyteorder("="))
    bound = Bound.PLUS if flags & _PLUS else Bound.MINUS
    return ValueSlice(k=k, bound=bound, data=data, params_digest=digest, n=n, M=M)


def _latest_path(directory, bound: Bound, digest: bytes) -> Path:
    return Path(directory) / f"latest_{Bound(bound).value}_{digest.hex()[:16]}.sfdp"


def save_latest(vs: ValueSlice, directory) -> Path:
    """Atomically replace the rolling checkpoint for this instance and bound."""
    Path(directory).mkdir(parents=True, exist_ok=True)
    path = _latest_path(directory, vs.bound, vs.params_digest)
    checkpoint_save(vs, path)
    return path


def latest(directory, bound: Bound, digest: bytes) -> ValueSlice | None:
    path = _latest_path(directory, bound, digest)
    if not path.exists():
        return None
    return checkpoint_load(path, expected_digest=digest)
