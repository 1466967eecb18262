"""Binary checkpoints for backbones and adapters.

Layout (all integers little-endian)::

    magic    7 bytes   b"ADPMIX1"
    kind     1 byte    b"B" (backbone) or b"A" (adapter)
    V d r K  4 x uint32   (r = 0 for backbones, V = 0 for adapters)
    taglen   uint32, followed by taglen bytes of UTF-8 tag
    payload  float64 '<f8', each array row-major in field order

The header is validated before the payload is touched.
"""

from __future__ import annotations

import os
import struct
from typing import Union

import numpy as np

from .model import AdapterDelta, BackboneParams, NumericError

MAGIC = b"ADPMIX1"
_DIMS = struct.Struct("<4I")
_LEN = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _shapes(kind: bytes, V: int, d: int, r: int, K: int) -> list[tuple]:
    if kind == b"B":
        return [(V, d), (d, d), (d,), (d, d), (d,), (d, K), (K,)]
    return [(d, r), (r,), (r, d), (d,), (d, r), (r,), (r, d), (d,), (d, K), (K,)]


def to_bytes(params: Union[BackboneParams, AdapterDelta]) -> bytes:
    if isinstance(params, BackboneParams):
        kind, dims, tag = b"B", (params.vocab_size, params.dim, 0, params.num_classes), params.version
    elif isinstance(params, AdapterDelta):
        kind, dims, tag = b"A", (0, params.dim, params.rank, params.num_classes), params.tag
    else:
        raise TypeError(f"cannot serialize {type(params).__name__}")
    tag_bytes = tag.encode("utf-8")
    parts = [MAGIC, kind, _DIMS.pack(*dims), _LEN.pack(len(tag_bytes)), tag_bytes]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    return b"".join(parts)


def from_bytes(blob: bytes) -> Union[BackboneParams, AdapterDelta]:
    head = len(MAGIC) + 1 + _DIMS.size + _LEN.size
    if len(blob) < head or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an ADPMIX1 checkpoint")
    kind = blob[len(MAGIC): len(MAGIC) + 1]
    if kind not in (b"B", b"A"):
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    V, d, r, K = _DIMS.unpack_from(blob, len(MAGIC) + 1)
    (taglen,) = _LEN.unpack_from(blob, len(MAGIC) + 1 + _DIMS.size)
    if d == 0 or K == 0 or (kind == b"B" and V == 0) or (kind == b"A" and not 0 < r < d):
        raise CheckpointError(f"invalid dimensions V={V} d={d} r={r} K={K}")
    if len(blob) < head + taglen:
        raise CheckpointError("truncated tag")
    try:
        tag = blob[head: head + taglen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("tag is not valid UTF-8") from exc

    shapes = _shapes(kind, V, d, r, K)
    n_floats = sum(int(np.prod(s)) for s in shapes)
    payload = blob[head + taglen:]
    if len(payload) != 8 * n_floats:
        raise CheckpointError(f"payload has {len(payload)} bytes, header implies {8 * n_floats}")

    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, offset = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[offset: offset + size].reshape(s))
        offset += size
    try:
        if kind == b"B":
            return BackboneParams(*arrays, version=tag)
        return AdapterDelta(*arrays, tag=tag)
    except NumericError as exc:
        raise CheckpointError(str(exc)) from exc


def save(params: Union[BackboneParams, AdapterDelta], path: Union[str, os.PathLike]) -> None:
    """Write a checkpoint, creating the parent directory if needed."""
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load(path: Union[str, os.PathLike]) -> Union[BackboneParams, AdapterDelta]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
