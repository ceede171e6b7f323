"""Binary checkpoint format.

Layout::

    b"STAM1"
    u32 little-endian header length
    header: UTF-8 JSON (sorted keys) with the model config and a tensor manifest
    payloads: each tensor as little-endian float64, in manifest order

Saving writes to a temporary sibling and renames it into place, so an
interrupted save never leaves a half-written checkpoint at ``path``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from stam.errors import (
    BadMagicError,
    CheckpointError,
    ManifestMismatchError,
    TruncatedFileError,
)
from stam.model.params import ModelConfig, StamParams, expected_shapes, from_arrays

MAGIC = b"STAM1"
_LEN = struct.Struct("<I")

PathLike = Union[str, os.PathLike]


def _config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    data["frame_size"] = tuple(data["frame_size"])
    data["widths"] = tuple(data["widths"])
    data["hidden"] = tuple(data.get("hidden", ()))
    return ModelConfig(**data)


def checkpoint_bytes(params: StamParams) -> bytes:
    """Serialise ``params`` to the on-disk byte layout."""
    named = params.named_tensors()
    header = {
        "config": params.config.to_dict(),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, _LEN.pack(len(head)), head]
    chunks += [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named]
    return b"".join(chunks)


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write ``payload`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: StamParams, path: PathLike) -> Path:
    atomic_write(path, checkpoint_bytes(params))
    return Path(path)


def parse_checkpoint(blob: bytes, requires_grad: bool = True) -> StamParams:
    """Inverse of :func:`checkpoint_bytes`."""
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a STAM1 checkpoint (starts with {blob[:5]!r})")
    offset = len(MAGIC)
    if len(blob) < offset + _LEN.size:
        raise TruncatedFileError("file ends inside the header length field")
    (head_len,) = _LEN.unpack_from(blob, offset)
    offset += _LEN.size
    if len(blob) < offset + head_len:
        raise TruncatedFileError("file ends inside the header")
    try:
        header = json.loads(blob[offset:offset + head_len].decode("utf-8"))
        config = _config_from_dict(header["config"])
        manifest = [(entry["name"], tuple(entry["shape"])) for entry in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    offset += head_len

    expected = expected_shapes(config)
    if manifest != expected:
        raise ManifestMismatchError(
            f"tensor manifest does not match the stored config: {manifest} vs {expected}")
    arrays = {}
    for name, shape in manifest:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(blob) < offset + nbytes:
            raise TruncatedFileError(f"payload for {name} is truncated")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                     offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ManifestMismatchError(f"{len(blob) - offset} trailing bytes after the last tensor")
    return from_arrays(config, arrays, requires_grad=requires_grad)


def load_checkpoint(path: PathLike, requires_grad: bool = True) -> StamParams:
    with open(path, "rb") as handle:
        return parse_checkpoint(handle.read(), requires_grad=requires_grad)
