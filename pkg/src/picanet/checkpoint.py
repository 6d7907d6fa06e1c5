"""Binary checkpoint format for named tensors.

Layout (little-endian)::

    b"PICA" | version u32 | count u32 | count x record
    record = name_len u16 | name utf-8 | dtype u8 (0 f32, 1 f64) | rank u8 | dims u32 * rank | raw values
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from .errors import CheckpointError
from .layers import ParamRegistry

MAGIC = b"PICA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise CheckpointError(f"duplicate record name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large for the format")
        code = _CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 12:
        raise CheckpointError(f"file too short for a header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated file while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for index in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"record #{index} name length"))
        try:
            name = take(name_len, f"record #{index} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"record #{index} name is not valid UTF-8") from exc
        code, rank = struct.unpack("<BB", take(2, f"record {name!r} header"))
        if code not in _DTYPES:
            raise CheckpointError(f"record {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"record {name!r} dims"))
        dtype = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(n, f"record {name!r} values"), dtype=dtype).reshape(dims)
        if name in out:
            raise CheckpointError(f"duplicate record name {name!r}")
        out[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after {count} records")
    return out


def _state(source) -> Mapping[str, np.ndarray]:
    return source.state() if isinstance(source, ParamRegistry) else source


def save(source, path: str) -> None:
    """Write a registry (or name -> array mapping) atomically."""
    blob = encode(_state(source))
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path!r}: {exc}") from exc


def load(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    return decode(blob)


def load_into(registry: ParamRegistry, path: str) -> None:
    registry.load_state(load(path))
