"""Single-file binary container for named arrays (parameters, running
statistics, optimizer buffers).

Layout: magic "MVPC", format version u32, entry count u32, then per entry:
name length u32, UTF-8 name, dtype tag u32, rank u32, dims u32 each, raw
little-endian data.  Everything little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError

MAGIC = b"MVPC"
VERSION = 1

_TAG_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_TO_TAG = {np.dtype(v): k for k, v in _TAG_TO_DTYPE.items()}


def save_state(path, arrays: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TO_TAG:
            if np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype("<i8")
            else:
                arr = arr.astype("<f8")
            dtype = arr.dtype
        raw = np.ascontiguousarray(arr, dtype=dtype)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", _DTYPE_TO_TAG[dtype], raw.ndim))
        chunks.append(struct.pack(f"<{raw.ndim}I", *raw.shape))
        chunks.append(raw.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_state(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncationError(f"{path}: truncated header")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 12
    arrays: dict[str, np.ndarray] = {}

    def _take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise TruncationError(f"{path}: unexpected end of file")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<I", _take(4))
        name = _take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<II", _take(8))
        if tag not in _TAG_TO_DTYPE:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack(f"<{rank}I", _take(4 * rank)) if rank else ()
        dtype = np.dtype(_TAG_TO_DTYPE[tag])
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arrays[name] = np.frombuffer(_take(n_bytes), dtype=dtype).reshape(dims).copy()
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes beyond declared entries")
    return arrays
