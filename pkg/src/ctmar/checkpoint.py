"""Single-file checkpoint container: named float arrays + a config snapshot.

Layout mirrors the volume format conventions (little-endian, u32 sizes):
magic "H3DC", u16 version, u32 config-text length + UTF-8 bytes, u32 entry
count, then per entry: u16 name length + name, u8 dtype code, u8 rank,
rank*u32 dims, raw array bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"H3DC"
VERSION = 1

_DTYPES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], config_text: str = "") -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    cfg = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = np.dtype("<i8") if arr.dtype.kind in "iub" else np.dtype(f"<f{arr.dtype.itemsize}")
        if dt not in _CODES:
            dt = np.dtype("<f8") if arr.dtype.kind == "f" else np.dtype("<i8")
        arr = arr.astype(dt, copy=False)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = bytes(take(cfg_len)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        dt = _DTYPES[code]
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n_items * dt.itemsize), dtype=dt).reshape(shape).copy()
        arrays[name] = data
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays, config_text
