"""Raster/tensor container: a ``shape: d0,d1,...`` header line followed by a
little-endian float32 payload.  Checkpoints bundle several of these as named
entries of a zip archive."""

from __future__ import annotations

import io
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = "shape: " + ",".join(str(int(s)) for s in arr.shape) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_array(blob: bytes) -> np.ndarray:
    nl = blob.index(b"\n")
    header = blob[:nl].decode("ascii")
    if not header.startswith("shape:"):
        raise ValueError(f"bad raster header {header!r}")
    dims = header[len("shape:"):].strip()
    shape = tuple(int(s) for s in dims.split(",")) if dims else ()
    arr = np.frombuffer(blob[nl + 1:], dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"payload holds {arr.size} values, header says {shape}")
    return arr.reshape(shape).copy()


def write_raster(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_array(arr))


def read_raster(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def save_archive(path, entries: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to a zip archive; byte-identical for identical input."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in entries:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            zf.writestr(info, encode_array(entries[name]))
    Path(path).write_bytes(buf.getvalue())


def load_archive(path) -> dict[str, np.ndarray]:
    with zipfile.ZipFile(path) as zf:
        return {name: decode_array(zf.read(name)) for name in zf.namelist()}
