"""
Storage - atomic file writes and the versioned binary container.

The container holds a JSON manifest plus named arrays and is used both for
checkpoints and for token caches. Output is byte-stable: no timestamps, sorted
manifest keys and blobs in insertion order.
"""

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import DataError

MAGIC = b"SHTR"
FORMAT_VERSION = 1

_DTYPE_CODES = {"f4": 0, "i4": 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write to a temp file next to `path`, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _dtype_code(array: np.ndarray) -> int:
    if array.dtype.kind == "f":
        return _DTYPE_CODES["f4"]
    if array.dtype.kind in "iub":
        return _DTYPE_CODES["i4"]
    raise DataError(f"Unsupported blob dtype {array.dtype}")


def encode_container(manifest: Dict, blobs: Dict[str, np.ndarray]) -> bytes:
    """Serialize a manifest and named arrays (float -> <f4, int -> <i4)."""
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(manifest_bytes)), manifest_bytes]
    parts.append(struct.pack("<I", len(blobs)))
    for name, array in blobs.items():
        array = np.asarray(array)
        code = _dtype_code(array)
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_container(payload: bytes) -> Tuple[Dict, Dict[str, np.ndarray]]:
    if payload[:4] != MAGIC:
        raise DataError("Not a container file (bad magic)")
    version, manifest_len = struct.unpack_from("<II", payload, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"Unsupported container version {version}")
    offset = 12
    manifest = json.loads(payload[offset:offset + manifest_len].decode("utf-8"))
    offset += manifest_len
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4

    blobs: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", payload, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise DataError(f"Unknown dtype code {code} for blob {name}")
        size = int(np.prod(shape, dtype=np.int64))
        nbytes = size * dtype.itemsize
        blobs[name] = np.frombuffer(payload, dtype=dtype, count=size, offset=offset).reshape(shape).copy()
        offset += nbytes
    return manifest, blobs


def write_container(path: PathLike, manifest: Dict, blobs: Dict[str, np.ndarray]) -> Path:
    return atomic_write_bytes(path, encode_container(manifest, blobs))


def read_container(path: PathLike) -> Tuple[Dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    return decode_container(path.read_bytes())
