"""LRTA0001 tensor archive codec.

Layout:

    bytes 0-7    magic b"LRTA0001"
    bytes 8-15   manifest length N, uint64 little-endian
    bytes 16-    N bytes of UTF-8 JSON: {"metadata": {...}, "tensors": [...]}
    padding      zeros up to the next multiple of 64; the payload starts here
    payload      raw little-endian tensor data

Each manifest tensor entry is {"name", "dtype" ("f32" | "f64"), "shape",
"offset"}, the offset counted from the payload start. Offsets are 64-byte
aligned and strictly ascending without overlap; the payload ends exactly at
the end of the last tensor. The JSON is written with sorted keys and no
whitespace, so equal archives are byte-identical. An archive with no tensors
and empty metadata is exactly EMPTY_ARCHIVE_SIZE (64) bytes long.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from lrse.errors import (
    BadMagicError,
    ManifestError,
    OverlappingTensorsError,
    TruncatedArchiveError,
    UnknownDtypeError,
)

logger = logging.getLogger(__name__)

MAGIC = b"LRTA0001"
ALIGNMENT = 64
HEADER_SIZE = len(MAGIC) + 8
EMPTY_ARCHIVE_SIZE = 64

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _dtype_code(array: np.ndarray) -> str:
    for code, dtype in DTYPES.items():
        if array.dtype == dtype or array.dtype == dtype.newbyteorder("="):
            return code
    raise UnknownDtypeError(f"unsupported tensor dtype {array.dtype}")


@dataclass
class TensorArchive:
    """Named tensors in manifest order plus free-form JSON metadata."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise ManifestError(f"archive has no tensor {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def write_archive(tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping] = None) -> bytes:
    """Serializes tensors (float32 or float64) in mapping order.

    Raises:
        UnknownDtypeError: If a tensor is neither float32 nor float64.
        ManifestError: If a name is empty.
    """
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        if not isinstance(name, str) or not name:
            raise ManifestError(f"invalid tensor name {name!r}")
        array = np.asarray(array)
        code = _dtype_code(array)
        raw = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
        start = _align(offset)
        chunks.append(b"\0" * (start - offset))
        chunks.append(raw)
        entries.append({"name": name, "dtype": code, "shape": list(array.shape), "offset": start})
        offset = start + len(raw)

    manifest = json.dumps(
        {"metadata": dict(metadata or {}), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8")
    header = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    header += b"\0" * (_align(len(header)) - len(header))
    return header + b"".join(chunks)


def _parse_entry(entry) -> tuple:
    if not isinstance(entry, dict):
        raise ManifestError("tensor entry is not an object")
    name, dtype, shape, offset = (entry.get(k) for k in ("name", "dtype", "shape", "offset"))
    if not isinstance(name, str) or not name:
        raise ManifestError(f"invalid tensor name {name!r}")
    if not isinstance(dtype, str) or dtype not in DTYPES:
        raise UnknownDtypeError(f"{name}: unknown dtype {dtype!r}")
    if not isinstance(shape, list) or any(type(d) is not int or d < 0 for d in shape):
        raise ManifestError(f"{name}: invalid shape {shape!r}")
    if type(offset) is not int or offset < 0:
        raise ManifestError(f"{name}: invalid offset {offset!r}")
    if offset % ALIGNMENT:
        raise ManifestError(f"{name}: offset {offset} is not {ALIGNMENT}-byte aligned")
    return name, dtype, tuple(shape), offset


def read_archive(data: bytes) -> TensorArchive:
    """Parses an LRTA0001 archive; float32 tensors stay float32.

    Raises:
        BadMagicError: If the file does not start with the magic.
        TruncatedArchiveError: If the header, manifest or payload is cut short.
        ManifestError: If the manifest is malformed or bytes trail the payload.
        UnknownDtypeError: If a tensor declares an unsupported dtype.
        OverlappingTensorsError: If tensor ranges overlap or are out of order.
    """
    data = bytes(data)
    if data[: len(MAGIC)] != MAGIC[: len(data)]:
        raise BadMagicError("not an LRTA0001 archive")
    if len(data) < HEADER_SIZE:
        raise TruncatedArchiveError(f"header needs {HEADER_SIZE} bytes, file has {len(data)}")
    (manifest_len,) = struct.unpack("<Q", data[len(MAGIC) : HEADER_SIZE])
    if HEADER_SIZE + manifest_len > len(data):
        raise TruncatedArchiveError(f"manifest of {manifest_len} bytes runs past end of file")
    try:
        manifest = json.loads(data[HEADER_SIZE : HEADER_SIZE + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as e:
        raise ManifestError(f"unreadable manifest: {e}") from None
    if (
        not isinstance(manifest, dict)
        or not isinstance(manifest.get("tensors"), list)
        or not isinstance(manifest.get("metadata"), dict)
    ):
        raise ManifestError("manifest needs a 'tensors' list and a 'metadata' object")

    entries = [_parse_entry(e) for e in manifest["tensors"]]
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        raise ManifestError("duplicate tensor names")

    payload_start = _align(HEADER_SIZE + manifest_len)
    if len(data) < payload_start:
        raise TruncatedArchiveError("header padding runs past end of file")
    payload = data[payload_start:]

    end = 0
    spans = []
    for name, dtype, shape, offset in entries:
        if offset < end:
            raise OverlappingTensorsError(f"{name}: offset {offset} overlaps data ending at {end}")
        size = math.prod(shape) * DTYPES[dtype].itemsize
        spans.append(size)
        end = offset + size
    if len(payload) < end:
        raise TruncatedArchiveError(f"payload has {len(payload)} bytes, manifest needs {end}")
    if len(payload) > end:
        raise ManifestError(f"{len(payload) - end} bytes trail the last tensor")

    tensors = {}
    for (name, dtype, shape, offset), size in zip(entries, spans):
        raw = payload[offset : offset + size]
        tensors[name] = np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).copy()
    return TensorArchive(tensors=tensors, metadata=manifest["metadata"])


def save_archive(path, tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping] = None) -> None:
    data = write_archive(tensors, metadata)
    Path(path).write_bytes(data)
    logger.info("wrote %s (%d tensors, %d bytes)", path, len(tensors), len(data))


def load_archive(path) -> TensorArchive:
    return read_archive(Path(path).read_bytes())
