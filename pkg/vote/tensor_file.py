"""
Tensor file

A small container for named float32 tensors: an 8-byte little-endian
length, a JSON manifest of that length, then a raw little-endian f32 blob.
The manifest lists every tensor as {name, shape, offset, dtype} where
offset is a byte offset into the blob. Any other manifest keys are
free-form metadata (H, N, A, eps, ...).
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from vote.models import DataValidationError

logger = logging.getLogger(__name__)

_LENGTH = struct.Struct("<Q")
_DTYPE = "f32"
_NUMPY_DTYPE = np.dtype("<f4")


class TensorFileError(DataValidationError):
    """The tensor file is malformed or references missing data"""


def write_tensors(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> Path:
    """Writes tensors (in insertion order) and metadata to a file"""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor, dtype=_NUMPY_DTYPE)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "dtype": _DTYPE})
        blobs.append(data.tobytes())
        offset += data.nbytes
    manifest = dict(metadata or {})
    manifest["tensors"] = entries
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with path.open("wb") as stream:
        stream.write(_LENGTH.pack(len(header)))
        stream.write(header)
        for blob in blobs:
            stream.write(blob)
    logger.info("Wrote %d tensors (%d bytes) to %s", len(entries), offset, path)
    return path


def read_manifest(path) -> dict:
    """Reads only the JSON manifest of a tensor file"""
    manifest, _ = _read(Path(path), with_blob=False)
    return manifest


def read_tensors(path) -> tuple:
    """Returns (manifest, {name: float32 array}) for a tensor file"""
    manifest, blob = _read(Path(path), with_blob=True)
    tensors = {}
    for entry in manifest["tensors"]:
        try:
            name = entry["name"]
            shape = tuple(int(dim) for dim in entry["shape"])
            offset = int(entry["offset"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as error:
            raise TensorFileError(f"Invalid tensor entry {entry!r}") from error
        if dtype != _DTYPE:
            raise TensorFileError(f"Unsupported dtype {dtype!r} for tensor {name}")
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _NUMPY_DTYPE.itemsize
        if offset < 0 or end > len(blob):
            raise TensorFileError(f"Tensor {name} lies outside the blob")
        data = np.frombuffer(blob, dtype=_NUMPY_DTYPE, count=count, offset=offset)
        tensors[name] = data.reshape(shape).astype(np.float32)
    return manifest, tensors


def _read(path: Path, with_blob: bool) -> tuple:
    with path.open("rb") as stream:
        prefix = stream.read(_LENGTH.size)
        if len(prefix) != _LENGTH.size:
            raise TensorFileError(f"{path} is too short to be a tensor file")
        (length,) = _LENGTH.unpack(prefix)
        header = stream.read(length)
        if len(header) != length:
            raise TensorFileError(f"{path} manifest is truncated")
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as error:
            raise TensorFileError(f"{path} manifest is not valid JSON") from error
        if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
            raise TensorFileError(f"{path} manifest has no tensor list")
        blob = stream.read() if with_blob else b""
    return manifest, blob
