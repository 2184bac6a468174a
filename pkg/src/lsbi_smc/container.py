"""Checksummed single-file container for arrays plus JSON metadata.

Layout (all integers little-endian)::

    magic      8 bytes
    version    1 byte
    meta_len   uint32
    metadata   UTF-8 JSON, meta_len bytes; lists every array (name, dtype, shape)
    arrays     raw row-major little-endian blobs in metadata order
    crc32      uint32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .errors import ChecksumError, FormatError

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "u1"}


def write_container(path, magic: bytes, version: int, metadata: dict, arrays: dict):
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = arr.dtype.str.lstrip("<>|=")
        if code not in _DTYPES:
            raise FormatError(f"unsupported dtype {arr.dtype} for array {name!r}")
        le = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        specs.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(le.tobytes())
    meta = dict(metadata)
    meta["arrays"] = specs
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = b"".join([magic, struct.pack("<B", version), struct.pack("<I", len(meta_bytes)),
                     meta_bytes, *blobs])
    crc = zlib.crc32(body) & 0xFFFFFFFF
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_container(path, magic: bytes, version: int):
    """Read and verify a container; returns ``(metadata, arrays)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    if len(data) < 17:
        raise FormatError(f"{path}: truncated file")
    body, tail = data[:-4], data[-4:]
    (crc,) = struct.unpack("<I", tail)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC mismatch, file is corrupted or truncated")
    got_version = body[8]
    if got_version != version:
        raise FormatError(f"{path}: version {got_version}, expected {version}")
    (meta_len,) = struct.unpack("<I", body[9:13])
    try:
        meta = json.loads(body[13:13 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata block") from exc
    offset = 13 + meta_len
    arrays = {}
    for spec in meta.pop("arrays"):
        dt = np.dtype(_DTYPES[spec["dtype"]])
        shape = tuple(spec["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(body):
            raise FormatError(f"{path}: array {spec['name']!r} runs past end of file")
        arrays[spec["name"]] = (
            np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
            .reshape(shape)
            .astype(dt.newbyteorder("="), copy=True)
        )
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes after arrays")
    return meta, arrays
