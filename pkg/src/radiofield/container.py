"""Checksummed binary container: JSON header plus little-endian float64 arrays.

Layout::

    magic      4 bytes
    version    uint16 LE
    header_len uint32 LE
    payload    uint64 LE   (bytes of array data)
    header     UTF-8 JSON, keys sorted; lists array names and shapes
    arrays     concatenated '<f8', row-major, in header order
    sha256     32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_PRELUDE = struct.Struct("<4sHIQ")
_DIGEST = 32


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def dumps(magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    names = list(arrays)
    blobs = []
    descr = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        descr.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    full = dict(header)
    full["arrays"] = descr
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(blobs)
    body = _PRELUDE.pack(magic, version, len(head), len(payload)) + head + payload
    return body + hashlib.sha256(body).digest()


def loads(data: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PRELUDE.size:
        raise TruncatedFileError("file shorter than the fixed prelude")
    got_magic, got_version, head_len, payload_len = _PRELUDE.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionError(f"format version {got_version} not supported (expected {version})")
    expected = _PRELUDE.size + head_len + payload_len + _DIGEST
    if len(data) < expected:
        raise TruncatedFileError(f"file is {len(data)} bytes, header announces {expected}")
    if len(data) > expected:
        raise ChecksumError(f"{len(data) - expected} trailing bytes after checksum")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch")
    start = _PRELUDE.size
    header = json.loads(body[start:start + head_len])
    pos = start + head_len
    arrays = {}
    for item in header.pop("arrays"):
        shape = tuple(item["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[item["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return header, arrays


def write(path: str | Path, magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(magic, version, header, arrays))
    tmp.replace(path)


def read(path: str | Path, magic: bytes, version: int):
    return loads(Path(path).read_bytes(), magic, version)
