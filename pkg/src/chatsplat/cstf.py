"""CSTF tensor container: the on-disk format for feature sidecars, checkpoints,
teacher tokens and codebook vectors.

Layout (all integers little-endian):

    magic   4 bytes  b"CSTF"
    version u32      1
    records, repeated until EOF:
        name_len u16
        name     UTF-8 bytes
        dtype    u8   0 = float32, 1 = uint32
        rank     u8
        dims     u32 * rank
        payload  row-major, little-endian

Tensors are float32 or uint32 only; callers up/down-cast at the boundary.
"""

from __future__ import annotations

import io
import struct
from typing import Dict

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"CSTF"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_CODE_FOR_KIND = {"f": 0, "u": 1}


def _coerce(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind == "f":
        out = np.ascontiguousarray(a, dtype="<f4")
    elif a.dtype.kind in ("u", "i"):
        if a.dtype.kind == "i" and a.size and int(a.min()) < 0:
            raise FormatError("CSTF cannot store negative integers; shift to unsigned first")
        out = np.ascontiguousarray(a, dtype="<u4")
    else:
        raise FormatError(f"CSTF cannot store dtype {a.dtype}")
    # ascontiguousarray promotes 0-d to 1-d; keep the declared rank honest
    return out.reshape(a.shape)


def _write(fh, records: Dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    for name, arr in records.items():
        a = _coerce(arr)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise FormatError(f"record name too long: {name!r}")
        fh.write(struct.pack("<H", len(name_b)))
        fh.write(name_b)
        code = _CODE_FOR_KIND[a.dtype.kind]
        fh.write(struct.pack("<BB", code, a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def write_records(path: str, records: Dict[str, np.ndarray]) -> None:
    """Write a name -> tensor mapping. Record order follows dict order."""
    with open(path, "wb") as fh:
        _write(fh, records)


def records_to_bytes(records: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    _write(buf, records)
    return buf.getvalue()


def _read_exact(fh: io.BufferedReader, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated CSTF file while reading {what}")
    return buf


def read_records(path: str) -> Dict[str, np.ndarray]:
    """Read every record. Raises FormatError on corruption, VersionError on mismatch."""
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise VersionError(f"unsupported CSTF version {version}, expected {VERSION}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated CSTF file while reading record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, "record meta"))
            if code not in _DTYPE_CODES:
                raise FormatError(f"unknown dtype code {code} in record {name!r}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "record dims"))
            dtype = _DTYPE_CODES[code]
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, count * dtype.itemsize, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out
