"""Versioned binary container for parameters and profile caches.

Layout (all integers little-endian):

    magic   4 bytes  b"PSE1"
    u32     format version (currently 1)
    u32     header length in bytes
    header  UTF-8 JSON (section name, config snapshot, entry count)
    entries repeated:
        u16     name length, then UTF-8 name
        u8      dtype code (0 = float32, 1 = float64, 2 = int64)
        u8      ndim
        u32[]   dims
        u64     payload byte length
        raw little-endian array data
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PSE1"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


def write_container(path, header: dict, arrays: dict):
    header = dict(header)
    header["n_entries"] = len(arrays)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hbytes)))
        f.write(hbytes)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name}")
            nbytes = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            nm = name.encode("utf-8")
            f.write(struct.pack("<H", len(nm)))
            f.write(nm)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<Q", len(nbytes)))
            f.write(nbytes)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated container while reading {what}")
    return buf


def read_container(path):
    """Returns (header dict, {name: ndarray}). Raises CheckpointError on any
    malformed or truncated input; never returns a partial result."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError("bad magic: not a PSE1 container")
        version, hlen = struct.unpack("<II", _read_exact(f, 8, "version header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        arrays = {}
        for _ in range(header.get("n_entries", 0)):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "entry name length"))
            name = _read_exact(f, nlen, "entry name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2, "entry dtype"))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for entry {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "entry shape"))
            (nbytes,) = struct.unpack("<Q", _read_exact(f, 8, "entry size"))
            dtype = _CODE_DTYPES[code].newbyteorder("<")
            arr = np.frombuffer(_read_exact(f, nbytes, f"entry {name}"), dtype=dtype)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"size mismatch for entry {name}")
            arrays[name] = arr.reshape(shape).astype(_CODE_DTYPES[code])
        if f.read(1):
            raise CheckpointError("trailing bytes after last entry")
    return header, arrays
