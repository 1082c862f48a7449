"""Single-file checkpoint container.

Layout: magic "RFCK", version u16 LE, then length-prefixed entries, each
consisting of key length (u16 LE), UTF-8 dotted key, dtype tag (u8), rank
(u8), dims (u32 LE each) and the raw little-endian payload. Keys are written
in sorted order so the file bytes are a canonical function of the contents.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"RFCK"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u8"}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
         np.dtype(np.int64): 2, np.dtype(np.uint64): 3}


def _encode(arrays: dict[str, np.ndarray]) -> bytes:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<H", VERSION)
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        if arr.dtype not in _TAGS:
            raise InvalidArgumentError(f"unsupported dtype {arr.dtype} for key {key}")
        kb = key.encode("utf-8")
        buf += struct.pack("<H", len(kb))
        buf += kb
        buf += struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.astype(_DTYPES[_TAGS[arr.dtype]]).tobytes()
    return bytes(buf)


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_encode(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise InvalidArgumentError(f"{path}: not a checkpoint container")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise InvalidArgumentError(f"{path}: unsupported version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        key = data[pos:pos + klen].decode("utf-8")
        pos += klen
        tag, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        dt = np.dtype(_DTYPES[tag])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dt, count=count, offset=pos).reshape(shape)
        pos += count * dt.itemsize
        out[key] = arr.copy()
    return out


def digest(arrays: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(_encode(arrays)).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# -- random stream state ------------------------------------------------------

_U64 = (1 << 64) - 1


def rng_state_array(gen: np.random.Generator) -> np.ndarray:
    st = gen.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise InvalidArgumentError("only PCG64 streams are checkpointable")
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    return np.array([s & _U64, (s >> 64) & _U64, inc & _U64, (inc >> 64) & _U64,
                     st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def restore_rng(arr: np.ndarray) -> np.random.Generator:
    vals = [int(v) for v in np.asarray(arr, dtype=np.uint64)]
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": vals[0] | (vals[1] << 64), "inc": vals[2] | (vals[3] << 64)},
        "has_uint32": vals[4],
        "uinteger": vals[5],
    }
    return gen
