"""Binary checkpoint of named float64 tensors.

Layout (little-endian)::

    b"PROCLCKP" | version u32 | count u32 |
    count * ( name_len u16 | name utf-8 | rank u8 | dims u32[rank] | data f64[prod(dims)] )
"""

import struct

import numpy as np

MAGIC = b"PROCLCKP"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<B")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims)) * 8
        if pos + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += size
    return tensors
