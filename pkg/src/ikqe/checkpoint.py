"""Binary tensor checkpoint format.

Layout (little-endian)::

    magic   4 bytes  b"IKQE"
    version u32      1
    count   u32
    per tensor:
        name_len u32, name bytes (UTF-8)
        rank u32, dims u64[rank]
        data f64[prod(dims)], row-major
"""
import struct

import numpy as np

MAGIC = b"IKQE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write a ``name -> array`` mapping; names are written in sorted order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = data.reshape(tuple(dims)).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
