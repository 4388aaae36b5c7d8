"""Single-file checkpoint format.

Layout (all integers little-endian):

    magic "TCK1"
    u32 length of the config block, then that many UTF-8 bytes of
        "key=value" lines
    u32 tensor count, then per tensor:
        u16 name length, name bytes,
        u8 rank, u32 per dimension,
        float64 little-endian values in row-major order

Normalization statistics ride along as the tensors "norm.mean" and
"norm.std".
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"TCK1"


def save_checkpoint(path, config, tensors):
    """Write config (dict of scalars/strings) and named float64 arrays."""
    lines = "".join(f"{k}={config[k]}\n" for k in config)
    blob = lines.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim and not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read back ``(config_dict, OrderedDict[name, ndarray])``."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = {}
        for line in fh.read(clen).decode().splitlines():
            key, _, value = line.partition("=")
            config[key] = value
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
        return config, tensors
