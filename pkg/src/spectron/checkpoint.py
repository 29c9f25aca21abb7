"""Versioned little-endian binary checkpoint of named float64 matrices."""

import struct

import numpy as np

from .errors import SpectronError

MAGIC = b"SPCK"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write ``{name: 2-D array}`` in sorted name order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise SpectronError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise SpectronError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        size = rows * cols * 8
        if pos + size > len(data):
            raise SpectronError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(data[pos : pos + size], dtype="<f8").reshape(rows, cols).copy()
        pos += size
    return out
