"""Raw tensor dump format: little-endian uint32 rank + extents, then float32 data."""

import numpy as np


def dump_array(path, arr):
    arr = np.asarray(arr, dtype="<f4", order="C")
    header = np.asarray([arr.ndim] + list(arr.shape), dtype="<u4")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(arr.tobytes())


def load_array(path):
    with open(path, "rb") as f:
        raw = f.read()
    rank = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    shape = tuple(int(s) for s in np.frombuffer(raw[4:4 + 4 * rank], dtype="<u4"))
    count = 1
    for s in shape:
        count *= s
    data = np.frombuffer(raw[4 + 4 * rank:], dtype="<f4", count=count)
    return data.reshape(shape).astype(np.float32)
