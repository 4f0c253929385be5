"""Binary checkpoint format.

Little-endian: magic ``BVF1`` followed by blobs of
``u32 name_len | name utf-8 | u32 rank | u64 dims[rank] | f64 data``
until end of file.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Dict

import numpy as np

from ..errors import FormatError

MAGIC = b"BVF1"


def save_checkpoint(path, state: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in state.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a BVF1 checkpoint")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 4
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = data.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return out
