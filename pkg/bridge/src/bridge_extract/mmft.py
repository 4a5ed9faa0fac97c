"""Minimal MMFT writer.

The format is the contract with the training toolkit, so it is
reimplemented here rather than imported: little-endian, magic "MMFT",
version 1, dtype code 1 (float32), order byte, 64-bit extents, row-major
payload. Writes are atomic (temp file + rename) so a crashed extraction
never leaves a half-written feature file.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MMFT"
VERSION = 1
DTYPE_F32 = 1


def write_mmft_atomic(arr: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > 3:
        raise ValueError(f"MMFT supports order 1..3, got order {arr.ndim}")
    path = Path(path)
    header = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F32, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + dims + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
