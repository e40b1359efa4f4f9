"""Binary tensor serialization shared by checkpoint files.

Layout per tensor: u32 rank, u32 extent per axis, then the float64 values in
row-major order. All fields little-endian.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .autodiff import Tensor


def write_tensor(fh: BinaryIO, tensor: Tensor) -> None:
    arr = tensor.data
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return Tensor(data)


def write_named_tensors(fh: BinaryIO, tensors: dict, order: Sequence[str]) -> None:
    for name in order:
        write_tensor(fh, tensors[name])


def read_named_tensors(fh: BinaryIO, order: Sequence[str]) -> dict:
    return {name: read_tensor(fh) for name in order}


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"tensor stream truncated: wanted {n} bytes, got {len(buf)}")
    return buf
