"""Rank-4 tensor helpers and the RTN1 binary container.

Tensors are plain ``numpy.ndarray`` objects of shape ``(B, C, H, W)`` in
C order (width fastest). Every function here returns a new array and never
writes into its inputs.
"""

import struct
from pathlib import Path

import numpy as np

DTYPE = np.float32

RTN1_MAGIC = b"RTN1"
_RTN1_DTYPES = {0: np.dtype("<f4")}
_RTN1_HEADER = struct.Struct("<4sBB4I")


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent."""


class FormatError(ValueError):
    """Raised when a serialized tensor is malformed."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Validate ``x`` as a finite rank-4 array and return it as ``dtype``."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor (B, C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor dims must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("tensor contains NaN or Inf")
    return arr


def pad_zero(t: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    if pad_h < 0 or pad_w < 0:
        raise ValueError(f"padding must be non-negative, got ({pad_h}, {pad_w})")
    if pad_h == 0 and pad_w == 0:
        return t.copy()
    return np.pad(t, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))


def crop_center(t: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Inverse of :func:`pad_zero`."""
    h, w = t.shape[2], t.shape[3]
    if 2 * pad_h >= h or 2 * pad_w >= w:
        raise ShapeError(f"cannot crop ({pad_h}, {pad_w}) from spatial dims {(h, w)}")
    return t[:, :, pad_h:h - pad_h, pad_w:w - pad_w].copy()


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], a.shape[2], a.shape[3]) != (
        b.shape[0], b.shape[2], b.shape[3]
    ):
        raise ShapeError(f"cannot concatenate channels of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(t: np.ndarray, c_split: int):
    c = t.shape[1]
    if not 0 < c_split < c:
        raise IndexError(f"split index {c_split} out of range for {c} channels")
    return t[:, :c_split].copy(), t[:, c_split:].copy()


def argmax_channel(t: np.ndarray) -> np.ndarray:
    """Per-pixel class label, shape ``(B, H, W)``.

    ``np.argmax`` returns the first maximal index, which gives the
    lowest-channel tie rule.
    """
    return np.argmax(t, axis=1).astype(np.int64)


def write_rtn1(path, t: np.ndarray) -> None:
    arr = np.ascontiguousarray(t, dtype="<f4")
    if arr.ndim != 4:
        raise ShapeError(f"RTN1 stores rank-4 tensors only, got shape {arr.shape}")
    header = _RTN1_HEADER.pack(RTN1_MAGIC, 0, 4, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_rtn1(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _RTN1_HEADER.size:
        raise FormatError(f"{path}: truncated RTN1 header")
    magic, dtype_code, rank, *dims = _RTN1_HEADER.unpack_from(raw)
    if magic != RTN1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {RTN1_MAGIC!r}")
    if dtype_code not in _RTN1_DTYPES:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if rank != 4:
        raise FormatError(f"{path}: rank {rank} is not 4")
    dtype = _RTN1_DTYPES[dtype_code]
    count = int(np.prod(dims))
    payload = raw[_RTN1_HEADER.size:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, dims {tuple(dims)} need "
            f"{count * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(DTYPE)
