"""
NPY v1.0 tensor files.

Accepted payloads are little-endian float16, float32, or uint16 holding
bfloat16 bit patterns (the NPY format has no bfloat16 tag, so the caller says
``dtype="bf16"``). Everything is returned as the FP16 carrier used by the
kernels: FP64 arrays whose values are exactly representable in binary16.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from numpy.lib import format as npy_format

from pasa_lab.halfprec import bf16_bits_to_f16, round_f16

logger = logging.getLogger(__name__)

NPY_MAGIC = b"\x93NUMPY"
HEADER_OFFSET = len(NPY_MAGIC) + 2

FileDType = Literal["f16", "f32", "bf16"]

_PAYLOADS = {
    np.dtype("<f2"): "f16",
    np.dtype("<f4"): "f32",
    np.dtype("<u2"): "bf16",
}


class TensorFileError(ValueError):
    """Malformed tensor file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path: Optional[Path] = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte {offset})")
        self.offset = offset
        self.path = path


def load_tensor_file(
    path: Path | str,
    dtype: Optional[FileDType] = None,
    expect_shape: Optional[tuple[int, ...]] = None,
) -> np.ndarray:
    """Read a 4-D (B, N, S, d) NPY file into the FP16 carrier."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(NPY_MAGIC))
        if magic != NPY_MAGIC:
            raise TensorFileError("not an NPY file (bad magic)", 0, path)
        version = f.read(2)
        if len(version) < 2 or tuple(version) != (1, 0):
            raise TensorFileError(f"unsupported NPY version {tuple(version)}", len(NPY_MAGIC), path)
        try:
            shape, fortran_order, file_dtype = npy_format.read_array_header_1_0(f)
        except ValueError as e:
            raise TensorFileError(f"bad header: {e}", HEADER_OFFSET, path) from e

        kind = _PAYLOADS.get(file_dtype)
        if kind is None:
            raise TensorFileError(
                f"unsupported dtype {file_dtype.str}; expected <f2, <f4 or <u2 (bf16)", HEADER_OFFSET, path
            )
        if kind == "bf16" and dtype != "bf16":
            raise TensorFileError("uint16 payload is only accepted as bf16 (pass dtype='bf16')", HEADER_OFFSET, path)
        if dtype == "bf16" and kind != "bf16":
            raise TensorFileError(f"bf16 requested but payload is {file_dtype.str}", HEADER_OFFSET, path)
        if len(shape) != 4:
            raise TensorFileError(f"expected a 4-D (B, N, S, d) tensor, got shape {shape}", HEADER_OFFSET, path)
        if expect_shape is not None and tuple(shape) != tuple(expect_shape):
            raise TensorFileError(f"shape {shape} does not match expected {expect_shape}", HEADER_OFFSET, path)

        data_offset = f.tell()
        nbytes = math.prod(shape) * file_dtype.itemsize
        raw = f.read(nbytes)
        if len(raw) < nbytes:
            raise TensorFileError(
                f"truncated payload: {len(raw)} of {nbytes} bytes", data_offset + len(raw), path
            )

    arr = np.frombuffer(raw, dtype=file_dtype).reshape(shape, order="F" if fortran_order else "C")
    if kind == "bf16":
        out = bf16_bits_to_f16(arr)
    else:
        out = round_f16(arr.astype(np.float64))
    logger.debug("Loaded %s %s from %s", kind, shape, path)
    return np.ascontiguousarray(out)


def _f32_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round FP32 to bfloat16 (nearest even) and return the upper 16 bits."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def save_tensor_file(path: Path | str, tensor: np.ndarray, dtype: FileDType = "f16") -> Path:
    """Write ``tensor`` as NPY v1.0 with the requested payload type."""
    path = Path(path)
    tensor = np.asarray(tensor, dtype=np.float64)
    with np.errstate(over="ignore"):
        if dtype == "f16":
            payload = tensor.astype("<f2")
        elif dtype == "f32":
            payload = tensor.astype("<f4")
        elif dtype == "bf16":
            payload = _f32_to_bf16_bits(tensor).astype("<u2")
        else:
            raise ValueError(f"unknown tensor dtype {dtype!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        npy_format.write_array(f, np.ascontiguousarray(payload), version=(1, 0))
    logger.info("Wrote %s", path)
    return path
