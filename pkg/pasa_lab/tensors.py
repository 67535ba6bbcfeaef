"""
Dense matrix kernels with explicit rounding points.

Every kernel takes the precision it must round to and performs each scalar
operation as "exact result, then round". Inputs may carry leading batch axes;
the matrix is always the trailing two axes, so a kernel applied to a
(B, N, rows, cols) stack is bit-identical to looping it over every (b, n).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

from pasa_lab.halfprec import round_f16


class ContractViolation(ValueError):
    """Inputs break a kernel precondition (shapes, representability)."""


class Precision(str, enum.Enum):
    FP16 = "FP16"
    FP32 = "FP32"
    FP64 = "FP64"

    @property
    def dtype(self) -> type[np.floating]:
        return _DTYPES[self]


_DTYPES = {
    Precision.FP16: np.float16,
    Precision.FP32: np.float32,
    Precision.FP64: np.float64,
}


def quantize(x: np.ndarray | float, prec: Precision) -> np.ndarray:
    """Round ``x`` to ``prec`` and return it as FP64."""
    if prec is Precision.FP16:
        return round_f16(x)
    if prec is Precision.FP32:
        with np.errstate(over="ignore", invalid="ignore"):
            return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def is_representable(x: np.ndarray, prec: Precision) -> bool:
    """True when re-rounding ``x`` to ``prec`` leaves every element unchanged."""
    x = np.asarray(x, dtype=np.float64)
    q = quantize(x, prec)
    return bool(np.array_equal(q, x, equal_nan=True))


# ── Precision policies ──────────────────────────────────────────────────


class PolicyName(str, enum.Enum):
    GOLDEN_FP64 = "GOLDEN_FP64"
    FA_FP32 = "FA_FP32"
    FA_PARTIAL_FP16 = "FA_PARTIAL_FP16"
    FA_FULL_FP16 = "FA_FULL_FP16"
    PASA_FP16 = "PASA_FP16"


@dataclass(frozen=True)
class PrecisionPolicy:
    """Numeric format assigned to each pipeline stage."""

    name: PolicyName
    gemm_accum: Precision
    gemm_store: Precision
    vector_prec: Precision

    @property
    def is_pasa(self) -> bool:
        return self.name is PolicyName.PASA_FP16

    def with_vector_prec(self, prec: Precision) -> PrecisionPolicy:
        """Copy with the vector-unit precision overridden (config escape hatch)."""
        return PrecisionPolicy(self.name, self.gemm_accum, self.gemm_store, prec)


_P = Precision
POLICIES: dict[PolicyName, PrecisionPolicy] = {
    PolicyName.GOLDEN_FP64: PrecisionPolicy(PolicyName.GOLDEN_FP64, _P.FP64, _P.FP64, _P.FP64),
    PolicyName.FA_FP32: PrecisionPolicy(PolicyName.FA_FP32, _P.FP32, _P.FP32, _P.FP32),
    PolicyName.FA_PARTIAL_FP16: PrecisionPolicy(PolicyName.FA_PARTIAL_FP16, _P.FP32, _P.FP16, _P.FP16),
    PolicyName.FA_FULL_FP16: PrecisionPolicy(PolicyName.FA_FULL_FP16, _P.FP16, _P.FP16, _P.FP16),
    PolicyName.PASA_FP16: PrecisionPolicy(PolicyName.PASA_FP16, _P.FP32, _P.FP16, _P.FP16),
}


def get_policy(name: PolicyName | str) -> PrecisionPolicy:
    return POLICIES[PolicyName(name)]


# ── Matrix container ────────────────────────────────────────────────────


@dataclass(frozen=True)
class Matrix2D:
    """Row-major dense matrix of FP64 storage tagged with its semantic precision."""

    data: np.ndarray
    prec: Precision = Precision.FP64

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ContractViolation(f"Matrix2D needs 2 axes, got shape {data.shape}")
        if not is_representable(data, self.prec):
            raise ContractViolation(f"values are not exactly representable in {self.prec.value}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_values(cls, values: np.ndarray, prec: Precision) -> Matrix2D:
        """Round ``values`` to ``prec`` and wrap them."""
        return cls(quantize(values, prec), prec)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        return self.data if dtype is None else self.data.astype(dtype)


ArrayLike = Union[np.ndarray, Matrix2D]


# ── Kernels ─────────────────────────────────────────────────────────────


def gemm(
    a: ArrayLike,
    b: ArrayLike,
    policy: PrecisionPolicy,
    *,
    transpose_b: bool = False,
) -> np.ndarray:
    """A @ B (or A @ B^T) accumulated in ascending inner-index order.

    Each product and each partial sum is rounded to ``policy.gemm_accum``;
    the finished sum is rounded once more to ``policy.gemm_store``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"gemm inner dimensions disagree: {a.shape} x {b.shape}")

    dt = policy.gemm_accum.dtype
    a_ = a.astype(dt)
    b_ = b.astype(dt)
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    acc = np.zeros(out_shape, dtype=dt)
    with np.errstate(all="ignore"):
        for k in range(a.shape[-1]):
            acc += a_[..., :, k : k + 1] * b_[..., k : k + 1, :]
    return quantize(acc.astype(np.float64), policy.gemm_store)


def rowmax(a: np.ndarray) -> np.ndarray:
    """Row maxima as a column vector. NAN in a row yields NAN."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] == 0:
        raise ContractViolation("rowmax of an empty row")
    return np.max(a, axis=-1, keepdims=True)


def rowsum(
    a: np.ndarray,
    prec: Precision,
    *,
    accum: Precision | None = None,
) -> np.ndarray:
    """Left-to-right row sums, every partial sum rounded to ``accum``.

    ``accum`` defaults to ``prec``; a wider ``accum`` is rounded to ``prec``
    once at the end.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] == 0:
        raise ContractViolation("rowsum of an empty row")
    dt = (accum or prec).dtype
    cols = a.astype(dt)
    acc = np.zeros(a.shape[:-1] + (1,), dtype=dt)
    with np.errstate(all="ignore"):
        for c in range(a.shape[-1]):
            acc += cols[..., c : c + 1]
    return quantize(acc.astype(np.float64), prec)


def rowmean(
    a: np.ndarray,
    prec: Precision,
    *,
    accum: Precision | None = None,
) -> np.ndarray:
    """rowsum followed by one rounded division by the column count."""
    a = np.asarray(a, dtype=np.float64)
    total = rowsum(a, accum or prec)
    with np.errstate(all="ignore"):
        return quantize(total / a.shape[-1], prec)


def exp_elementwise(a: np.ndarray, shift: np.ndarray, prec: Precision) -> np.ndarray:
    """round(exp(round(a - shift))) with ``shift`` broadcast along rows."""
    a = np.asarray(a, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape[-2] != a.shape[-2]:
        raise ContractViolation(f"shift has {shift.shape[-2]} rows, matrix has {a.shape[-2]}")
    with np.errstate(all="ignore"):
        return quantize(np.exp(quantize(a - shift, prec)), prec)


def scale(a: np.ndarray, alpha: float, prec: Precision) -> np.ndarray:
    """Static scaling: every element divided by ``alpha`` and rounded."""
    with np.errstate(all="ignore"):
        return quantize(np.asarray(a, dtype=np.float64) / alpha, prec)


def vmul(x: np.ndarray, y: np.ndarray, prec: Precision) -> np.ndarray:
    with np.errstate(all="ignore"):
        return quantize(np.asarray(x) * np.asarray(y), prec)


def vadd(x: np.ndarray, y: np.ndarray, prec: Precision) -> np.ndarray:
    with np.errstate(all="ignore"):
        return quantize(np.asarray(x) + np.asarray(y), prec)


def vsub(x: np.ndarray, y: np.ndarray, prec: Precision) -> np.ndarray:
    with np.errstate(all="ignore"):
        return quantize(np.asarray(x) - np.asarray(y), prec)


def vdiv(x: np.ndarray, y: np.ndarray, prec: Precision) -> np.ndarray:
    with np.errstate(all="ignore"):
        return quantize(np.asarray(x) / np.asarray(y), prec)


def vexp(x: np.ndarray, prec: Precision) -> np.ndarray:
    with np.errstate(all="ignore"):
        return quantize(np.exp(np.asarray(x, dtype=np.float64)), prec)
