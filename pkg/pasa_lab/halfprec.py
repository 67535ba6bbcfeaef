"""
IEEE 754 binary16 emulation.

Values are carried on the host as FP64 numbers that are exactly representable
in binary16; the 16-bit pattern (``F16Value``) only appears at rounding
boundaries. Rounding is always round-to-nearest-even.

numpy's float64 -> float16 cast is a single correctly rounded conversion, and
every binary op below is evaluated exactly enough in FP64 (53 >= 2*11 + 2
bits) that the one final rounding to binary16 equals the IEEE result.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# ── Format constants ────────────────────────────────────────────────────

F16_MAX = 65504.0
F16_EPS = 2.0**-10            # spacing of binary16 numbers at 1.0
F16_UNIT_ROUNDOFF = 2.0**-11  # relative precision under nearest-even
F16_MIN_NORMAL = 2.0**-14
F16_MIN_SUBNORMAL = 2.0**-24

# Precision / overflow boundary per data format (FP8 is out of scope)
FORMAT_TABLE: dict[str, tuple[float, float]] = {
    "FP16": (4.88e-4, F16_MAX),
    "BF16": (3.906e-3, 3.4e38),
    "FP32": (5.96e-8, 3.4e38),
}


class BinOp(str, enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"


@dataclass(frozen=True)
class F16Value:
    """A binary16 value held as its raw 16-bit pattern."""

    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"not a 16-bit pattern: {self.bits:#x}")

    @classmethod
    def from_float(cls, x: float) -> F16Value:
        return f16_round(x)

    def to_float(self) -> float:
        return float(np.array(self.bits, dtype=np.uint16).view(np.float16))

    @property
    def is_nan(self) -> bool:
        return (self.bits & 0x7C00) == 0x7C00 and (self.bits & 0x03FF) != 0

    @property
    def is_inf(self) -> bool:
        return (self.bits & 0x7FFF) == 0x7C00

    def __float__(self) -> float:
        return self.to_float()

    def __repr__(self) -> str:
        return f"F16Value({self.to_float()!r}, bits={self.bits:#06x})"


def f16_from_bits(bits: int) -> F16Value:
    return F16Value(bits & 0xFFFF)


def round_f16(x: np.ndarray | float) -> np.ndarray:
    """Round an array to binary16 and hand it back as exactly-representable FP64."""
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)


def f16_round(x: float) -> F16Value:
    """Nearest binary16 value (ties to even). Overflow past 65504 gives ±INF."""
    with np.errstate(over="ignore", invalid="ignore"):
        half = np.array(x, dtype=np.float64).astype(np.float16)
    return F16Value(int(half.view(np.uint16)))


def f16_binop(a: F16Value, b: F16Value, op: BinOp | str) -> F16Value:
    """Exact real result of ``a op b`` rounded once to binary16.

    INF and NAN propagate as in IEEE 754; division by ±0 yields ±INF.
    """
    op = BinOp(op)
    x, y = np.float64(a.to_float()), np.float64(b.to_float())
    with np.errstate(all="ignore"):
        if op is BinOp.ADD:
            r = x + y
        elif op is BinOp.SUB:
            r = x - y
        elif op is BinOp.MUL:
            r = x * y
        else:
            r = np.divide(x, y)
    return f16_round(float(r))


def f16_exp(x: F16Value) -> F16Value:
    """e**x evaluated in FP64 and rounded to binary16."""
    v = x.to_float()
    if math.isnan(v):
        return x
    with np.errstate(over="ignore"):
        r = np.exp(np.float64(v))
    return f16_round(float(r))


def bf16_bits_to_f16(raw: np.ndarray) -> np.ndarray:
    """Convert bfloat16 bit patterns (uint16) to FP16 values carried as FP64.

    BF16 is widened losslessly to FP32 and then rounded to binary16, the
    conversion applied to BF16 inputs before they enter the pipeline.
    """
    raw = np.asarray(raw, dtype=np.uint16)
    widened = (raw.astype(np.uint32) << 16).view(np.float32)
    return round_f16(widened.astype(np.float64))
