"""binary16 emulation against an independent integer/Fraction rounding oracle."""

import math
import random
from decimal import Decimal, localcontext
from fractions import Fraction

import numpy as np
import pytest

from pasa_lab.halfprec import (
    F16_EPS,
    F16_MAX,
    F16_MIN_NORMAL,
    F16_MIN_SUBNORMAL,
    F16_UNIT_ROUNDOFF,
    FORMAT_TABLE,
    BinOp,
    F16Value,
    bf16_bits_to_f16,
    f16_binop,
    f16_exp,
    f16_from_bits,
    f16_round,
    round_f16,
)
from pasa_lab.reports import format_precision_table


def oracle_bits(x) -> int:
    """Nearest-even binary16 bit pattern of an exact rational (or ±inf)."""
    if isinstance(x, float) and math.isinf(x):
        return 0xFC00 if x < 0 else 0x7C00
    if isinstance(x, float) and x == 0.0:
        return 0x8000 if math.copysign(1.0, x) < 0 else 0
    x = Fraction(x)
    sign = 0x8000 if x < 0 else 0
    a = abs(x)
    if a == 0:
        return sign
    e = a.numerator.bit_length() - a.denominator.bit_length()
    if Fraction(2) ** e > a:
        e -= 1
    elif Fraction(2) ** (e + 1) <= a:
        e += 1
    e = max(e, -14)
    ulp = Fraction(2) ** (e - 10)
    scaled = a / ulp
    q = scaled.numerator // scaled.denominator
    rem = scaled - q
    if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and q % 2 == 1):
        q += 1
    if q < 2**10:
        return sign | q
    if q == 2**11:
        q = 2**10
        e += 1
    if e > 15:
        return sign | 0x7C00
    return sign | ((e + 15) << 10) | (q - 2**10)


def finite_patterns():
    return [b for b in range(0x10000) if (b & 0x7C00) != 0x7C00]


def oracle_value(x) -> float:
    return f16_from_bits(oracle_bits(x)).to_float()


class TestConstants:
    def test_limits_match_numpy(self):
        info = np.finfo(np.float16)
        assert F16_MAX == float(info.max)
        assert F16_MIN_NORMAL == float(info.tiny)
        assert F16_MIN_SUBNORMAL == float(f16_from_bits(0x0001).to_float())

    def test_spacing_and_roundoff(self, rng):
        assert F16_EPS == float(np.spacing(np.float16(1.0)))
        assert FORMAT_TABLE["FP16"] == (4.88e-4, F16_MAX)
        x = rng.uniform(F16_MIN_NORMAL, F16_MAX, 10_000) * rng.choice([-1.0, 1.0], 10_000)
        assert np.all(np.abs(round_f16(x) - x) <= F16_UNIT_ROUNDOFF * np.abs(x))

    def test_overflow_boundary(self):
        assert f16_round(65504.0).to_float() == F16_MAX
        assert f16_round(65519.99).to_float() == F16_MAX
        assert f16_round(65520.0).is_inf
        assert f16_round(-70000.0).bits == 0xFC00

    def test_format_table_rendering(self):
        lines = format_precision_table().splitlines()
        assert lines[0].split() == ["format", "precision", "overflow"]
        assert [line.split() for line in lines[1:]] == [
            ["FP16", "0.000488", "65504"],
            ["BF16", "0.003906", "3.4e+38"],
            ["FP32", "5.96e-08", "3.4e+38"],
        ]

    def test_nan_and_inf_flags(self):
        assert f16_from_bits(0x7E00).is_nan
        assert not f16_from_bits(0x7C00).is_nan
        assert f16_from_bits(0x7C00).is_inf
        assert float(F16Value.from_float(1.5)) == 1.5


class TestRounding:
    def test_every_pattern_round_trips(self):
        for bits in finite_patterns():
            v = f16_from_bits(bits)
            assert f16_round(v.to_float()).bits == bits

    def test_oracle_agrees_on_every_pattern(self):
        for bits in finite_patterns():
            assert oracle_bits(f16_from_bits(bits).to_float()) == bits

    def test_midpoints_round_to_even(self):
        # 2049 lies between 2048 and 2050; 2051 between 2050 and 2052
        assert f16_round(2049.0).to_float() == 2048.0
        assert f16_round(2051.0).to_float() == 2052.0
        assert f16_round(1 + 2**-11).to_float() == 1.0
        assert f16_round(1 + 3 * 2**-11).to_float() == 1 + 2**-9

    def test_random_doubles_against_oracle(self):
        r = random.Random(7)
        for _ in range(20_000):
            x = r.uniform(-1, 1) * 2.0 ** r.randint(-26, 17)
            assert f16_round(x).bits == oracle_bits(x), x

    def test_vectorised_round_matches_scalar(self, rng):
        x = rng.normal(0, 300, 5000)
        vec = round_f16(x)
        assert np.array_equal(vec, [f16_round(v).to_float() for v in x])


class TestExp:
    def test_exhaustive_against_decimal_oracle(self):
        mismatches = []
        with localcontext() as ctx:
            ctx.prec = 60
            for bits in finite_patterns():
                x = f16_from_bits(bits)
                v = x.to_float()
                if v > 12.0:
                    expected = math.inf
                elif v < -18.0:
                    expected = 0.0
                else:
                    expected = oracle_value(Fraction(Decimal(v).exp()))
                if f16_exp(x).to_float() != expected:
                    mismatches.append(bits)
        assert mismatches == []

    def test_special_values(self):
        assert f16_exp(f16_from_bits(0x7C00)).is_inf
        assert f16_exp(f16_from_bits(0xFC00)).to_float() == 0.0
        assert f16_exp(f16_from_bits(0x7E00)).is_nan
        assert f16_exp(f16_round(12.0)).is_inf  # e^12 > 65504


def _binop_mismatches(n_pairs: int, seed: int) -> list:
    ops = {
        BinOp.ADD: lambda a, b: a + b,
        BinOp.SUB: lambda a, b: a - b,
        BinOp.MUL: lambda a, b: a * b,
        BinOp.DIV: lambda a, b: a / b,
    }
    patterns = finite_patterns()
    r = random.Random(seed)
    bad = []
    for _ in range(n_pairs):
        a = f16_from_bits(r.choice(patterns))
        b = f16_from_bits(r.choice(patterns))
        op = r.choice(list(BinOp))
        fa, fb = Fraction(a.to_float()), Fraction(b.to_float())
        if op is BinOp.DIV and fb == 0:
            continue
        expected = oracle_value(ops[op](fa, fb))
        if f16_binop(a, b, op).to_float() != expected:
            bad.append((a, b, op))
    return bad


class TestBinops:
    def test_random_pairs(self):
        assert _binop_mismatches(100_000, seed=11) == []

    @pytest.mark.slow
    def test_million_random_pairs(self):
        assert _binop_mismatches(1_000_000, seed=12) == []

    def test_inf_nan_propagation(self):
        inf = f16_from_bits(0x7C00)
        one = f16_round(1.0)
        zero = f16_round(0.0)
        assert f16_binop(inf, one, "add").is_inf
        assert f16_binop(inf, inf, BinOp.SUB).is_nan
        assert f16_binop(inf, zero, BinOp.MUL).is_nan
        assert f16_binop(one, zero, BinOp.DIV).is_inf
        assert f16_binop(f16_round(60000.0), f16_round(10000.0), BinOp.ADD).is_inf

    def test_add_of_half_ulp_is_lost(self):
        big = f16_round(2048.0)
        assert f16_binop(big, f16_round(1.0), BinOp.ADD).to_float() == 2048.0


class TestBf16:
    def test_conversion(self):
        raw = np.array([0x3F80, 0xC000, 0x4780, 0x3DCD], dtype=np.uint16)
        out = bf16_bits_to_f16(raw)
        assert out[0] == 1.0
        assert out[1] == -2.0
        assert np.isinf(out[2])  # 65536 does not fit FP16
        assert out[3] == f16_round(0.10009765625).to_float()
