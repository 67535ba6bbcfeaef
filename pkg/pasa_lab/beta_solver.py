"""
Optimal-accuracy solver for the shifting hyperparameter beta.

With rounded shifting-matrix entries b = fl(beta/n) and a = fl(1 - beta/n) + b
the invariance the device actually realises is

    f(beta) = b*n / (a*(a - b*n)) + (1 - a)/a

and the correction terms are exact only when beta/(1 - beta) == f(beta).
``optimal_beta`` solves that by fixed-point iteration beta <- f/(1 + f),
everything outside the two roundings evaluated in FP64 and in the same
expression order as the reference procedure, so the solved values agree to
the last printed digit.
"""

from __future__ import annotations

import logging
import math

from pydantic import BaseModel, ConfigDict

from pasa_lab.pasa_core import SingularShiftError
from pasa_lab.tensors import Precision, quantize

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1.0e-8
MAX_ITERATIONS = 10_000

# Seeds of the conformance table: 0.9, 1-2^-4, 1-2^-5, 1-2^-6, 0.99, 0.999
CONFORMANCE_SEEDS: tuple[float, ...] = (0.9, 1 - 2**-4, 1 - 2**-5, 1 - 2**-6, 0.99, 0.999)


class DivergenceError(RuntimeError):
    """Fixed-point iteration did not settle within the iteration cap."""


class InvarianceReport(BaseModel):
    """Ideal vs realised invariance for one (beta, n)."""

    model_config = ConfigDict(frozen=True)

    beta: float
    n: int
    a: float
    b: float
    inva_ideal: float
    inva_actual: float
    rel_err: float

    @property
    def rel_err_percent_display(self) -> str:
        return format_percent(self.rel_err)


class ConformanceRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta0: float
    beta_star: float
    initial: InvarianceReport
    optimized: InvarianceReport


def _realised_invariance(beta: float, n: int, tp: Precision) -> tuple[float, float, float]:
    m0 = 1.0 - beta / n
    m1 = -beta / n
    m0 = float(quantize(m0, tp))
    m1 = float(quantize(m1, tp))
    b = -m1
    a = m0 + b
    denom = a * (a - b * n)
    if denom == 0.0:
        raise SingularShiftError(f"a*(a - b*n) vanishes for beta={beta!r}, n={n}")
    return b * n / denom + (1 - a) / a, a, b


def invariance_parameter(beta: float, n: int, tp: Precision = Precision.FP16) -> InvarianceReport:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    actual, a, b = _realised_invariance(beta, n, tp)
    ideal = beta / (1.0 - beta)
    return InvarianceReport(
        beta=beta,
        n=n,
        a=a,
        b=b,
        inva_ideal=ideal,
        inva_actual=actual,
        rel_err=abs(ideal - actual) / abs(ideal),
    )


def optimal_beta(
    beta0: float,
    n: int,
    tol: float = DEFAULT_TOL,
    tp: Precision = Precision.FP16,
) -> float:
    """Solve beta/(1-beta) == f(beta) starting from ``beta0``.

    Raises DivergenceError after MAX_ITERATIONS steps.
    """
    if not 0.0 < beta0 < 1.0:
        raise ValueError(f"beta0 must lie in (0, 1), got {beta0}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    err = 1.0
    beta = beta0
    iterations = 0
    while err > tol:
        if iterations >= MAX_ITERATIONS:
            raise DivergenceError(
                f"beta iteration from {beta0!r} (n={n}) did not converge in {MAX_ITERATIONS} steps"
            )
        inva, _, _ = _realised_invariance(beta0, n, tp)
        beta = inva / (1.0 + inva)
        err = abs(beta - beta0) / abs(beta0)
        beta0 = beta * 1.0
        iterations += 1

    logger.debug("beta solved to %.9f in %d iterations", beta, iterations)
    return beta


def conformance_table(
    n: int = 128,
    seeds: tuple[float, ...] = CONFORMANCE_SEEDS,
    tol: float = DEFAULT_TOL,
) -> list[ConformanceRow]:
    """Invariance before and after solving, one row per seed."""
    rows = []
    for beta0 in seeds:
        beta_star = optimal_beta(beta0, n, tol)
        rows.append(
            ConformanceRow(
                beta0=beta0,
                beta_star=beta_star,
                initial=invariance_parameter(beta0, n),
                optimized=invariance_parameter(beta_star, n),
            )
        )
    return rows


def format_sig4(x: float) -> str:
    """Four significant digits with trailing zeros kept: 9.000, 15.00, 1031."""
    return f"{x:#.4g}".rstrip(".")


def format_percent(rel_err: float) -> str:
    """Relative error in percent, truncated (not rounded) to two decimals."""
    return f"{math.floor(rel_err * 1e4 + 1e-9) / 100:.2f}%"
