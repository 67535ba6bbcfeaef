"""
Pseudo-average shifting attention (PASA).

Each key block is multiplied by the shifting matrix M = (I - beta*J/s2)/alpha
before the score GEMM, so the scores S' = Q K^T M arrive already scaled and
with a fraction beta of their block row-mean removed. The online softmax then
tracks a running global mean of the shifted row-means and corrects the
running maximum, denominator and output so the final result equals ordinary
attention in exact arithmetic.

The pipeline is vectorised over (batch, head) exactly like
``attention_ref.flash_attention``; only the key/value block loop is sequential.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from pasa_lab.attention_ref import AttentionProblem, M0Mode, flash_attention
from pasa_lab.tensors import (
    ContractViolation,
    Matrix2D,
    Precision,
    PrecisionPolicy,
    exp_elementwise,
    gemm,
    quantize,
    rowmax,
    rowmean,
    rowsum,
    vadd,
    vdiv,
    vexp,
    vmul,
    vsub,
)

logger = logging.getLogger(__name__)


class SingularShiftError(ZeroDivisionError):
    """The shifting matrix (or the recovery factor 1/(1-beta)) is singular."""


# ── Shifting matrix ─────────────────────────────────────────────────────


def shifting_coefficients(s2: int, beta: float, prec: Precision) -> tuple[float, float]:
    """Rounded unscaled entries of I - beta*J/s2 as (diagonal, off-diagonal)."""
    if s2 < 1:
        raise ContractViolation("block size must be >= 1")
    b = float(quantize(beta / s2, prec))
    diag = float(quantize(1.0 - beta / s2, prec))
    return diag, -b


def build_shifting_matrix(s2: int, beta: float, alpha: float, prec: Precision) -> Matrix2D:
    """M = (I - beta*J/s2) / alpha with every entry rounded to ``prec``.

    The unscaled coefficients are rounded first and the division by alpha
    rounds again, the same two steps a device takes when it loads the rounded
    pair and folds in the static scale.
    """
    if not 0.0 <= beta <= 1.0:
        raise ContractViolation(f"beta must lie in [0, 1], got {beta}")
    if alpha <= 0:
        raise ContractViolation(f"alpha must be positive, got {alpha}")
    diag, off = shifting_coefficients(s2, beta, prec)
    data = np.full((s2, s2), off / alpha)
    np.fill_diagonal(data, diag / alpha)
    return Matrix2D.from_values(data, prec)


def shifting_matrix_inverse(s: int, lam: float) -> Matrix2D:
    """Closed-form inverse of I - lam*J: I + lam/(1 - lam*s) * J, in FP64."""
    denom = 1.0 - lam * s
    if abs(denom) < 1e-12:
        raise SingularShiftError(f"I - lam*J is singular for lam*s = {lam * s!r}")
    data = np.full((s, s), lam / denom)
    data[np.diag_indices(s)] += 1.0
    return Matrix2D(data, Precision.FP64)


@dataclass(frozen=True)
class PasaParams:
    beta: float
    alpha: float
    s2: int
    M: Matrix2D
    invariance: float  # beta / (1 - beta), FP64

    @classmethod
    def create(
        cls,
        beta: float,
        d: int,
        s2: int,
        prec: Precision = Precision.FP16,
    ) -> PasaParams:
        if not 0.0 <= beta < 1.0:
            if beta == 1.0:
                raise SingularShiftError("beta == 1 leaves nothing to recover the mean from")
            raise ContractViolation(f"beta must lie in [0, 1), got {beta}")
        alpha = math.sqrt(d)
        return cls(
            beta=beta,
            alpha=alpha,
            s2=s2,
            M=build_shifting_matrix(s2, beta, alpha, prec),
            invariance=beta / (1.0 - beta),
        )


# ── Algorithm steps ─────────────────────────────────────────────────────


def preprocess_keys(k_block: np.ndarray, M: Matrix2D, policy: PrecisionPolicy) -> np.ndarray:
    """K_j^T M as a GEMM; ``k_block`` is (..., s2, d), the result (..., d, s2)."""
    k_block = np.asarray(k_block, dtype=np.float64)
    if k_block.shape[-2] != M.rows:
        raise ContractViolation(f"key block has {k_block.shape[-2]} rows, M is {M.rows}x{M.cols}")
    return gemm(np.swapaxes(k_block, -1, -2), M, policy)


def recover_global_mean(
    f_prev: np.ndarray | None,
    s_bar: np.ndarray,
    j: int,
    prec: Precision,
) -> np.ndarray:
    """Running mean of the block row-means: ((j-1)*F_prev + S_bar) / j."""
    if j < 1:
        raise ContractViolation("block index j is 1-based")
    s_bar = np.asarray(s_bar, dtype=np.float64)
    if j == 1 or f_prev is None:
        return quantize(s_bar, prec)
    weighted = vmul(j - 1, f_prev, prec)
    return vdiv(vadd(weighted, s_bar, prec), j, prec)


def correction_terms(
    f_prev: np.ndarray,
    f_new: np.ndarray,
    s_bar: np.ndarray,
    beta: float,
    prec: Precision = Precision.FP64,
    *,
    invariance: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Max corrections inva*(F_prev - F_new) and inva*(S_bar - F_new).

    ``inva`` = beta/(1-beta) unless a precomputed ``invariance`` is supplied;
    it is rounded to ``prec`` once.
    """
    if invariance is None:
        if beta == 1.0:
            raise SingularShiftError("correction terms need beta != 1")
        invariance = beta / (1.0 - beta)
    inva = quantize(invariance, prec)
    dm_prev = vmul(inva, vsub(f_prev, f_new, prec), prec)
    dm_cur = vmul(inva, vsub(s_bar, f_new, prec), prec)
    return dm_prev, dm_cur


@dataclass
class OnlineState:
    """Per query block running state; every vector is a column (..., s1, 1)."""

    m: np.ndarray
    l: np.ndarray
    f_bar: np.ndarray | None
    o_acc: np.ndarray
    j: int = 0

    @classmethod
    def initial(cls, q_block: np.ndarray, m0_mode: M0Mode = M0Mode.NEG_INF) -> OnlineState:
        rows = q_block.shape[:-1] + (1,)
        return cls(m=m0_mode.initial(rows), l=np.zeros(rows), f_bar=None, o_acc=np.zeros(q_block.shape))


def pasa_block_update(
    state: OnlineState,
    s_shifted: np.ndarray,
    v_block: np.ndarray,
    policy: PrecisionPolicy,
    invariance: float,
) -> OnlineState:
    """Consume one block of shifted scores S' and its values V_j."""
    vp = policy.vector_prec
    j = state.j + 1

    m_loc = rowmax(s_shifted)
    p = exp_elementwise(s_shifted, m_loc, vp)
    l_loc = rowsum(p, vp)
    s_bar = rowmean(s_shifted, vp, accum=policy.gemm_accum)
    f_new = recover_global_mean(state.f_bar, s_bar, j, vp)

    if j == 1:
        # F_1 equals S_bar_1, so both corrections vanish
        dm_prev = dm_cur = np.zeros_like(m_loc)
    else:
        dm_prev, dm_cur = correction_terms(
            state.f_bar, f_new, s_bar, 0.0, vp, invariance=invariance
        )

    # the corrected maxima are rounded once and reused, so neither exponent can exceed 0
    prev_top = vadd(state.m, dm_prev, vp)
    cur_top = vadd(m_loc, dm_cur, vp)
    with np.errstate(invalid="ignore"):
        m_new = np.maximum(prev_top, cur_top)
        delta_prev = vexp(vsub(prev_top, m_new, vp), vp)
        delta_cur = vexp(vsub(cur_top, m_new, vp), vp)

    l_new = vadd(vmul(delta_prev, state.l, vp), vmul(delta_cur, l_loc, vp), vp)
    pv = gemm(p, v_block, policy)
    o_new = vadd(vmul(delta_cur, pv, vp), vmul(delta_prev, state.o_acc, vp), vp)
    return replace(state, m=m_new, l=l_new, f_bar=f_new, o_acc=o_new, j=j)


# ── Diagnostics ─────────────────────────────────────────────────────────


def _finite_range(x: np.ndarray) -> tuple[float, float]:
    finite = x[np.isfinite(x)]
    if finite.size == 0:
        return (math.nan, math.nan)
    return (float(finite.min()), float(finite.max()))


@dataclass
class RunDiagnostics:
    """Score ranges seen by one run. Block arrays are indexed [i, j]."""

    shifted_block_min: np.ndarray
    shifted_block_max: np.ndarray
    nonfinite_scores: int = 0
    unshifted_block_min: np.ndarray | None = None
    unshifted_block_max: np.ndarray | None = None
    degraded_to_flash: bool = False

    @classmethod
    def empty(cls, n_q: int, n_kv: int, diagnose: bool) -> RunDiagnostics:
        nan = lambda: np.full((n_q, n_kv), np.nan)  # noqa: E731
        return cls(
            shifted_block_min=nan(),
            shifted_block_max=nan(),
            unshifted_block_min=nan() if diagnose else None,
            unshifted_block_max=nan() if diagnose else None,
        )

    @property
    def shifted_range(self) -> tuple[float, float]:
        return _range_of(self.shifted_block_min, self.shifted_block_max)

    @property
    def unshifted_range(self) -> tuple[float, float] | None:
        if self.unshifted_block_min is None:
            return None
        return _range_of(self.unshifted_block_min, self.unshifted_block_max)


def _range_of(lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
    if np.all(np.isnan(lo)):
        return (math.nan, math.nan)
    return (float(np.nanmin(lo)), float(np.nanmax(hi)))


# ── Driver ──────────────────────────────────────────────────────────────


def pasa_attention(
    problem: AttentionProblem,
    params: PasaParams,
    policy: PrecisionPolicy,
    *,
    m0_mode: M0Mode = M0Mode.NEG_INF,
    diagnose: bool = False,
) -> tuple[np.ndarray, RunDiagnostics]:
    """Run PASA on ``problem``; returns the output and the score diagnostics.

    ``diagnose`` adds the FP64 range of the unshifted scores QK^T/alpha,
    computed on the side so the policy pipeline is untouched.
    """
    if params.s2 != problem.s2:
        raise ContractViolation(f"shifting matrix built for s2={params.s2}, problem uses {problem.s2}")
    if not math.isclose(params.alpha, problem.alpha):
        raise ContractViolation(f"alpha {params.alpha} does not match sqrt(d) = {problem.alpha}")

    diag = RunDiagnostics.empty(problem.n_q_blocks, problem.n_kv_blocks, diagnose)

    if params.beta == 0.0:
        logger.debug("beta == 0: running plain flash attention")
        out = flash_attention(problem, policy, m0_mode=m0_mode)
        diag.degraded_to_flash = True
        _score_ranges(problem, diag, policy=policy, diagnose=diagnose)
        return out, diag

    kp_blocks = [preprocess_keys(problem.kv_block(j)[0], params.M, policy) for j in range(problem.n_kv_blocks)]
    out = np.empty(problem.q.shape, dtype=np.float64)
    vp = policy.vector_prec

    for i in range(problem.n_q_blocks):
        q_i = problem.q_block(i)
        state = OnlineState.initial(q_i, m0_mode)
        for j, kp in enumerate(kp_blocks):
            s_shifted = gemm(q_i, kp, policy)
            _record_block(diag, i, j, s_shifted)
            if diagnose:
                _record_unshifted(diag, problem, i, j)
            state = pasa_block_update(state, s_shifted, problem.kv_block(j)[1], policy, params.invariance)
        out[..., i * problem.s1 : (i + 1) * problem.s1, :] = vdiv(state.o_acc, state.l, vp)

    if diag.nonfinite_scores:
        logger.debug("%d non-finite shifted scores", diag.nonfinite_scores)
    return out, diag


def _record_block(diag: RunDiagnostics, i: int, j: int, s: np.ndarray) -> None:
    lo, hi = _finite_range(s)
    diag.shifted_block_min[i, j] = lo
    diag.shifted_block_max[i, j] = hi
    diag.nonfinite_scores += int(np.count_nonzero(~np.isfinite(s)))


def _record_unshifted(diag: RunDiagnostics, problem: AttentionProblem, i: int, j: int) -> None:
    k_j, _ = problem.kv_block(j)
    s = np.matmul(problem.q_block(i), np.swapaxes(k_j, -1, -2)) / problem.alpha
    diag.unshifted_block_min[i, j] = s.min()
    diag.unshifted_block_max[i, j] = s.max()


def _score_ranges(
    problem: AttentionProblem,
    diag: RunDiagnostics,
    *,
    policy: PrecisionPolicy,
    diagnose: bool,
) -> None:
    """Scores of the unshifted pipeline, for runs that skipped the shift."""
    for i in range(problem.n_q_blocks):
        for j in range(problem.n_kv_blocks):
            k_j, _ = problem.kv_block(j)
            s = gemm(problem.q_block(i), k_j, policy, transpose_b=True)
            s = quantize(s / problem.alpha, policy.vector_prec)
            _record_block(diag, i, j, s)
            if diagnose:
                _record_unshifted(diag, problem, i, j)
