"""
Reference attention kernels.

``golden_attention`` is the unblocked FP64 computation every run is scored
against. ``flash_attention`` is the blocked online-softmax pipeline
(S = QK^T, S = S/alpha, running max, exp, running sum, output rescale, final
divide) with every stage rounded as the precision policy dictates.

Query blocks are independent, so each kernel call processes one query block
for all (batch, head) pairs at once; the key/value loop stays sequential.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from pasa_lab.tensors import (
    ContractViolation,
    PrecisionPolicy,
    exp_elementwise,
    gemm,
    rowmax,
    rowsum,
    scale,
    vadd,
    vdiv,
    vexp,
    vmul,
    vsub,
)

logger = logging.getLogger(__name__)


class M0Mode(str, enum.Enum):
    """Initial running maximum: -INF (standard) or 0 (literal algorithm text)."""

    NEG_INF = "neg_inf"
    ZERO = "zero"

    def initial(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.full(shape, -np.inf if self is M0Mode.NEG_INF else 0.0)


@dataclass(frozen=True)
class AttentionProblem:
    """Q (B,N,S1,d), K and V (B,N,S2,d) plus the block sizes (s1, s2)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    s1: int
    s2: int

    def __post_init__(self) -> None:
        for name in ("q", "k", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 4:
                raise ContractViolation(f"{name} must be (B, N, S, d), got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"{name} holds non-finite values")
            object.__setattr__(self, name, arr)
        b, n, _, d = self.q.shape
        if self.k.shape != self.v.shape:
            raise ContractViolation(f"K {self.k.shape} and V {self.v.shape} differ")
        if self.k.shape[:2] != (b, n) or self.k.shape[3] != d:
            raise ContractViolation(f"Q {self.q.shape} and K {self.k.shape} disagree")
        if d < 1:
            raise ContractViolation("head dimension must be >= 1")
        if self.s1 < 1 or self.s2 < 1:
            raise ContractViolation("block sizes must be >= 1")
        if self.seq_q % self.s1 or self.seq_kv % self.s2:
            raise ContractViolation(
                f"sequence lengths ({self.seq_q}, {self.seq_kv}) are not multiples "
                f"of the block sizes ({self.s1}, {self.s2}); use truncation"
            )

    @classmethod
    def from_tensors(
        cls,
        q: np.ndarray,
        k: np.ndarray,
        v: np.ndarray,
        s1: int,
        s2: int,
        truncate: bool = False,
    ) -> AttentionProblem:
        """Build a problem, optionally trimming S1/S2 down to block multiples."""
        if truncate:
            keep_q = (q.shape[2] // s1) * s1
            keep_kv = (k.shape[2] // s2) * s2
            if keep_q == 0 or keep_kv == 0:
                raise ContractViolation("truncation would leave an empty sequence")
            if keep_q != q.shape[2] or keep_kv != k.shape[2]:
                logger.info(
                    "Truncating sequences %d->%d (Q) and %d->%d (KV)",
                    q.shape[2], keep_q, k.shape[2], keep_kv,
                )
            q, k, v = q[:, :, :keep_q], k[:, :, :keep_kv], v[:, :, :keep_kv]
        return cls(q, k, v, s1, s2)

    @property
    def batch(self) -> int:
        return self.q.shape[0]

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def seq_q(self) -> int:
        return self.q.shape[2]

    @property
    def seq_kv(self) -> int:
        return self.k.shape[2]

    @property
    def head_dim(self) -> int:
        return self.q.shape[3]

    @property
    def alpha(self) -> float:
        return math.sqrt(self.head_dim)

    @property
    def n_q_blocks(self) -> int:
        return self.seq_q // self.s1

    @property
    def n_kv_blocks(self) -> int:
        return self.seq_kv // self.s2

    def q_block(self, i: int) -> np.ndarray:
        return self.q[..., i * self.s1 : (i + 1) * self.s1, :]

    def kv_block(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        sl = slice(j * self.s2, (j + 1) * self.s2)
        return self.k[..., sl, :], self.v[..., sl, :]


@dataclass
class FlashState:
    """Final running max and denominator per query row, shape (B, N, S1, 1)."""

    m: np.ndarray
    l: np.ndarray


def golden_attention(problem: AttentionProblem) -> np.ndarray:
    """Unblocked FP64 attention: softmax(QK^T / sqrt(d)) V with max subtraction."""
    s = np.matmul(problem.q, np.swapaxes(problem.k, -1, -2)) / problem.alpha
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.matmul(p, problem.v)


def flash_attention(
    problem: AttentionProblem,
    policy: PrecisionPolicy,
    *,
    m0_mode: M0Mode = M0Mode.NEG_INF,
    return_state: bool = False,
) -> np.ndarray | tuple[np.ndarray, FlashState]:
    """Blocked online-softmax attention under ``policy``.

    INF and NAN produced by any stage propagate into the output unmasked.
    """
    vp = policy.vector_prec
    out = np.empty(problem.q.shape, dtype=np.float64)
    m_all = np.empty(problem.q.shape[:-1] + (1,), dtype=np.float64)
    l_all = np.empty_like(m_all)

    for i in range(problem.n_q_blocks):
        q_i = problem.q_block(i)
        rows = q_i.shape[:-1] + (1,)
        m = m0_mode.initial(rows)
        l = np.zeros(rows)
        o = np.zeros(q_i.shape)

        for j in range(problem.n_kv_blocks):
            k_j, v_j = problem.kv_block(j)
            s = gemm(q_i, k_j, policy, transpose_b=True)
            s = scale(s, problem.alpha, vp)
            with np.errstate(invalid="ignore"):
                m_new = np.maximum(m, rowmax(s))
            p = exp_elementwise(s, m_new, vp)
            rescale = vexp(vsub(m, m_new, vp), vp)
            l = vadd(vmul(rescale, l, vp), rowsum(p, vp), vp)
            pv = gemm(p, v_j, policy)
            o = vadd(vmul(rescale, o, vp), pv, vp)
            m = m_new

        sl = slice(i * problem.s1, (i + 1) * problem.s1)
        out[..., sl, :] = vdiv(o, l, vp)
        m_all[..., sl, :] = m
        l_all[..., sl, :] = l

    if return_state:
        return out, FlashState(m=m_all, l=l_all)
    return out
