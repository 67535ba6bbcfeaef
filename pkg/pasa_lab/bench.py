"""
Benchmark generation, error metrics and sweeps.

Random inputs come from numpy's counter-based Philox generator keyed by the
spec seed, so a (spec, seed) pair always yields bit-identical Q, K, V.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from pasa_lab.attention_ref import AttentionProblem, M0Mode, flash_attention, golden_attention
from pasa_lab.config import PRESETS, canonical_preset
from pasa_lab.halfprec import F16_MAX, round_f16
from pasa_lab.pasa_core import PasaParams, pasa_attention, preprocess_keys
from pasa_lab.tensors import ContractViolation, PolicyName, Precision, get_policy

logger = logging.getLogger(__name__)

Shape = tuple[int, int, int, int]

POLICY_ORDER = {name: i for i, name in enumerate(PolicyName)}


class UndefinedMetricError(ArithmeticError):
    """The golden reference has zero norm, so a relative error is meaningless."""


# ── Distributions ───────────────────────────────────────────────────────


class DistributionSpec(BaseModel):
    """One benchmark distribution. Am is the half-width (uniform) or outlier sigma (hybrid)."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    kind: Literal["uniform", "hybrid"] = "uniform"
    x0: float = 0.0
    am: float = Field(default=0.5, ge=0.0, alias="Am")
    p: float = 0.001
    seed: int = 0
    shape: Shape = (1, 2, 256, 64)

    @field_validator("p")
    @classmethod
    def _probability(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {v}")
        return v

    @field_validator("shape")
    @classmethod
    def _positive(cls, v: Shape) -> Shape:
        if any(n < 1 for n in v):
            raise ValueError(f"shape entries must be >= 1, got {v}")
        return v

    @property
    def key(self) -> tuple:
        return (self.kind, self.x0, self.am, self.p, self.seed)

    def label(self) -> str:
        return f"{self.kind}(x0={self.x0:g}, Am={self.am:g})"


def sample_uniform(rng: np.random.Generator, x0: float, am: float, shape: Shape) -> np.ndarray:
    return rng.uniform(x0 - am, x0 + am, size=shape)


def sample_hybrid(
    rng: np.random.Generator,
    x0: float,
    am: float,
    p: float,
    shape: Shape,
) -> tuple[np.ndarray, np.ndarray]:
    """N(x0, 1) + N(0, Am^2) * Bernoulli(p); also returns the outlier mask."""
    base = rng.normal(x0, 1.0, size=shape)
    spikes = rng.normal(0.0, am, size=shape)
    mask = rng.random(size=shape) < p
    return base + spikes * mask, mask


def generate(spec: DistributionSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, K, V drawn in that order from one Philox stream and rounded to FP16."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    tensors = []
    for _ in range(3):
        if spec.kind == "uniform":
            x = sample_uniform(rng, spec.x0, spec.am, spec.shape)
        else:
            x, _ = sample_hybrid(rng, spec.x0, spec.am, spec.p, spec.shape)
        tensors.append(round_f16(x))
    q, k, v = tensors
    return q, k, v


def preset_specs(name: str, shape: Shape, seed: int = 0) -> list[DistributionSpec]:
    try:
        grid = PRESETS[canonical_preset(name)]
    except KeyError:
        raise ContractViolation(f"unknown preset {name!r}") from None
    return [DistributionSpec(kind=kind, x0=x0, am=am, seed=seed, shape=shape) for kind, x0, am in grid]


# ── Metrics ─────────────────────────────────────────────────────────────


def rmse(computed: np.ndarray, golden: np.ndarray) -> float:
    """||computed - golden|| / ||golden||; NAN when ``computed`` is not finite."""
    computed = np.asarray(computed, dtype=np.float64)
    golden = np.asarray(golden, dtype=np.float64)
    if computed.shape != golden.shape:
        raise ContractViolation(f"shape mismatch {computed.shape} vs {golden.shape}")
    g_norm = float(np.linalg.norm(golden.ravel()))
    if g_norm == 0.0:
        raise UndefinedMetricError("golden output has zero norm")
    if not np.all(np.isfinite(computed)):
        return math.nan
    return float(np.linalg.norm((computed - golden).ravel())) / g_norm


def nan_stats(o: np.ndarray) -> float:
    """Percentage of elements that are NAN or INF."""
    o = np.asarray(o)
    if o.size == 0:
        return 0.0
    return 100.0 * np.count_nonzero(~np.isfinite(o)) / o.size


# ── Range diagnostics ───────────────────────────────────────────────────


class RangeRow(BaseModel):
    """Per (batch, head) FP64 ranges before and after shifting."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    b: int
    h: int
    k_min: float
    k_max: float
    kp_min: float
    kp_max: float
    s_min: float
    s_max: float
    sp_min: float
    sp_max: float

    @property
    def before(self) -> tuple[float, float]:
        return (self.s_min, self.s_max)

    @property
    def after(self) -> tuple[float, float]:
        return (self.sp_min, self.sp_max)


def range_report(problem: AttentionProblem, params: PasaParams) -> list[RangeRow]:
    """Ranges of K, K^T M, S = QK^T/alpha and S' = Q K^T M, all in FP64."""
    golden = get_policy(PolicyName.GOLDEN_FP64)
    rows = []
    for b in range(problem.batch):
        for h in range(problem.heads):
            q = problem.q[b, h]
            k = problem.k[b, h]
            kp = np.concatenate(
                [
                    preprocess_keys(k[j * problem.s2 : (j + 1) * problem.s2], params.M, golden)
                    for j in range(problem.n_kv_blocks)
                ],
                axis=-1,
            )
            s = q @ k.T / problem.alpha
            sp = q @ kp
            rows.append(
                RangeRow(
                    b=b, h=h,
                    k_min=k.min(), k_max=k.max(),
                    kp_min=kp.min(), kp_max=kp.max(),
                    s_min=s.min(), s_max=s.max(),
                    sp_min=sp.min(), sp_max=sp.max(),
                )
            )
    return rows


@dataclass(frozen=True)
class OverflowPrecursor:
    max_abs_qk: float
    overflows: bool


def overflow_precursor(problem: AttentionProblem) -> OverflowPrecursor:
    """Largest |QK^T| before scaling, and whether it passes the FP16 limit."""
    peak = 0.0
    for b in range(problem.batch):
        for h in range(problem.heads):
            peak = max(peak, float(np.abs(problem.q[b, h] @ problem.k[b, h].T).max()))
    return OverflowPrecursor(max_abs_qk=peak, overflows=peak > F16_MAX)


# ── Sweep ───────────────────────────────────────────────────────────────


class RunReport(BaseModel):
    """One (distribution, policy) cell; field order is the CSV column order."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    policy: PolicyName
    kind: str
    x0: float
    Am: float
    p: float
    seed: int
    B: int
    N: int
    S: int
    d: int
    beta: float
    rmse: float
    nan_pct: float
    s_min_before: float
    s_max_before: float
    s_min_after: float
    s_max_after: float
    wall_s: float = 0.0

    @property
    def s_range_before(self) -> tuple[float, float]:
        return (self.s_min_before, self.s_max_before)

    @property
    def s_range_after(self) -> tuple[float, float]:
        return (self.s_min_after, self.s_max_after)

    @property
    def spec_key(self) -> tuple:
        return (self.kind, self.x0, self.Am, self.p, self.seed)


class CellFailure(BaseModel):
    policy: PolicyName
    kind: str
    x0: float
    Am: float
    error: str


class SweepResult(BaseModel):
    rows: list[RunReport] = Field(default_factory=list)
    failures: list[CellFailure] = Field(default_factory=list)


def _unshifted_range(problem: AttentionProblem) -> tuple[float, float]:
    lo, hi = math.inf, -math.inf
    for b in range(problem.batch):
        for h in range(problem.heads):
            s = problem.q[b, h] @ problem.k[b, h].T / problem.alpha
            lo, hi = min(lo, float(s.min())), max(hi, float(s.max()))
    return lo, hi


def run_policy(
    problem: AttentionProblem,
    policy_name: PolicyName,
    golden: np.ndarray,
    *,
    beta: float,
    m0_mode: M0Mode = M0Mode.NEG_INF,
    diagnose: bool = False,
    record_timing: bool = False,
) -> tuple[np.ndarray, dict]:
    """Run one policy against a shared golden output; returns (O, metric fields)."""
    policy = get_policy(policy_name)
    before = _unshifted_range(problem)
    t0 = time.perf_counter()
    if policy.is_pasa:
        params = PasaParams.create(beta, problem.head_dim, problem.s2, Precision.FP16)
        out, diag = pasa_attention(problem, params, policy, m0_mode=m0_mode, diagnose=diagnose)
        after = diag.shifted_range
        run_beta = beta
    else:
        out = flash_attention(problem, policy, m0_mode=m0_mode)
        after = before
        run_beta = 0.0
    wall = time.perf_counter() - t0 if record_timing else 0.0
    try:
        err = rmse(out, golden)
    except UndefinedMetricError:
        err = math.nan
    fields = dict(
        policy=policy_name,
        beta=run_beta,
        rmse=err,
        nan_pct=nan_stats(out),
        s_min_before=before[0],
        s_max_before=before[1],
        s_min_after=after[0],
        s_max_after=after[1],
        wall_s=wall,
    )
    return out, fields


def _run_cell(
    spec: DistributionSpec,
    policies: list[PolicyName],
    *,
    beta: float,
    s1: int,
    s2: int,
    m0_mode: M0Mode,
    record_timing: bool,
) -> SweepResult:
    result = SweepResult()

    def fail(name: PolicyName, e: Exception) -> None:
        result.failures.append(
            CellFailure(policy=name, kind=spec.kind, x0=spec.x0, Am=spec.am, error=f"{type(e).__name__}: {e}")
        )

    try:
        q, k, v = generate(spec)
        problem = AttentionProblem(q, k, v, s1, s2)
        golden = golden_attention(problem)
    except Exception as e:
        logger.exception("Cell %s could not be built", spec.label())
        for name in policies:
            fail(name, e)
        return result

    b, n, s, d = spec.shape
    for name in policies:
        try:
            _, fields = run_policy(
                problem, name, golden, beta=beta, m0_mode=m0_mode, record_timing=record_timing
            )
        except Exception as e:
            logger.exception("Cell %s / %s failed", spec.label(), name.value)
            fail(name, e)
            continue
        row = RunReport(kind=spec.kind, x0=spec.x0, Am=spec.am, p=spec.p, seed=spec.seed, B=b, N=n, S=s, d=d, **fields)
        logger.info(
            "%-16s %-28s rmse=%.3e nan=%.2f%%",
            name.value, spec.label(), row.rmse, row.nan_pct,
        )
        result.rows.append(row)
    return result


def sweep(
    policies: Iterable[PolicyName],
    specs: Iterable[DistributionSpec],
    *,
    beta: float,
    s1: int = 128,
    s2: int = 128,
    m0_mode: M0Mode = M0Mode.NEG_INF,
    threads: int = 1,
    record_timing: bool = False,
) -> SweepResult:
    """Every policy on every spec. Each spec is generated once and shared by its policies.

    Cells run on a thread pool; the result is sorted by grid key so it does
    not depend on completion order. The emulated GEMMs loop over the inner
    index in Python and hold the GIL between their small numpy calls, so more
    threads give little speedup over one.
    """
    policies = [PolicyName(p) for p in policies]
    specs = list(specs)
    merged = SweepResult()
    if not specs or not policies:
        return merged

    def cell(spec: DistributionSpec) -> SweepResult:
        return _run_cell(
            spec, policies, beta=beta, s1=s1, s2=s2, m0_mode=m0_mode, record_timing=record_timing
        )

    workers = max(1, min(threads, len(specs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(cell, specs):
            merged.rows.extend(part.rows)
            merged.failures.extend(part.failures)

    merged.rows.sort(key=lambda r: (r.spec_key, POLICY_ORDER[r.policy]))
    merged.failures.sort(key=lambda f: (f.kind, f.x0, f.Am, POLICY_ORDER[f.policy]))
    return merged


# ── Claims over a sweep ─────────────────────────────────────────────────


def check_orderings(rows: Iterable[RunReport]) -> list[str]:
    """Violations of the expected accuracy ordering and overflow outcomes.

    Expected: FA_FP32 <= PASA_FP16 <= FA_PARTIAL_FP16 in RMSE for cells with
    x0 != 0 where all three are finite; PASA_FP16 and FA_FP32 never overflow.
    """
    cells: dict[tuple, dict[PolicyName, RunReport]] = {}
    for row in rows:
        cells.setdefault(row.spec_key, {})[row.policy] = row

    violations = []
    for key, by_policy in sorted(cells.items()):
        label = f"{key[0]}(x0={key[1]:g}, Am={key[2]:g})"
        for safe in (PolicyName.PASA_FP16, PolicyName.FA_FP32):
            r = by_policy.get(safe)
            if r is not None and r.nan_pct > 0:
                violations.append(f"{label}: {safe.value} produced {r.nan_pct:.2f}% NAN")

        fp32 = by_policy.get(PolicyName.FA_FP32)
        pasa = by_policy.get(PolicyName.PASA_FP16)
        partial = by_policy.get(PolicyName.FA_PARTIAL_FP16)
        if key[1] == 0 or None in (fp32, pasa, partial):
            continue
        if not all(math.isfinite(r.rmse) for r in (fp32, pasa, partial)):
            continue
        if pasa.rmse > partial.rmse:
            violations.append(
                f"{label}: PASA_FP16 rmse {pasa.rmse:.3e} > FA_PARTIAL_FP16 {partial.rmse:.3e}"
            )
        if fp32.rmse > pasa.rmse:
            violations.append(f"{label}: FA_FP32 rmse {fp32.rmse:.3e} > PASA_FP16 {pasa.rmse:.3e}")
    return violations
