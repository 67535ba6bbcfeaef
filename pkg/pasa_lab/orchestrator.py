"""Orchestrator: dispatch one resolved ExperimentConfig and write its reports."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Optional

from pydantic import ValidationError

from pasa_lab.attention_ref import AttentionProblem, golden_attention
from pasa_lab.bench import (
    DistributionSpec,
    RunReport,
    SweepResult,
    check_orderings,
    generate,
    overflow_precursor,
    preset_specs,
    range_report,
    run_policy,
    sweep,
)
from pasa_lab.beta_solver import (
    DivergenceError,
    conformance_table,
    invariance_parameter,
    optimal_beta,
)
from pasa_lab.config import ConfigError, ExperimentConfig, Settings, get_settings
from pasa_lab.pasa_core import PasaParams
from pasa_lab.reports import (
    format_conformance,
    format_precision_table,
    format_summary,
    load_report_json,
    write_range_csv,
    write_report_json,
    write_sweep_csv,
)
from pasa_lab.tensor_io import TensorFileError, load_tensor_file, save_tensor_file
from pasa_lab.tensors import ContractViolation, Precision

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_FINITE = 2

# Relative invariance error below the two-decimal percent display
_OPTIMAL_BETA_TOL = 1e-4


def resolve_beta(config: ExperimentConfig) -> float:
    """The beta to run with, solving it first when config.beta == 'solve'."""
    if config.beta == "solve":
        beta = optimal_beta(config.beta0, config.solve_n, config.tol)
        logger.info("Solved beta = %.6f from beta0 = %.6f (n=%d)", beta, config.beta0, config.solve_n)
        return beta
    beta = float(config.beta)
    if beta > 0:
        report = invariance_parameter(beta, config.s2)
        if report.rel_err >= _OPTIMAL_BETA_TOL:
            logger.warning(
                "beta=%.6f is not a fixed point for s2=%d (invariance error %.2e); "
                "it was probably solved for another block size",
                beta, config.s2, report.rel_err,
            )
    return beta


def _single_spec(config: ExperimentConfig) -> DistributionSpec:
    return DistributionSpec(
        kind=config.kind,
        x0=config.x0,
        am=config.am,
        p=config.p,
        seed=config.seed,
        shape=config.resolved_shape,
    )


def _load_problem(config: ExperimentConfig) -> tuple[AttentionProblem, DistributionSpec | None]:
    if config.uses_files:
        file_dtype = "bf16" if config.dtype == "bf16" else None
        q = load_tensor_file(config.q_path, file_dtype)
        k = load_tensor_file(config.k_path, file_dtype)
        v = load_tensor_file(config.v_path, file_dtype)
        problem = AttentionProblem.from_tensors(q, k, v, config.s1, config.s2, truncate=config.truncate)
        return problem, None
    spec = _single_spec(config)
    q, k, v = generate(spec)
    problem = AttentionProblem.from_tensors(q, k, v, config.s1, config.s2, truncate=config.truncate)
    return problem, spec


def _finite_gate(config: ExperimentConfig, rows: list[RunReport]) -> int:
    bad = [r for r in rows if r.policy in config.must_be_finite and r.nan_pct > 0]
    for r in bad:
        logger.warning(
            "%s produced %.2f%% NAN/INF on %s(x0=%g, Am=%g)", r.policy.value, r.nan_pct, r.kind, r.x0, r.Am
        )
    return EXIT_NOT_FINITE if bad else EXIT_OK


# ── Commands ────────────────────────────────────────────────────────────


def cmd_solve_beta(config: ExperimentConfig, settings: Settings, out_dir: Path) -> int:
    if config.table:
        print(format_conformance(conformance_table(n=config.solve_n, tol=config.tol)))
        print()
        print(format_precision_table())
        return EXIT_OK
    beta = optimal_beta(config.beta0, config.solve_n, config.tol)
    report = invariance_parameter(beta, config.solve_n)
    logger.info("beta* = %.6f (n=%d)", beta, config.solve_n)
    print(json.dumps({"beta_star": round(beta, 6), **report.model_dump()}, indent=2))
    return EXIT_OK


def cmd_gen(config: ExperimentConfig, settings: Settings, out_dir: Path) -> int:
    spec = _single_spec(config)
    for name, tensor in zip("qkv", generate(spec)):
        save_tensor_file(out_dir / f"{name}.npy", tensor, config.dtype)
    logger.info("Generated %s with shape %s (seed %d)", spec.label(), spec.shape, spec.seed)
    return EXIT_OK


def cmd_run(config: ExperimentConfig, settings: Settings, out_dir: Path) -> int:
    problem, spec = _load_problem(config)
    beta = resolve_beta(config)
    golden = golden_attention(problem)

    result = SweepResult()
    for name in config.policies:
        _, fields = run_policy(
            problem,
            name,
            golden,
            beta=beta,
            m0_mode=config.m0_mode,
            diagnose=config.diagnose,
            record_timing=config.record_timing,
        )
        result.rows.append(
            RunReport(
                kind=spec.kind if spec else "file",
                x0=spec.x0 if spec else 0.0,
                Am=spec.am if spec else 0.0,
                p=spec.p if spec else 0.0,
                seed=spec.seed if spec else 0,
                B=problem.batch,
                N=problem.heads,
                S=problem.seq_kv,
                d=problem.head_dim,
                **fields,
            )
        )
    print(format_summary(result.rows))

    extra = {"beta": beta}
    if config.diagnose:
        params = PasaParams.create(beta, problem.head_dim, problem.s2, Precision.FP16)
        ranges = range_report(problem, params)
        write_range_csv(ranges, out_dir / "run_ranges.csv")
        precursor = overflow_precursor(problem)
        extra["ranges"] = [r.model_dump(mode="json") for r in ranges]
        extra["overflow_precursor"] = {
            "max_abs_qk": precursor.max_abs_qk,
            "overflows": precursor.overflows,
        }
        logger.info("max |QK^T| = %.6g (FP16 overflow: %s)", precursor.max_abs_qk, precursor.overflows)

    write_sweep_csv(result.rows, out_dir / "run.csv")
    write_report_json(config, result, out_dir / "run.json", extra=extra)
    return _finite_gate(config, result.rows)


def cmd_sweep(config: ExperimentConfig, settings: Settings, out_dir: Path) -> int:
    if config.uses_files:
        raise ConfigError("sweep generates its inputs; use 'run' for tensor files")
    beta = resolve_beta(config)
    if config.preset:
        specs = preset_specs(config.preset, config.resolved_shape, config.seed)
    else:
        specs = [_single_spec(config)]
    logger.info("Sweeping %d distributions x %d policies", len(specs), len(config.policies))

    result = sweep(
        config.policies,
        specs,
        beta=beta,
        s1=config.s1,
        s2=config.s2,
        m0_mode=config.m0_mode,
        threads=settings.threads,
        record_timing=config.record_timing,
    )
    violations = check_orderings(result.rows)
    for v in violations:
        logger.warning("Ordering: %s", v)

    write_sweep_csv(result.rows, out_dir / "sweep.csv")
    write_report_json(config, result, out_dir / "sweep.json", extra={"beta": beta, "violations": violations})
    if result.failures:
        logger.warning("%d sweep cells failed", len(result.failures))
    return _finite_gate(config, result.rows)


def cmd_report(config: ExperimentConfig, settings: Settings, out_dir: Path) -> int:
    path = config.report_path or out_dir / "sweep.json"
    _, result = load_report_json(path)
    print(format_summary(result.rows))
    violations = check_orderings(result.rows)
    print()
    if violations:
        print("Ordering violations:")
        for v in violations:
            print(f"  {v}")
    else:
        print("All orderings hold.")
    for f in result.failures:
        print(f"FAILED {f.policy.value} {f.kind}(x0={f.x0:g}, Am={f.Am:g}): {f.error}")
    return EXIT_OK


COMMANDS: dict[str, Callable[[ExperimentConfig, Settings, Path], int]] = {
    "solve-beta": cmd_solve_beta,
    "gen": cmd_gen,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def run(config: ExperimentConfig, settings: Optional[Settings] = None) -> int:
    """Execute ``config.command``; returns the process exit code.

    0 on success, 1 on configuration or input errors, 2 when a policy listed
    in ``must_be_finite`` produced NAN/INF.
    """
    settings = settings or get_settings()
    out_dir = Path(config.output or settings.output_dir)
    try:
        return COMMANDS[config.command](config, settings, out_dir)
    except (ConfigError, ValidationError, TensorFileError, ContractViolation, DivergenceError) as e:
        logger.error("%s", e)
        return EXIT_ERROR
