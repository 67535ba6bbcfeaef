"""Report emission: CSV rows, the JSON envelope, and plain-text summaries."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional

from pydantic import BaseModel

from pasa_lab.beta_solver import ConformanceRow, format_percent, format_sig4
from pasa_lab.bench import RangeRow, RunReport, SweepResult
from pasa_lab.config import ConfigError, ExperimentConfig
from pasa_lab.halfprec import FORMAT_TABLE

logger = logging.getLogger(__name__)

CSV_FIELDS = list(RunReport.model_fields)
RANGE_FIELDS = list(RangeRow.model_fields)


def _write_csv(models: Iterable[BaseModel], fields: list[str], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for m in models:
            writer.writerow(m.model_dump(mode="json"))
    logger.info("Wrote %s", path)
    return path


def write_sweep_csv(rows: Iterable[RunReport], path: Path) -> Path:
    return _write_csv(rows, CSV_FIELDS, path)


def write_range_csv(rows: Iterable[RangeRow], path: Path) -> Path:
    """Per (batch, head) ranges; the data behind a cloud-map style plot."""
    return _write_csv(rows, RANGE_FIELDS, path)


def write_report_json(
    config: ExperimentConfig,
    result: SweepResult,
    path: Path,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """``{config, rows, failures}`` plus any ``extra`` sections."""
    envelope: dict[str, Any] = {"config": config.model_dump(mode="json")}
    envelope.update(result.model_dump(mode="json"))
    if extra:
        envelope.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(envelope, f, indent=2)
    logger.info("Wrote %s", path)
    return path


def load_report_json(path: Path) -> tuple[dict[str, Any], SweepResult]:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read report {path}: {e}") from e
    if not isinstance(data, dict) or "rows" not in data:
        raise ConfigError(f"{path} is not a sweep report")
    result = SweepResult.model_validate(
        {"rows": data.get("rows", []), "failures": data.get("failures", [])}
    )
    return data.get("config", {}), result


def format_summary(rows: Iterable[RunReport]) -> str:
    header = f"{'policy':<16} {'dist':<8} {'x0':>6} {'Am':>7} {'rmse':>11} {'nan%':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.policy.value:<16} {r.kind:<8} {r.x0:>6g} {r.Am:>7g} {r.rmse:>11.4e} {r.nan_pct:>7.2f}%"
        )
    return "\n".join(lines)


def format_conformance(rows: Iterable[ConformanceRow]) -> str:
    """Both invariance tables: seeds as given, then the solved betas."""
    rows = list(rows)
    lines = [
        f"{'initial beta':>14} {'Inva':>8} {'Inva_1':>8} {'rel err':>8}",
    ]
    for r in rows:
        i = r.initial
        lines.append(
            f"{r.beta0:>14.6f} {format_sig4(i.inva_ideal):>8} {format_sig4(i.inva_actual):>8} "
            f"{format_percent(i.rel_err):>8}"
        )
    lines.append("")
    lines.append(f"{'optimized beta':>14} {'Inva':>8} {'Inva_1':>8} {'rel err':>8}")
    for r in rows:
        o = r.optimized
        lines.append(
            f"{r.beta_star:>14.6f} {format_sig4(o.inva_ideal):>8} {format_sig4(o.inva_actual):>8} "
            f"{format_percent(o.rel_err):>8}"
        )
    return "\n".join(lines)


def format_precision_table(formats: Optional[dict[str, tuple[float, float]]] = None) -> str:
    """Relative precision and overflow boundary per data format."""
    formats = FORMAT_TABLE if formats is None else formats
    lines = [f"{'format':<8} {'precision':>10} {'overflow':>10}"]
    for name, (precision, limit) in formats.items():
        lines.append(f"{name:<8} {precision:>10g} {limit:>10g}")
    return "\n".join(lines)
