"""
Configuration for the attention numerics lab.

Two layers:
  - ``Settings``: process environment (``PASA_*`` variables or a .env file).
  - ``ExperimentConfig``: one experiment, from a JSON file and/or CLI flags.
    Precedence is flag > file > default.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from pasa_lab.attention_ref import M0Mode
from pasa_lab.tensors import PolicyName

# β adopted for validation runs (solved from 1 - 2^-6 at n = 128)
DEFAULT_BETA = 0.984497
DEFAULT_BLOCK = 128

# (B, N, S, d)
FULL_SHAPE = (1, 16, 1280, 128)
SMALL_SHAPE = (1, 2, 256, 64)

DEFAULT_POLICIES = [
    PolicyName.FA_FP32,
    PolicyName.FA_PARTIAL_FP16,
    PolicyName.PASA_FP16,
]

# Preset grids: (kind, x0, Am). The hybrid outlier probability is always 0.001.
PRESETS: dict[str, list[tuple[str, float, float]]] = {
    "uniform-grid": (
        [("uniform", x0, 0.5) for x0 in (0.0, 10.0, 20.0, 30.0)]
        + [("uniform", 20.0, am) for am in (1.0, 5.0, 10.0, 15.0, 20.0)]
    ),
    "hybrid-grid": (
        [("hybrid", x0, 10.0) for x0 in (0.0, 10.0, 20.0, 30.0)]
        + [("hybrid", 20.0, am) for am in (20.0, 50.0, 100.0)]
    ),
    "overflow-grid": [
        ("uniform", 30.0, 0.5),
        ("uniform", 20.0, 15.0),
        ("uniform", 20.0, 20.0),
        ("hybrid", 30.0, 10.0),
        ("hybrid", 20.0, 50.0),
        ("hybrid", 20.0, 100.0),
    ],
}

# Alternate grid names accepted wherever a preset is named
PRESET_ALIASES: dict[str, str] = {
    "paper-uniform": "uniform-grid",
    "paper-hybrid": "hybrid-grid",
}


def canonical_preset(name: str) -> str:
    """The PRESETS key for ``name`` or one of its aliases; KeyError if unknown."""
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise KeyError(name)
    return name


Command = Literal["solve-beta", "gen", "run", "sweep", "report"]


class ConfigError(ValueError):
    """Experiment configuration is inconsistent."""


class Settings(BaseSettings):
    """Process settings – populated from env vars / .env file."""

    threads: int = Field(
        default_factory=lambda: os.cpu_count() or 1,
        ge=1,
        description="Worker cap for parallel sweep cells",
    )
    log_level: str = Field(default="INFO", description="Root logging level")
    output_dir: Path = Field(
        default=Path("pasa_output"),
        description="Default directory for reports and generated tensors",
    )

    model_config = SettingsConfigDict(
        env_prefix="PASA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


def get_settings() -> Settings:
    """Return a fresh Settings instance."""
    return Settings()


class ExperimentConfig(BaseModel):
    """Everything one CLI invocation needs, embedded verbatim in its reports."""

    command: Command = "run"

    # ── Problem ────────────────────────────────────────────────────────
    policies: list[PolicyName] = Field(default_factory=lambda: list(DEFAULT_POLICIES))
    preset: Optional[str] = None
    small: bool = False
    shape: Optional[tuple[int, int, int, int]] = None
    kind: Literal["uniform", "hybrid"] = "uniform"
    x0: float = 0.0
    am: float = 0.5
    p: float = 0.001
    seed: int = 0

    # ── Tensor files ───────────────────────────────────────────────────
    q_path: Optional[Path] = None
    k_path: Optional[Path] = None
    v_path: Optional[Path] = None
    dtype: Literal["f16", "f32", "bf16"] = "f16"
    truncate: bool = False

    # ── PASA ───────────────────────────────────────────────────────────
    beta: Union[float, Literal["solve"]] = DEFAULT_BETA
    beta0: float = 1 - 2**-6
    beta_n: Optional[int] = None
    tol: float = Field(default=1.0e-8, gt=0)
    table: bool = False
    s1: int = Field(default=DEFAULT_BLOCK, ge=1)
    s2: int = Field(default=DEFAULT_BLOCK, ge=1)
    m0_mode: M0Mode = M0Mode.NEG_INF
    diagnose: bool = False

    # ── Output ─────────────────────────────────────────────────────────
    output: Optional[Path] = None
    report_path: Optional[Path] = None
    must_be_finite: list[PolicyName] = Field(default_factory=list)
    record_timing: bool = False

    @field_validator("beta")
    @classmethod
    def _beta_range(cls, v: Union[float, str]) -> Union[float, str]:
        if isinstance(v, str):
            return v
        if not 0.0 <= v < 1.0:
            raise ValueError(f"beta must lie in [0, 1) or be 'solve', got {v}")
        return v

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v: Optional[str]) -> Optional[str]:
        if v is None:
            return v
        try:
            return canonical_preset(v)
        except KeyError:
            raise ValueError(f"unknown preset {v!r}; choose from {sorted(PRESETS)}") from None

    @field_validator("p")
    @classmethod
    def _probability(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> ExperimentConfig:
        if self.beta == "solve" and self.beta_n is not None and self.beta_n != self.s2:
            raise ValueError(f"beta='solve' needs beta_n == s2, got {self.beta_n} vs {self.s2}")
        given = [path is not None for path in (self.q_path, self.k_path, self.v_path)]
        if any(given) and not all(given):
            raise ValueError("tensor-file inputs need all of q_path, k_path and v_path")
        if not self.policies and self.command in ("run", "sweep"):
            raise ValueError("at least one policy is required")
        return self

    @property
    def uses_files(self) -> bool:
        return self.q_path is not None

    @property
    def resolved_shape(self) -> tuple[int, int, int, int]:
        if self.shape is not None:
            return self.shape
        return SMALL_SHAPE if self.small else FULL_SHAPE

    @property
    def solve_n(self) -> int:
        return self.beta_n or self.s2


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a JSON experiment file into a plain dict."""
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def resolve_config(
    flags: dict[str, Any],
    config_path: Optional[Path] = None,
) -> ExperimentConfig:
    """Merge defaults, file values and explicitly given flags (flag wins)."""
    values: dict[str, Any] = {}
    if config_path is not None:
        values.update(load_config_file(config_path))
    values.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig.model_validate(values)
