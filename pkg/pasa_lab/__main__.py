"""
CLI entry point for the attention numerics lab.

Commands:
    solve-beta – Solve the optimal shifting beta (or print the conformance table).
    gen        – Write q.npy / k.npy / v.npy from a benchmark distribution.
    run        – Run policies on one problem (generated or from NPY files).
    sweep      – Run policies over a distribution grid (presets available).
    report     – Summarise a sweep JSON report and check the accuracy orderings.

Usage:
    pasa-attn solve-beta --beta0 0.984375 --n 128
    pasa-attn sweep --preset uniform-grid --small
    pasa-attn run --q q.npy --k k.npy --v v.npy --policy PASA_FP16 --diagnose
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from pydantic import ValidationError

from pasa_lab.attention_ref import M0Mode
from pasa_lab.config import PRESET_ALIASES, PRESETS, ConfigError, get_settings, resolve_config
from pasa_lab.orchestrator import EXIT_ERROR, run
from pasa_lab.tensors import PolicyName

logger = logging.getLogger("pasa_lab")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def _beta_arg(text: str) -> float | str:
    if text == "solve":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"beta must be a number or 'solve', got {text!r}") from None


# ── Shared option groups ────────────────────────────────────────────────


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment file (flags override its values)")
    p.add_argument("--out", "-o", dest="output", type=Path, help="Output directory (default: $PASA_OUTPUT_DIR)")


def _add_distribution(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("distribution")
    g.add_argument("--kind", choices=["uniform", "hybrid"])
    g.add_argument("--x0", type=float, help="Mean value")
    g.add_argument("--am", type=float, help="Amplitude (uniform half-width / outlier sigma)")
    g.add_argument("--p", type=float, help="Outlier probability for hybrid (default 0.001)")
    g.add_argument("--seed", type=int)
    g.add_argument("--small", action="store_true", default=None, help="Use the reduced (1,2,256,64) shape")
    g.add_argument("--shape", type=int, nargs=4, metavar=("B", "N", "S", "D"))


def _add_pasa(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attention")
    g.add_argument(
        "--policy",
        dest="policies",
        action="append",
        choices=[n.value for n in PolicyName],
        help="Precision policy (repeatable; default FA_FP32, FA_PARTIAL_FP16, PASA_FP16)",
    )
    g.add_argument("--beta", type=_beta_arg, help="Shifting beta in [0,1) or 'solve'")
    g.add_argument("--beta0", type=float, help="Initial beta when solving")
    g.add_argument("--s1", type=int, help="Query block size (default 128)")
    g.add_argument("--s2", type=int, help="Key/value block size (default 128)")
    g.add_argument("--m0", dest="m0_mode", choices=[m.value for m in M0Mode], help="Initial running max")
    g.add_argument(
        "--must-be-finite",
        dest="must_be_finite",
        action="append",
        choices=[n.value for n in PolicyName],
        help="Exit 2 if this policy produces NAN/INF (repeatable)",
    )
    g.add_argument("--record-timing", action="store_true", default=None, help="Record wall time per cell")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pasa-attn",
        description=(
            "Blocked attention under emulated FP16/FP32 precision policies, "
            "pseudo-average shifting, and the optimal-beta solver."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Presets:\n"
        + "\n".join(f"  {name}" for name in PRESETS)
        + "".join(f"\n  {alias} (= {name})" for alias, name in PRESET_ALIASES.items()),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-beta", help="Solve beta/(1-beta) = f(beta) by fixed-point iteration")
    _add_common(p)
    p.add_argument("--beta0", type=float, help="Initial beta (default 1 - 2^-6)")
    p.add_argument("--n", dest="beta_n", type=int, help="Shifting matrix size (default: s2 = 128)")
    p.add_argument("--tol", type=float, help="Relative-change tolerance (default 1e-8)")
    p.add_argument("--table", action="store_true", default=None, help="Print the invariance conformance table")

    p = sub.add_parser("gen", help="Generate Q, K, V tensor files")
    _add_common(p)
    _add_distribution(p)
    p.add_argument("--dtype", choices=["f16", "f32", "bf16"], help="Payload type (default f16)")

    p = sub.add_parser("run", help="Run policies on one problem")
    _add_common(p)
    _add_distribution(p)
    _add_pasa(p)
    p.add_argument("--q", dest="q_path", type=Path, help="Query tensor (.npy)")
    p.add_argument("--k", dest="k_path", type=Path, help="Key tensor (.npy)")
    p.add_argument("--v", dest="v_path", type=Path, help="Value tensor (.npy)")
    p.add_argument("--dtype", choices=["f16", "f32", "bf16"], help="Set bf16 for uint16 bfloat16 payloads")
    p.add_argument("--truncate", action="store_true", default=None, help="Trim sequences to block multiples")
    p.add_argument("--diagnose", action="store_true", default=None, help="Report FP64 score and key ranges")

    p = sub.add_parser("sweep", help="Run policies over a distribution grid")
    _add_common(p)
    _add_distribution(p)
    _add_pasa(p)
    p.add_argument("--preset", choices=sorted([*PRESETS, *PRESET_ALIASES]), help="Named distribution grid")

    p = sub.add_parser("report", help="Summarise a sweep report")
    _add_common(p)
    p.add_argument("--report", dest="report_path", type=Path, help="Report JSON (default: <out>/sweep.json)")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = get_settings()
    except ValidationError as e:
        logging.basicConfig(format=LOG_FORMAT, datefmt="%H:%M:%S")
        logger.error("Invalid PASA_* environment settings: %s", e)
        return EXIT_ERROR
    logging.basicConfig(level=settings.log_level.upper(), format=LOG_FORMAT, datefmt="%H:%M:%S")

    flags: dict[str, Any] = {k: v for k, v in vars(args).items() if k != "config"}
    try:
        config = resolve_config(flags, args.config)
    except (ValidationError, ConfigError) as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_ERROR

    try:
        return run(config, settings)
    except Exception as e:
        logger.exception("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
