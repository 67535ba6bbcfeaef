"""Numerics lab for blocked attention under low-precision policies and pseudo-average shifting."""

from pasa_lab.attention_ref import AttentionProblem, M0Mode, flash_attention, golden_attention
from pasa_lab.pasa_core import PasaParams, pasa_attention
from pasa_lab.tensors import POLICIES, PolicyName, Precision, get_policy

__all__ = [
    "AttentionProblem",
    "M0Mode",
    "PasaParams",
    "POLICIES",
    "PolicyName",
    "Precision",
    "flash_attention",
    "get_policy",
    "golden_attention",
    "pasa_attention",
]
