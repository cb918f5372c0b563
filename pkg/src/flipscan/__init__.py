"""flipscan: single-bit fault-injection campaigns against compiled NN executables.

The pipeline: build a local family of same-structure executables (corpus),
sweep every .text bit for silent-failure verdicts (campaign + harness +
oracles), intersect across the family into superbits (superbits), attribute
flips to instruction fields (x86), and replay the online phase with DRAM
templates (rhsim).
"""

from .elfimage import BitLocation, ElfImage, FlipDirection, apply_flip, enumerate_bits, load
from .harness import (
    ExecSpec,
    RawOutcome,
    RunStatus,
    TriageResult,
    classify_raw,
    run_once,
    run_stable,
)
from .oracles import EvalSet, OracleConfig, Verdict, VerdictKind
from .campaign import CampaignSummary, SweepRecord, SweepTarget, run_sweep, summarize, verify_bits
from .superbits import SuperbitSet, intersect_naive, shrink_search, transfer_eval
from .rhsim import AttackRun, MemoryTemplate, TemplatePool, attack_stats, generate_templates, simulate_attack
from .x86 import FieldTag, InsnSpan, MnemClass, classify_flip, decode_one, flip_type_report, linear_sweep

__version__ = "0.1.0"

__all__ = [
    "BitLocation",
    "ElfImage",
    "FlipDirection",
    "apply_flip",
    "enumerate_bits",
    "load",
    "ExecSpec",
    "RawOutcome",
    "RunStatus",
    "TriageResult",
    "classify_raw",
    "run_once",
    "run_stable",
    "EvalSet",
    "OracleConfig",
    "Verdict",
    "VerdictKind",
    "CampaignSummary",
    "SweepRecord",
    "SweepTarget",
    "run_sweep",
    "summarize",
    "verify_bits",
    "SuperbitSet",
    "intersect_naive",
    "shrink_search",
    "transfer_eval",
    "AttackRun",
    "MemoryTemplate",
    "TemplatePool",
    "attack_stats",
    "generate_templates",
    "simulate_attack",
    "FieldTag",
    "InsnSpan",
    "MnemClass",
    "classify_flip",
    "decode_one",
    "flip_type_report",
    "linear_sweep",
    "__version__",
]
