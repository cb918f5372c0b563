"""Decide what a bit flip did to a model from its observable outputs.

All verdict functions are pure: predictions in, verdict out. A flip counts as
vulnerable when it silently degrades the classifier to random guessing (or
silently distorts a generative model's outputs) -- a crash is loud and is a
separate, non-exploitable outcome classified upstream by the harness.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from enum import Enum


class LengthMismatch(ValueError):
    """Prediction count does not match the evaluation set."""


class EmptyHistory(ValueError):
    """Distortion percentile requested before any samples were recorded."""


class VerdictKind(Enum):
    NO_EFFECT = "no-effect"
    VULNERABLE = "vulnerable"
    VULNERABLE_PINNED = "vulnerable-pinned"
    CRASH = "crash"


@dataclass(frozen=True)
class OracleConfig:
    """Thresholds for all verdicts; defaults match the study settings."""

    delta: float = 0.15               # slack over exact 1/C random guessing
    pin_threshold: float = 0.90       # modal-class share that counts as pinned
    label_change_threshold: float = 0.85
    distortion_percentile: float = 0.85
    warmup_flips: int = 100           # history size before distortion triggers


@dataclass(frozen=True)
class EvalSet:
    """Inputs plus ground truth: class labels, or reference output vectors."""

    inputs: np.ndarray           # (N, ...) float32
    labels: np.ndarray           # (N,) int labels, or (N, D) reference outputs
    class_count: int

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.labels):
            raise LengthMismatch(
                f"{len(self.inputs)} inputs vs {len(self.labels)} labels"
            )
        if self.class_count < 2:
            raise ValueError("need at least two classes")

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, n: int) -> "EvalSet":
        """First-n subset, used for the fast screening pass."""
        n = min(n, len(self))
        return EvalSet(self.inputs[:n], self.labels[:n], self.class_count)


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    accuracy: float | None = None
    pin_fraction: float | None = None
    pinned_class: int | None = None
    label_change: float | None = None
    distortion: float | None = None

    @property
    def is_vulnerable(self) -> bool:
        return self.kind in (VerdictKind.VULNERABLE, VerdictKind.VULNERABLE_PINNED)


CRASH_VERDICT = Verdict(kind=VerdictKind.CRASH)


def random_guess_ceiling(class_count: int, delta: float) -> float:
    """Highest accuracy still treated as random guessing: (1/C) * (1 + delta)."""
    return (1.0 / class_count) * (1.0 + delta)


# --- prediction wire format -------------------------------------------------
#
# Classifier runs print one decimal class index per input line; generative
# runs print one whitespace-separated float vector per input line. Anything
# else (wrong count, non-numeric, out-of-range class) is malformed and the
# caller treats the run as a crash.


def parse_class_predictions(stdout: bytes, n: int, class_count: int) -> np.ndarray | None:
    """Parse classifier stdout; None when malformed."""
    try:
        tokens = stdout.decode("ascii").split()
    except UnicodeDecodeError:
        return None
    if len(tokens) != n:
        return None
    try:
        preds = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError:
        return None
    if preds.size and (preds.min() < 0 or preds.max() >= class_count):
        return None
    return preds


def parse_vector_predictions(stdout: bytes, n: int, dim: int) -> np.ndarray | None:
    """Parse generative stdout into an (n, dim) float32 array; None when malformed."""
    try:
        text = stdout.decode("ascii")
    except UnicodeDecodeError:
        return None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != n:
        return None
    rows = []
    for ln in lines:
        parts = ln.split()
        if len(parts) != dim:
            return None
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            return None
    arr = np.array(rows, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        return None
    return arr


# --- classifier verdicts ----------------------------------------------------


def classifier_accuracy(preds: np.ndarray, eval_set: EvalSet) -> float:
    if len(preds) != len(eval_set):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(eval_set)} labels")
    return float(np.mean(preds == eval_set.labels))


def pin_profile(preds: np.ndarray, class_count: int) -> tuple[int, float]:
    """Modal predicted class and its share of all predictions."""
    if len(preds) == 0:
        raise LengthMismatch("no predictions")
    counts = np.bincount(preds, minlength=class_count)
    pinned = int(np.argmax(counts))
    return pinned, float(counts[pinned] / len(preds))


def pinned_class_verdict(
    preds: np.ndarray, cfg: OracleConfig = OracleConfig(), class_count: int | None = None
) -> Verdict:
    """Pin judgment alone: does one class dominate the prediction stream?

    VULNERABLE_PINNED when the modal class's share reaches the pin threshold,
    NO_EFFECT otherwise; metrics always carry the pin fraction. The campaign
    applies this as an upgrade on top of an accuracy-collapse verdict.
    """
    pinned, pin_frac = pin_profile(
        preds, class_count if class_count is not None else int(np.max(preds)) + 1
    )
    if pin_frac >= cfg.pin_threshold:
        return Verdict(
            kind=VerdictKind.VULNERABLE_PINNED,
            pin_fraction=pin_frac,
            pinned_class=pinned,
        )
    return Verdict(kind=VerdictKind.NO_EFFECT, pin_fraction=pin_frac)


def classifier_verdict(
    preds: np.ndarray, eval_set: EvalSet, cfg: OracleConfig = OracleConfig()
) -> Verdict:
    """Vulnerable iff accuracy collapses to the random-guess ceiling.

    A vulnerable flip whose outputs concentrate on one class beyond the pin
    threshold upgrades to VULNERABLE_PINNED, keeping the same accuracy fields.
    """
    acc = classifier_accuracy(preds, eval_set)
    pinned, pin_frac = pin_profile(preds, eval_set.class_count)
    if acc <= random_guess_ceiling(eval_set.class_count, cfg.delta):
        if pin_frac >= cfg.pin_threshold:
            return Verdict(
                kind=VerdictKind.VULNERABLE_PINNED,
                accuracy=acc,
                pin_fraction=pin_frac,
                pinned_class=pinned,
            )
        return Verdict(kind=VerdictKind.VULNERABLE, accuracy=acc, pin_fraction=pin_frac)
    return Verdict(kind=VerdictKind.NO_EFFECT, accuracy=acc, pin_fraction=pin_frac)


# --- generative verdicts ----------------------------------------------------


@dataclass
class DistortionHistory:
    """Running record of mean-|difference| scores across the campaign so far."""

    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scores)

    def add(self, score: float) -> None:
        self.scores.append(score)

    def percentile(self, q: float) -> float:
        """q-quantile with the 'lower' method so the cutoff is an actual score."""
        if not self.scores:
            raise EmptyHistory("no distortion scores recorded yet")
        return float(np.percentile(np.array(self.scores), q * 100.0, method="lower"))


def distortion_score(outputs: np.ndarray, reference: np.ndarray) -> float:
    """Mean absolute elementwise difference against the clean model's outputs."""
    if outputs.shape != reference.shape:
        raise LengthMismatch(f"{outputs.shape} outputs vs {reference.shape} reference")
    return float(np.mean(np.abs(outputs.astype(np.float64) - reference.astype(np.float64))))


def label_change_fraction(
    outputs: np.ndarray, reference: np.ndarray, label_fn
) -> float:
    """Share of outputs whose downstream label moved off the reference label."""
    if len(outputs) != len(reference):
        raise LengthMismatch(f"{len(outputs)} outputs vs {len(reference)} reference")
    out_labels = np.asarray([label_fn(o) for o in outputs])
    ref_labels = np.asarray([label_fn(r) for r in reference])
    return float(np.mean(out_labels != ref_labels))


def generative_verdict(
    outputs: np.ndarray,
    eval_set: EvalSet,
    history: DistortionHistory,
    label_fn,
    cfg: OracleConfig = OracleConfig(),
) -> Verdict:
    """Vulnerable when outputs are semantically or numerically far from clean.

    Triggers on either (a) the downstream label changing for at least the
    label-change threshold of inputs, or (b) distortion strictly above the
    configured percentile of the history -- but only once the history holds at
    least warmup_flips scores, so early campaign noise cannot self-trigger.
    The caller records the score into the history after the verdict.
    """
    dist = distortion_score(outputs, eval_set.labels)
    change = label_change_fraction(outputs, eval_set.labels, label_fn)
    vulnerable = change >= cfg.label_change_threshold
    if not vulnerable and len(history) >= cfg.warmup_flips:
        vulnerable = dist > history.percentile(cfg.distortion_percentile)
    kind = VerdictKind.VULNERABLE if vulnerable else VerdictKind.NO_EFFECT
    return Verdict(kind=kind, label_change=change, distortion=dist)
