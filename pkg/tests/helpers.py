"""Shared stubs and constructors for the test suite."""

from __future__ import annotations

import numpy as np

from flipscan.campaign import CLASSIFIER, SweepRecord
from flipscan.elfimage import BitLocation, ElfImage, FlipDirection, direction_of
from flipscan.harness import ExecSpec
from flipscan.oracles import (
    CRASH_VERDICT,
    DistortionHistory,
    EvalSet,
    OracleConfig,
    Verdict,
    VerdictKind,
)


def bitloc(img_or_bytes, byte_offset: int, bit_index: int) -> BitLocation:
    """BitLocation with the direction derived from the actual byte value."""
    if isinstance(img_or_bytes, ElfImage):
        data = img_or_bytes.text_bytes
    else:
        data = img_or_bytes
    return BitLocation(byte_offset, bit_index, direction_of(data[byte_offset], bit_index))


def tiny_eval(n: int = 4, class_count: int = 2) -> EvalSet:
    return EvalSet(
        inputs=np.zeros((n, 2), dtype=np.float32),
        labels=np.zeros(n, dtype=np.int64),
        class_count=class_count,
    )


class StubSweepTarget:
    """SweepTarget look-alike driven by a verdict function over locations.

    Lets campaign plumbing (logging, resume, chunking, parallelism,
    summaries) be exercised without compiling or executing anything.
    """

    def __init__(self, img: ElfImage, verdict_fn=None, kind: str = CLASSIFIER,
                 oracle_cfg: OracleConfig | None = None, wall_ms: float = 0.01):
        self.img = img
        self.kind = kind
        self.oracle_cfg = oracle_cfg or OracleConfig()
        self.history = DistortionHistory()
        self.baseline_accuracy = 1.0
        self.spec = ExecSpec(binary="/stub/none", argv=(), timeout_ms=1000)
        self.eval_set = tiny_eval(8, 10)
        self.fast_set = tiny_eval(4, 10)
        self.verdict_fn = verdict_fn or (lambda loc: Verdict(VerdictKind.NO_EFFECT, accuracy=1.0))
        self.wall_ms = wall_ms
        self.evaluated: list[BitLocation] = []
        self.full_only: list[BitLocation] = []

    def _record(self, loc: BitLocation) -> SweepRecord:
        verdict = self.verdict_fn(loc)
        status = "sig:11" if verdict.kind is VerdictKind.CRASH else "ok"
        return SweepRecord(loc, verdict, status, self.wall_ms)

    def evaluate(self, loc: BitLocation) -> SweepRecord:
        self.evaluated.append(loc)
        return self._record(loc)

    def evaluate_full_only(self, loc: BitLocation) -> SweepRecord:
        self.full_only.append(loc)
        return self._record(loc)

    def close(self) -> None:
        pass


def periodic_verdict_fn(vuln_every: int = 97, crash_every: int = 131,
                        pin_every: int | None = None):
    """Deterministic verdict pattern over (byte_offset, bit_index) ordinals."""

    def fn(loc: BitLocation) -> Verdict:
        ordinal = loc.byte_offset * 8 + loc.bit_index
        if crash_every and ordinal % crash_every == 0:
            return CRASH_VERDICT
        if pin_every and ordinal % pin_every == 0:
            return Verdict(VerdictKind.VULNERABLE_PINNED, accuracy=0.10,
                           pin_fraction=0.97, pinned_class=ordinal % 10)
        if vuln_every and ordinal % vuln_every == 0:
            return Verdict(VerdictKind.VULNERABLE, accuracy=0.10)
        return Verdict(VerdictKind.NO_EFFECT, accuracy=0.95)

    return fn


class DictSweepProvider:
    """SweepProvider backed by literal per-entry vulnerable sets."""

    def __init__(self, vuln: dict[str, set[BitLocation]], bit_space: int):
        self.vuln = vuln
        self.bit_space = bit_space
        self.full_sweeps: list[str] = []
        self.verify_calls: list[tuple[str, int]] = []

    def entry_ids(self) -> list[str]:
        return list(self.vuln)

    def sweep_cost(self, entry_id: str) -> int:
        return self.bit_space

    def full_sweep(self, entry_id: str) -> set[BitLocation]:
        self.full_sweeps.append(entry_id)
        return set(self.vuln[entry_id])

    def verify(self, entry_id: str, bits: set[BitLocation]) -> set[BitLocation]:
        self.verify_calls.append((entry_id, len(bits)))
        return bits & self.vuln[entry_id]


def random_locs(rng: np.random.Generator, count: int, byte_space: int) -> list[BitLocation]:
    """Unique random bit locations (direction chosen arbitrarily but fixed)."""
    seen = set()
    out = []
    while len(out) < count:
        off = int(rng.integers(0, byte_space))
        bit = int(rng.integers(0, 8))
        direction = FlipDirection.ZERO_TO_ONE if rng.random() < 0.5 else FlipDirection.ONE_TO_ZERO
        key = (off, bit)
        if key in seen:
            continue
        seen.add(key)
        out.append(BitLocation(off, bit, direction))
    return out
