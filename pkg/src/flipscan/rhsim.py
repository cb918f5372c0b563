"""Simulate the online attack: DRAM templates, merged pages, flips-to-success.

The offline phase hands over an ordered list of superbits; the online phase
can only flip a bit if templating found a physical DRAM cell with the same
in-page offset, bit index, and direction -- and only one flip is allowed per
4096-byte merged page while the victim lives. A crash restarts the victim
and resets its pages, but physical cells (templates) stay consumed. The
victim is either a stochastic stub (for distribution-level statistics) or a
live executable whose memory image accumulates the flips actually applied.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Protocol

import numpy as np

from . import elfimage
from .elfimage import BitLocation, ElfImage, FlipDirection
from .harness import DEFAULT_MEMORY_CAP, ExecSpec, RunStatus, run_stable
from .oracles import EvalSet, OracleConfig, classifier_verdict, parse_class_predictions
from .corpus import write_tensor_file

PAGE_SIZE = 4096
ONLINE_PROBE_SAMPLES = 64


class NoSuperbits(ValueError):
    """Attack requested with an empty superbit list."""


@dataclass(frozen=True)
class MemoryTemplate:
    page_frame: int
    offset_in_page: int   # 0..4095
    bit_index: int        # 0..7
    direction: FlipDirection

    def key(self) -> tuple[int, int, str]:
        return (self.offset_in_page, self.bit_index, self.direction.value)


@dataclass(frozen=True)
class TemplatePool:
    templates: tuple[MemoryTemplate, ...]
    seed: int | None
    count: int
    zero_to_one_ratio: float | None

    def __len__(self) -> int:
        return len(self.templates)

    def zero_to_one_count(self) -> int:
        return sum(
            1 for t in self.templates if t.direction is FlipDirection.ZERO_TO_ONE
        )

    @cached_property
    def _index(self) -> dict[tuple[int, int, str], list[int]]:
        idx: dict[tuple[int, int, str], list[int]] = {}
        for i, t in enumerate(self.templates):
            idx.setdefault(t.key(), []).append(i)
        return idx

    def index(self) -> dict[tuple[int, int, str], list[int]]:
        """Template ids per (offset_in_page, bit_index, direction), id-ascending.

        Cached: Monte Carlo loops call this once per run over pools with
        tens of thousands of cells. Callers must not mutate the result.
        """
        return self._index


def generate_templates(seed: int, count: int, zero_to_one_ratio: float) -> TemplatePool:
    """Uniform (offset, bit) cells with Bernoulli(ratio) flip directions.

    Each template sits on its own page frame: templating scans a large
    region, so two usable cells rarely share one frame.
    """
    if not 0.0 <= zero_to_one_ratio <= 1.0:
        raise ValueError(f"ratio must be in [0,1], got {zero_to_one_ratio}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, PAGE_SIZE, size=count)
    bits = rng.integers(0, 8, size=count)
    dirs = rng.random(count) < zero_to_one_ratio
    templates = tuple(
        MemoryTemplate(
            page_frame=i,
            offset_in_page=int(offsets[i]),
            bit_index=int(bits[i]),
            direction=FlipDirection.ZERO_TO_ONE if dirs[i] else FlipDirection.ONE_TO_ZERO,
        )
        for i in range(count)
    )
    return TemplatePool(
        templates=templates, seed=seed, count=count, zero_to_one_ratio=zero_to_one_ratio
    )


def full_coverage_pool(copies: int = 1) -> TemplatePool:
    """One template per (offset, bit, direction) combination, times `copies`.

    65,536 x copies templates: every bit of any page is flippable, which
    isolates victim behavior from template luck in tests and statistics.
    """
    templates = []
    frame = 0
    for _ in range(copies):
        for off in range(PAGE_SIZE):
            for bit in range(8):
                for direction in (FlipDirection.ZERO_TO_ONE, FlipDirection.ONE_TO_ZERO):
                    templates.append(MemoryTemplate(frame, off, bit, direction))
                    frame += 1
    return TemplatePool(
        templates=tuple(templates), seed=None, count=len(templates), zero_to_one_ratio=None
    )


class Outcome(Enum):
    SUCCESS = "success"
    CRASH = "crash"
    NO_CHANGE = "no-change"
    NO_TEMPLATE = "no-template"
    PAGE_ALREADY_FLIPPED = "page-already-flipped"


@dataclass(frozen=True)
class Attempt:
    bit: BitLocation
    template_id: int | None
    outcome: Outcome


@dataclass(frozen=True)
class AttackRun:
    attempts: tuple[Attempt, ...]
    flips_attempted: int
    crashes: int
    succeeded: bool
    seed: int

    def flipped_attempts(self) -> list[Attempt]:
        return [
            a
            for a in self.attempts
            if a.outcome in (Outcome.SUCCESS, Outcome.CRASH, Outcome.NO_CHANGE)
        ]


class VictimModel(Protocol):
    """What the attack loop needs from a victim."""

    def page_offset(self, bit: BitLocation) -> int: ...

    def page_frame(self, bit: BitLocation) -> int: ...

    def query_flip(self, bit: BitLocation, rng: np.random.Generator) -> Outcome: ...

    def reset(self) -> None:
        """Crash-restart: victim memory back to pristine."""
        ...


class StubVictim:
    """Stochastic victim: per-query Bernoulli outcomes, no memory state.

    success_prob may be a single float or a per-bit mapping; crash_prob eats
    into the remaining mass. Page geometry treats byte_offset as the mapped
    address (text_vaddr configurable).
    """

    def __init__(
        self,
        success_prob: float | dict[BitLocation, float],
        crash_prob: float = 0.0,
        text_vaddr: int = 0,
    ):
        self.success_prob = success_prob
        self.crash_prob = crash_prob
        self.text_vaddr = text_vaddr

    def _p_success(self, bit: BitLocation) -> float:
        if isinstance(self.success_prob, dict):
            return self.success_prob.get(bit, 0.0)
        return self.success_prob

    def page_offset(self, bit: BitLocation) -> int:
        return (self.text_vaddr + bit.byte_offset) % PAGE_SIZE

    def page_frame(self, bit: BitLocation) -> int:
        return (self.text_vaddr + bit.byte_offset) // PAGE_SIZE

    def query_flip(self, bit: BitLocation, rng: np.random.Generator) -> Outcome:
        draw = rng.random()
        p_s = self._p_success(bit)
        if draw < p_s:
            return Outcome.SUCCESS
        if draw < p_s + self.crash_prob:
            return Outcome.CRASH
        return Outcome.NO_CHANGE

    def reset(self) -> None:
        pass


class LiveVictim:
    """A real corpus executable attacked in place.

    Flips accumulate in the victim's memory image across attempts (the page
    constraint exists precisely because mutated pages diverge); each query
    rewrites the binary and probes it through its public interface with a
    reduced online eval set. A crash restores the pristine image.
    """

    def __init__(
        self,
        binary_path: str,
        eval_set: EvalSet,
        oracle_cfg: OracleConfig = OracleConfig(),
        probe_samples: int = ONLINE_PROBE_SAMPLES,
        workdir: str | None = None,
        timeout_ms: int = 10000,
        memory_cap: int = DEFAULT_MEMORY_CAP,
    ):
        self.img: ElfImage = elfimage.load(binary_path)
        self.pristine = self.img.data
        self.current = bytearray(self.pristine)
        self.oracle_cfg = oracle_cfg
        self.probe_set = eval_set.take(probe_samples)
        self.workdir = workdir or tempfile.mkdtemp(prefix="flipscan-attack-")
        os.makedirs(self.workdir, exist_ok=True)
        self.probe_path = os.path.join(self.workdir, "probe-eval.txt")
        write_tensor_file(self.probe_path, self.probe_set.inputs, eval_set.class_count)
        self.mutant_path = os.path.join(self.workdir, "victim-live")
        self.timeout_ms = timeout_ms
        self.memory_cap = memory_cap
        self.queries = 0

    def page_offset(self, bit: BitLocation) -> int:
        return self.img.page_offset_of(bit.byte_offset, PAGE_SIZE)

    def page_frame(self, bit: BitLocation) -> int:
        return self.img.page_frame_of(bit.byte_offset, PAGE_SIZE)

    def query_flip(self, bit: BitLocation, rng: np.random.Generator) -> Outcome:
        self.queries += 1
        self.current[self.img.text.offset + bit.byte_offset] ^= 1 << bit.bit_index
        with open(self.mutant_path, "wb") as fh:
            fh.write(self.current)
        os.chmod(self.mutant_path, 0o755)
        out = run_stable(
            ExecSpec(
                binary=self.mutant_path,
                argv=(self.probe_path,),
                timeout_ms=self.timeout_ms,
                memory_cap=self.memory_cap,
            )
        )
        if out.status is not RunStatus.COMPLETED:
            return Outcome.CRASH
        preds = parse_class_predictions(
            out.stdout, len(self.probe_set), self.probe_set.class_count
        )
        if preds is None:
            return Outcome.CRASH
        verdict = classifier_verdict(preds, self.probe_set, self.oracle_cfg)
        return Outcome.SUCCESS if verdict.is_vulnerable else Outcome.NO_CHANGE

    def reset(self) -> None:
        self.current = bytearray(self.pristine)


def simulate_attack(
    superbits: list[BitLocation],
    pool: TemplatePool,
    victim: VictimModel,
    seed: int = 0,
    max_attempts: int = 100,
) -> AttackRun:
    """One attack run: try superbits in order until success or exhaustion.

    For each superbit: find a matching unconsumed template (else NoTemplate),
    respect one-flip-per-page within the victim lifetime (else
    PageAlreadyFlipped; neither consumes a template), then flip and observe.
    Crash restarts the victim and clears page state; consumed templates stay
    consumed. Deterministic per (superbits, pool, victim, seed).
    """
    if not superbits:
        raise NoSuperbits("attack needs a non-empty ordered superbit list")
    rng = np.random.default_rng(seed)
    index = pool.index()
    consumed: set[int] = set()
    flipped_pages: set[int] = set()
    attempts: list[Attempt] = []
    flips = 0
    crashes = 0
    succeeded = False

    for bit in superbits:
        if flips >= max_attempts:
            break
        key = (victim.page_offset(bit), bit.bit_index, bit.direction.value)
        template_id = next((t for t in index.get(key, ()) if t not in consumed), None)
        if template_id is None:
            attempts.append(Attempt(bit, None, Outcome.NO_TEMPLATE))
            continue
        page = victim.page_frame(bit)
        if page in flipped_pages:
            attempts.append(Attempt(bit, None, Outcome.PAGE_ALREADY_FLIPPED))
            continue
        consumed.add(template_id)
        flipped_pages.add(page)
        flips += 1
        outcome = victim.query_flip(bit, rng)
        attempts.append(Attempt(bit, template_id, outcome))
        if outcome is Outcome.SUCCESS:
            succeeded = True
            break
        if outcome is Outcome.CRASH:
            crashes += 1
            victim.reset()
            flipped_pages.clear()

    return AttackRun(
        attempts=tuple(attempts),
        flips_attempted=flips,
        crashes=crashes,
        succeeded=succeeded,
        seed=seed,
    )


@dataclass(frozen=True)
class AttackStats:
    runs: int
    mean_flips: float
    mean_crashes: float
    success_rate: float
    single_flip_fraction: float | None  # among successful runs; None if none

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "mean_flips": self.mean_flips,
            "mean_crashes": self.mean_crashes,
            "success_rate": self.success_rate,
            "single_flip_fraction": self.single_flip_fraction,
        }


def attack_stats(runs: list[AttackRun]) -> AttackStats:
    if not runs:
        raise ValueError("need at least one run")
    flips = [r.flips_attempted for r in runs]
    crashes = [r.crashes for r in runs]
    wins = [r for r in runs if r.succeeded]
    single = (
        sum(1 for r in wins if r.flips_attempted == 1) / len(wins) if wins else None
    )
    return AttackStats(
        runs=len(runs),
        mean_flips=float(np.mean(flips)),
        mean_crashes=float(np.mean(crashes)),
        success_rate=len(wins) / len(runs),
        single_flip_fraction=single,
    )


def order_superbits(
    bits: list[BitLocation],
    damage: dict[BitLocation, float] | None = None,
    policy: str = "damage",
    seed: int = 0,
) -> list[BitLocation]:
    """Attack priority: most-damaging first (ascending flipped accuracy),
    plain address order, or a seeded shuffle. Ties break by offset."""
    if policy == "offset":
        return sorted(bits)
    if policy == "random":
        rng = np.random.default_rng(seed)
        out = sorted(bits)
        rng.shuffle(out)
        return list(out)
    if policy == "damage":
        damage = damage or {}
        return sorted(bits, key=lambda b: (damage.get(b, 1.0), b))
    raise ValueError(f"unknown ordering policy {policy!r}")


def save_trace(path: str, runs: list[AttackRun], header: dict | None = None) -> str:
    """Line-delimited attempt records plus a summary line."""
    with open(path, "w") as fh:
        fh.write(
            json.dumps({"kind": "attack-header", **(header or {})}, sort_keys=True) + "\n"
        )
        for ri, run in enumerate(runs):
            for ai, att in enumerate(run.attempts):
                fh.write(
                    json.dumps(
                        {
                            "run": ri,
                            "attempt": ai,
                            "byte_offset": att.bit.byte_offset,
                            "bit_index": att.bit.bit_index,
                            "direction": att.bit.direction.value,
                            "template_id": att.template_id,
                            "outcome": att.outcome.value,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        fh.write(
            json.dumps(
                {"kind": "attack-summary", **attack_stats(runs).to_dict()}, sort_keys=True
            )
            + "\n"
        )
    return path
