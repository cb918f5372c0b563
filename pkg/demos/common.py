"""Shared plumbing for the demo scripts: a cached corpus and windowed sweeps.

Every demo needs the same ingredients -- a small family of same-structure
executables and per-entry sweep results -- and building those from scratch on
each run would bury the narrative under compile time. This module builds the
family once into demos/.cache/ and reuses it afterwards; windowed sweeps are
cached the same way through the campaign log's resume support, so re-running
a demo replays logged verdicts instead of re-executing mutants.

Nothing here is part of the library: demos import it, the package never does.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

from flipscan import EvalSet, SweepRecord, SweepTarget, run_sweep, shrink_search
from flipscan.campaign import vulnerable_set
from flipscan.corpus import CorpusEntry, CorpusFamily, FamilyPlan, build_family, load_family, mlp_spec
from flipscan.elfimage import ElfImage
from flipscan.x86 import MnemClass, linear_sweep

DEMO_DIR = os.path.dirname(os.path.abspath(__file__))
REPO_ROOT = os.path.dirname(DEMO_DIR)
CACHE_DIR = os.path.join(DEMO_DIR, ".cache")
RUNTIME_DIR = os.path.join(REPO_ROOT, "runtime")

# Small enough to build in seconds, big enough that superbit shrinking and
# victim transfer have something to show.
FAMILY_PLAN = FamilyPlan(
    spec=mlp_spec(),
    n=3,
    base_seed=2000,
    dataset_size=128,
    epochs=200,
)

WORKERS = 4


def banner(title: str) -> None:
    print()
    print(f"=== {title} " + "=" * max(0, 70 - len(title)))


def get_family() -> CorpusFamily:
    """Build the demo family on first use; afterwards reload it from disk."""
    root = os.path.join(CACHE_DIR, "family")
    manifest = os.path.join(root, "manifest.json")
    if os.path.isfile(manifest):
        family = load_family(root)
        if os.path.isfile(family.victim.binary_path):
            return family
    print(f"[common] building {FAMILY_PLAN.n}-member family + victim into {root} ...")
    t0 = time.time()
    family = build_family(FAMILY_PLAN, root, runtime_dir=RUNTIME_DIR)
    print(f"[common] built in {time.time() - t0:.1f}s (cached for later demos)")
    return family


def eval_set_for(family: CorpusFamily, entry: CorpusEntry) -> EvalSet:
    """Each entry is judged on its own training distribution."""
    ds = family.dataset_of(entry)
    return EvalSet(ds.inputs, ds.labels, family.spec.class_count)


def hot_window(img: ElfImage, width: int = 320) -> tuple[int, int]:
    """Pick the densest stretch of vector instructions in .text.

    The compute kernel is where flips do interesting damage, and at O3 with
    AVX2 it is exactly the region packed with vector arithmetic. Scoring each
    candidate window by its count of vector-op bytes finds it statically,
    without running anything.
    """
    data = img.text_bytes
    weight = bytearray(len(data))
    for span in linear_sweep(data):
        if span.mnem_class in (MnemClass.VEC_ARITH, MnemClass.VEC_MOV):
            for i in range(span.start, min(span.end, len(weight))):
                weight[i] = 1
    width = min(width, len(data))
    score = sum(weight[:width])
    best_lo, best_score = 0, score
    for lo in range(1, len(data) - width + 1):
        score += weight[lo + width - 1] - weight[lo - 1]
        if score > best_score:
            best_lo, best_score = lo, score
    return best_lo, best_lo + width


def window_exclusions(text_size: int, window: tuple[int, int]) -> list[tuple[int, int]]:
    """Invert a keep-window into the exclude-ranges run_sweep expects."""
    lo, hi = window
    ranges = []
    if lo > 0:
        ranges.append((0, lo))
    if hi < text_size:
        ranges.append((hi, text_size))
    return ranges


def sweep_log_path(entry_id: str, window: tuple[int, int]) -> str:
    lo, hi = window
    return os.path.join(CACHE_DIR, f"demo-sweep-{entry_id}-{lo:x}-{hi:x}.jsonl")


def window_sweep(
    family: CorpusFamily,
    entry: CorpusEntry,
    window: tuple[int, int],
) -> list[SweepRecord]:
    """Sweep one entry's window, resuming from the cached log when it exists."""
    os.makedirs(CACHE_DIR, exist_ok=True)
    log_path = sweep_log_path(entry.entry_id, window)
    target = SweepTarget(entry.binary_path, eval_set_for(family, entry))
    try:
        t0 = time.time()
        fresh = not os.path.exists(log_path)
        records = run_sweep(
            target,
            log_path=log_path,
            workers=WORKERS,
            exclude_ranges=window_exclusions(target.img.text.size, window),
        )
        verb = "swept" if fresh else "replayed from log"
        print(
            f"[common] {entry.entry_id}: {len(records)} bits {verb} "
            f"in {time.time() - t0:.1f}s"
        )
        return records
    finally:
        target.close()


class WindowSweepProvider:
    """Feeds shrink_search from windowed sweeps of the family members.

    full_sweep replays the cached campaign log when one exists; verify runs
    only the requested bits against the member's own eval set, which is the
    entire point of the shrinking search -- later members never pay for a
    full sweep. verify sends each candidate through the same fast-then-full
    evaluation a sweep would use, so the shrunk set is bit-for-bit what
    intersecting full sweeps of every member produces.
    """

    def __init__(self, family: CorpusFamily, window: tuple[int, int]):
        self.family = family
        self.window = window
        self._by_id = {e.entry_id: e for e in family.entries}
        self._targets: dict[str, SweepTarget] = {}

    def entry_ids(self) -> list[str]:
        return [e.entry_id for e in self.family.entries]

    def sweep_cost(self, entry_id: str) -> int:
        lo, hi = self.window
        return (hi - lo) * 8

    def full_sweep(self, entry_id: str):
        records = window_sweep(self.family, self._by_id[entry_id], self.window)
        return vulnerable_set(records)

    def _target(self, entry_id: str) -> SweepTarget:
        if entry_id not in self._targets:
            entry = self._by_id[entry_id]
            self._targets[entry_id] = SweepTarget(
                entry.binary_path, eval_set_for(self.family, entry)
            )
        return self._targets[entry_id]

    def verify(self, entry_id: str, bits):
        target = self._target(entry_id)
        locs = sorted(bits)
        with ThreadPoolExecutor(max_workers=WORKERS) as pool:
            records = pool.map(target.evaluate, locs)
            return {rec.loc for rec in records if rec.verdict.is_vulnerable}

    def close(self) -> None:
        for target in self._targets.values():
            target.close()
        self._targets.clear()


def compute_superbits(family: CorpusFamily, window: tuple[int, int]):
    """Shrinking intersection over the family's windowed sweeps."""
    provider = WindowSweepProvider(family, window)
    try:
        return shrink_search(provider)
    finally:
        provider.close()
