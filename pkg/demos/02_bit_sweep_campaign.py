#!/usr/bin/env python3
"""Sweep every bit of a code window and map where the silent failures live.

The exhaustive campaign flips each .text bit in turn, runs the mutant, and
files a verdict: crash, no effect, or vulnerable (accuracy at or near random
guessing -- the failure a monitoring system won't see). A full binary takes
minutes; this demo sweeps the densest vector-code window so the shape of the
results shows up in seconds, then reads the resulting log the way the
reporting tools do.

CLI equivalent:
    flipscan sweep --corpus demos/.cache/family --entry victim \
        --out sweep.jsonl --workers 4
    flipscan report --log sweep.jsonl --out histogram.csv
    flipscan classify-flips --log sweep.jsonl \
        --binary demos/.cache/family/entries/victim/model
"""

import os
import sys
import time

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import common

import flipscan.elfimage as elfimage
from flipscan import run_sweep, summarize
from flipscan.campaign import SweepTarget, vulnerable_set
from flipscan.elfimage import FlipDirection
from flipscan.x86 import flip_type_report


def main() -> None:
    family = common.get_family()
    victim = family.victim
    img = elfimage.load(victim.binary_path)

    common.banner("1. choose the window")
    window = common.hot_window(img, width=320)
    lo, hi = window
    window_bits = (hi - lo) * 8
    print(f".text is {img.text.size} bytes ({img.bit_count} bits); sweeping the")
    print(f"vector-densest window [{lo:#x}, {hi:#x}) = {window_bits} bits.")

    common.banner("2. sweep (or replay the cached log)")
    records = common.window_sweep(family, victim, window)

    common.banner("3. the log is the campaign")
    log_path = common.sweep_log_path(victim.entry_id, window)
    # Append-only JSONL with a header line: kill the process mid-sweep and a
    # rerun picks up at the first unrecorded bit instead of starting over.
    t0 = time.time()
    target = SweepTarget(victim.binary_path, common.eval_set_for(family, victim))
    try:
        again = run_sweep(
            target,
            log_path=log_path,
            workers=common.WORKERS,
            exclude_ranges=common.window_exclusions(img.text.size, window),
        )
    finally:
        target.close()
    print(f"resume pass: {len(again)} records in {time.time() - t0:.2f}s "
          "(every bit already logged -> zero mutant executions)")

    common.banner("4. verdict census")
    by_kind: dict[str, int] = {}
    for rec in records:
        by_kind[rec.verdict.kind.value] = by_kind.get(rec.verdict.kind.value, 0) + 1
    for kind, n in sorted(by_kind.items(), key=lambda kv: -kv[1]):
        print(f"  {kind:<18} {n:5d}  ({100.0 * n / len(records):.1f}%)")

    summary = summarize(
        records,
        text_size=img.text.size,
        buckets=16,
        excluded_bits=img.bit_count - window_bits,
    )
    vuln = vulnerable_set(records)
    z2o = sum(1 for b in vuln if b.direction is FlipDirection.ZERO_TO_ONE)
    print(f"\nvulnerable bits in window : {len(vuln)} "
          f"({100.0 * len(vuln) / window_bits:.2f}% of swept bits)")
    if vuln:
        print(f"flip directions           : {z2o} zero->one, {len(vuln) - z2o} one->zero")
    if summary.per_class_pin_counts:
        pins = ", ".join(f"class {c}: {n}" for c, n in sorted(summary.per_class_pin_counts.items()))
        print(f"output pinned to one class: {pins}")

    common.banner("5. where in the window they cluster")
    width = hi - lo
    cols = 32
    step = max(1, width // cols)
    counts = [0] * ((width + step - 1) // step)
    for b in vuln:
        counts[(b.byte_offset - lo) // step] += 1
    peak = max(counts) if counts else 0
    for i, n in enumerate(counts):
        bar = "#" * (0 if peak == 0 else round(8 * n / peak))
        print(f"  +{lo + i * step:#06x} {n:3d} {bar}")

    common.banner("6. what kind of instructions got hit")
    if not vuln:
        print("no vulnerable bits in this window; nothing to attribute")
        return
    report = flip_type_report(img.text_bytes, sorted(vuln))
    print(f"{'mnemonic class':<14} {'field bucket':<10} {'count':>5}  share")
    for row in report.rows[:8]:
        print(f"{row.mnem_class.value:<14} {row.bucket:<10} {row.count:>5}  {row.share:.1f}%")
    print(f"\nopcode-bucket share: {report.bucket_share('opcode'):.1f}% "
          "(flips that steer the operation rather than its data)")

    print("\nnext: 03_superbits_and_transfer.py intersects sweeps across a family.")


if __name__ == "__main__":
    main()
