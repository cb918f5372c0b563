#!/usr/bin/env python3
"""Superbits: flips that break every member of a family -- and then a stranger.

Executables that share a model structure and compiler configuration have
byte-identical .text, but each one carries different trained weights. A bit
that degrades all of them attacks the code itself, not any particular weight
set. This demo intersects windowed sweeps across the three family members,
shows that the cheap shrinking search equals the brute-force intersection,
and then scores the surviving bits against the held-out victim -- a binary
whose training data the "attacker" never touched.

CLI equivalent:
    flipscan superbits --corpus demos/.cache/family --out superbits.jsonl \
        --victim victim --workers 4
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import common

import flipscan.elfimage as elfimage
from flipscan import SweepTarget, intersect_naive, verify_bits
from flipscan.campaign import vulnerable_set
from flipscan.superbits import check_same_structure, load_superbits, save_superbits, transfer_eval


def main() -> None:
    family = common.get_family()
    img = elfimage.load(family.victim.binary_path)
    window = common.hot_window(img, width=320)
    lo, hi = window
    window_bits = (hi - lo) * 8

    common.banner("1. why intersection is even meaningful")
    text_hash = check_same_structure(list(family.entries), family.victim.text_sha256)
    print(f"{len(family.entries)} members + victim share .text sha256 {text_hash[:16]}...")
    print("same code, different weights: a bit location means the same thing in all of them")

    common.banner("2. shrinking search over the family")
    print(f"window [{lo:#x}, {hi:#x}) = {window_bits} bits per member")
    sbits, stats = common.compute_superbits(family, window)
    trail = " -> ".join(f"{eid}:{n}" for eid, n in stats.progression)
    print(f"shrink trail      : {trail}")
    print(f"superbits         : {len(sbits)} bits survive all {len(sbits.provenance)} members")
    print(f"executions used   : {stats.executions_used}")
    print(f"brute force needs : {stats.executions_naive} (full sweep of every member)")
    print(f"saved             : {stats.executions_saved} "
          f"({100.0 * stats.executions_saved / stats.executions_naive:.0f}%)")
    print("only the first member pays for a full sweep; the rest merely re-verify survivors")

    common.banner("3. the shortcut changes nothing but the cost")
    per_entry = {}
    for entry in family.entries:
        per_entry[entry.entry_id] = vulnerable_set(common.window_sweep(family, entry, window))
    naive = intersect_naive(
        [per_entry[eid] for eid in sbits.provenance], list(sbits.provenance)
    )
    assert naive.bits == sbits.bits, "shrinking search must equal the naive intersection"
    sizes = ", ".join(f"{eid}: {len(per_entry[eid])}" for eid in sbits.provenance)
    print(f"per-member vulnerable counts: {sizes}")
    print(f"naive intersection of the full sweeps: {len(naive)} bits -- identical set")

    common.banner("4. superbits survive a save/load round trip")
    path = os.path.join(common.CACHE_DIR, "demo-superbits.jsonl")
    save_superbits(
        path,
        sbits,
        entry_hashes={e.entry_id: e.file_sha256 for e in family.entries},
        extra_header={"text_sha256": text_hash, "window": [lo, hi]},
    )
    loaded, header = load_superbits(path)
    assert loaded.bits == sbits.bits and loaded.provenance == sbits.provenance
    print(f"wrote {path}")
    print(f"header records provenance {header['provenance']} and the member binary hashes")

    common.banner("5. transfer to the held-out victim")
    if not sbits.bits:
        print("the intersection is empty in this window; nothing to transfer")
        return
    # Claims about specific bits deserve better than the sweep's reduced-sample
    # screening pass: each candidate gets a dedicated full-eval verification
    # run on the victim. The base rate still comes from the victim's own sweep.
    target = SweepTarget(family.victim.binary_path, common.eval_set_for(family, family.victim))
    try:
        verdicts = verify_bits(target, sbits.ordered(), workers=common.WORKERS)
    finally:
        target.close()
    report = transfer_eval(sbits, family.victim.entry_id, verdicts)
    victim_records = common.window_sweep(family, family.victim, window)
    base_rate = len(vulnerable_set(victim_records)) / window_bits
    print(f"superbits tried on victim : {report.tried}")
    print(f"still vulnerable there    : {len(report.vulnerable)} "
          f"(fraction {report.fraction:.3f})")
    print(f"victim base rate          : {base_rate:.4f} "
          "(chance a random window bit is vulnerable)")
    if base_rate > 0:
        print(f"lift                      : {report.fraction / base_rate:.0f}x over random guessing")
    print("\nthe victim's weights were never part of the search -- transfer works because")
    print("the flips break shared instructions, not learned parameters.")
    print("\nnext: 04_rowhammer_rehearsal.py spends these bits through a memory-template budget.")


if __name__ == "__main__":
    main()
