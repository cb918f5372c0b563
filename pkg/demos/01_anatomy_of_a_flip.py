#!/usr/bin/env python3
"""What one bit flip does to a compiled model, end to end.

The whole toolkit rests on a short chain: map an executable's .text section
into addressable bits, flip exactly one, run the mutant under a watchdog, and
judge the output against ground truth. This demo walks that chain once, by
hand, on the family victim -- the same chain the campaign engine later drives
fifteen thousand times.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import common

import flipscan.elfimage as elfimage
from flipscan import (
    ExecSpec,
    FlipDirection,
    RunStatus,
    TriageResult,
    classify_raw,
    run_stable,
)
from flipscan.corpus import write_tensor_file
from flipscan.harness import derive_timeout_ms, measure_baseline
from flipscan.oracles import EvalSet, OracleConfig, classifier_verdict, parse_class_predictions
from flipscan.x86 import FieldTag, MnemClass, classify_flip, linear_sweep


def main() -> None:
    family = common.get_family()
    victim = family.victim

    common.banner("1. the target executable")
    img = elfimage.load(victim.binary_path)
    text = img.text
    print(f"binary        : {victim.binary_path}")
    print(f"kind          : {img.entry_kind}")
    print(f".text section : file offset {text.offset:#x}, vaddr {text.vaddr:#x}, {text.size} bytes")
    print(f"flippable bits: {img.bit_count} ({text.size} bytes x 8)")
    print(f"text sha256   : {img.text_sha256()[:16]}...")

    common.banner("2. bits are addressed by (byte_offset, bit_index, direction)")
    # Direction is derived from the stored byte, never chosen: a 0 bit can
    # only go to 1 and vice versa, and attack hardware cares which.
    off = text.size // 2
    byte = img.text_bytes[off]
    print(f"byte at .text+{off:#x} is {byte:#04x} = {byte:08b}b")
    for bit in range(8):
        loc = elfimage.location_at(img, off, bit)
        arrow = "0->1" if loc.direction is FlipDirection.ZERO_TO_ONE else "1->0"
        print(f"  bit {bit}: stored {byte >> bit & 1}, so a flip here goes {arrow} "
              f"(tag {loc.direction.value!r})")

    common.banner("3. the instruction stream, recovered statically")
    data = img.text_bytes
    spans = linear_sweep(data)
    by_class: dict[MnemClass, int] = {}
    for span in spans:
        by_class[span.mnem_class] = by_class.get(span.mnem_class, 0) + 1
    print(f"{len(spans)} instruction spans tile all {len(data)} bytes:")
    for cls, n in sorted(by_class.items(), key=lambda kv: -kv[1]):
        print(f"  {cls.value:<12} {n:4d}")
    decoded = sum(n for cls, n in by_class.items() if cls is not MnemClass.UNDECODED)
    print(f"decoded cleanly: {decoded}/{len(spans)}")

    vec_lo, vec_hi = common.hot_window(img, width=64)
    print(f"\ndensest vector-code stretch: .text+[{vec_lo:#x}, {vec_hi:#x})")
    shown = 0
    for span in spans:
        if span.start < vec_lo:
            continue
        if shown == 6:
            break
        shown += 1
        body = data[span.start : span.end].hex()
        tags = "|".join(t.value for t in span.fields)
        print(f"  +{span.start:#06x}  {body:<22} {span.mnem_class.value:<12} [{tags}]")

    common.banner("4. one flip, applied and attributed")
    # Take the first opcode-byte bit inside that stretch: steering bytes are
    # where single flips most often change what the program computes.
    loc = None
    for span in spans:
        if span.start < vec_lo or not span.decoded:
            continue
        for i, tag in enumerate(span.fields):
            if tag is FieldTag.OPCODE:
                loc = elfimage.location_at(img, span.start + i, 3)
                break
        if loc:
            break
    assert loc is not None
    effect = classify_flip(data, loc)
    mutated = elfimage.apply_flip(img, loc)
    changed = [i for i in range(len(mutated)) if mutated[i] != img.data[i]]
    print(f"flip          : .text+{loc.byte_offset:#x} bit {loc.bit_index} ({loc.direction.value})")
    print(f"file bytes    : exactly {len(changed)} byte differs, at file offset {changed[0]:#x}")
    print(f"attribution   : {effect.mnem_class.value} instruction, {effect.field.value} field "
          f"(bucket: {effect.bucket})")
    print(f"reshaping     : length {effect.old_length} -> {effect.new_length}, "
          f"undecodable after: {effect.becomes_undecodable}")

    common.banner("5. pristine vs mutant under the watchdog")
    ds = family.victim_dataset
    eval_set = EvalSet(ds.inputs, ds.labels, family.spec.class_count)
    eval_path = os.path.join(common.CACHE_DIR, "demo01-eval.txt")
    os.makedirs(common.CACHE_DIR, exist_ok=True)
    write_tensor_file(eval_path, eval_set.inputs, eval_set.class_count)

    probe = ExecSpec(binary=victim.binary_path, argv=(eval_path,), timeout_ms=30000)
    baseline_ms = measure_baseline(probe)
    timeout_ms = derive_timeout_ms(baseline_ms)
    print(f"baseline wall : {baseline_ms:.1f} ms -> mutant deadline {timeout_ms} ms")

    clean = run_stable(ExecSpec(binary=victim.binary_path, argv=(eval_path,), timeout_ms=timeout_ms))
    preds = parse_class_predictions(clean.stdout, len(eval_set), eval_set.class_count)
    acc = float((preds == eval_set.labels).mean())
    print(f"pristine run  : {clean.status.value}, accuracy {acc:.3f} on {len(eval_set)} samples")

    mutant_path = os.path.join(common.CACHE_DIR, "demo01-mutant")
    elfimage.write_mutant(img, loc, mutant_path)
    out = run_stable(ExecSpec(binary=mutant_path, argv=(eval_path,), timeout_ms=timeout_ms))
    print(f"mutant run    : {out.status.value} "
          f"(exit={out.exit_code} signal={out.term_signal}, wall {out.wall_ms:.1f} ms)")
    mpreds = None
    if out.status is RunStatus.COMPLETED:
        mpreds = parse_class_predictions(out.stdout, len(eval_set), eval_set.class_count)
    triage = classify_raw(out, parse_ok=mpreds is not None)
    if triage is TriageResult.CRASHED:
        print("triage        : crashed -- loud failures like this are easy to detect,")
        print("                so the campaign records them but never calls them vulnerable")
    else:
        verdict = classifier_verdict(mpreds, eval_set, OracleConfig())
        print(f"triage        : survived; oracle verdict {verdict.kind.value} "
              f"(accuracy {verdict.accuracy:.3f})")
        print("                silent degradation is what the campaign hunts:")
        print("                the process exits 0 while the model's answers rot")

    print("\nnext: 02_bit_sweep_campaign.py does this for every bit in a window.")


if __name__ == "__main__":
    main()
