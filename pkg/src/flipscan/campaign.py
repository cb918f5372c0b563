"""Sweep every .text bit of one executable and keep the books.

A campaign flips each bit in turn, runs the mutant under the harness, asks
the oracles for a verdict, and appends one self-describing JSON line per bit
to an append-only log. Interrupted campaigns resume from the log without
re-executing recorded locations. Summaries (totals, flip-direction split,
per-class pins, a 64-bucket spatial histogram) are pure folds over the
records, so recomputing from the log always reproduces them.
"""

from __future__ import annotations

import json
import os
import tempfile
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import elfimage
from .elfimage import BitLocation, ElfImage, FlipDirection
from .harness import (
    DEFAULT_MEMORY_CAP,
    ExecSpec,
    MutantWorkspace,
    RawOutcome,
    RunStatus,
    TriageResult,
    classify_raw,
    derive_timeout_ms,
    measure_baseline,
    run_once,
    run_stable,
)
from .oracles import (
    CRASH_VERDICT,
    EvalSet,
    OracleConfig,
    Verdict,
    VerdictKind,
    classifier_verdict,
    distortion_score,
    DistortionHistory,
    generative_verdict,
    parse_class_predictions,
    parse_vector_predictions,
)
from .corpus import write_tensor_file

CLASSIFIER = "classifier"
GENERATIVE = "generative"

DEFAULT_FAST_SAMPLES = 32
DEFAULT_BUCKETS = 64
CHUNK_BITS = 256


class BaselineFailed(RuntimeError):
    """Unmutated binary crashes or scores no better than random guessing."""


class IncompleteSweep(RuntimeError):
    """Summary requested over fewer records than enumerated bits."""


def status_code(out: RawOutcome) -> str:
    """Compact per-run status: ok / exit:N / sig:N / timeout / launch."""
    if out.status is RunStatus.COMPLETED:
        return "ok"
    if out.status is RunStatus.EXITED_ERROR:
        return f"exit:{out.exit_code}"
    if out.status is RunStatus.SIGNALED:
        return f"sig:{out.term_signal}"
    if out.status is RunStatus.TIMED_OUT:
        return "timeout"
    return "launch"


@dataclass(frozen=True)
class SweepRecord:
    loc: BitLocation
    verdict: Verdict
    raw_status: str
    wall_ms: float

    def key(self) -> tuple[int, int]:
        return (self.loc.byte_offset, self.loc.bit_index)


def record_to_json(rec: SweepRecord, campaign_id: str, binary_sha256: str) -> dict:
    v = rec.verdict
    return {
        "campaign_id": campaign_id,
        "binary_sha256": binary_sha256,
        "byte_offset": rec.loc.byte_offset,
        "bit_index": rec.loc.bit_index,
        "direction": rec.loc.direction.value,
        "status": rec.raw_status,
        "verdict_kind": v.kind.value,
        "pinned_class": v.pinned_class if v.pinned_class is not None else -1,
        "accuracy": v.accuracy,
        "pin_fraction": v.pin_fraction,
        "distortion": v.distortion,
        "wall_ms": round(rec.wall_ms, 3),
    }


def record_from_json(doc: dict) -> SweepRecord:
    loc = BitLocation(
        doc["byte_offset"], doc["bit_index"], FlipDirection(doc["direction"])
    )
    kind = VerdictKind(doc["verdict_kind"])
    pinned = doc.get("pinned_class", -1)
    verdict = Verdict(
        kind=kind,
        accuracy=doc.get("accuracy"),
        pin_fraction=doc.get("pin_fraction"),
        pinned_class=None if pinned in (-1, None) else pinned,
        distortion=doc.get("distortion"),
    )
    return SweepRecord(
        loc=loc, verdict=verdict, raw_status=doc["status"], wall_ms=doc.get("wall_ms", 0.0)
    )


class CampaignLog:
    """Append-only JSONL: one header line, then one record line per flip."""

    def __init__(self, path: str):
        self.path = path

    def exists(self) -> bool:
        return os.path.exists(self.path)

    def read(self) -> tuple[dict | None, dict[tuple[int, int], SweepRecord]]:
        header: dict | None = None
        records: dict[tuple[int, int], SweepRecord] = {}
        if not self.exists():
            return header, records
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                if doc.get("kind") == "header":
                    header = doc
                    continue
                rec = record_from_json(doc)
                records[rec.key()] = rec
        return header, records

    def write_header(self, doc: dict) -> None:
        doc = {**doc, "kind": "header"}  # marker key must win any collision
        with open(self.path, "a") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")

    def append(self, rec: SweepRecord, campaign_id: str, binary_sha256: str) -> None:
        with open(self.path, "a") as fh:
            fh.write(
                json.dumps(record_to_json(rec, campaign_id, binary_sha256), sort_keys=True)
                + "\n"
            )


class SweepTarget:
    """One binary + eval set + oracle bound together for a campaign.

    Owns the tensor files, the measured baseline, and the derived timeout.
    evaluate() produces the final record for one bit: crash short-circuits,
    classifier bits pass a reduced-sample fast filter and only confirmed
    candidates pay for a full evaluation.
    """

    def __init__(
        self,
        binary_path: str,
        eval_set: EvalSet,
        oracle_cfg: OracleConfig = OracleConfig(),
        kind: str = CLASSIFIER,
        workdir: str | None = None,
        timeout_ms: int | None = None,
        memory_cap: int = DEFAULT_MEMORY_CAP,
        fast_samples: int = DEFAULT_FAST_SAMPLES,
        keep_artifacts: bool = False,
        baseline_runs: int = 3,
    ):
        if kind not in (CLASSIFIER, GENERATIVE):
            raise ValueError(f"unknown sweep kind {kind!r}")
        self.kind = kind
        self.oracle_cfg = oracle_cfg
        self.eval_set = eval_set
        self.img: ElfImage = elfimage.load(binary_path)
        self._own_workdir = workdir is None
        self.workdir = workdir or tempfile.mkdtemp(prefix="flipscan-sweep-")
        os.makedirs(self.workdir, exist_ok=True)
        self.workspace = MutantWorkspace(
            os.path.join(self.workdir, "mutants"), keep_artifacts=keep_artifacts
        )

        self.full_eval_path = os.path.join(self.workdir, "eval-full.txt")
        write_tensor_file(self.full_eval_path, eval_set.inputs, eval_set.class_count)
        self.fast_set = eval_set.take(fast_samples)
        self.fast_eval_path = os.path.join(self.workdir, "eval-fast.txt")
        write_tensor_file(self.fast_eval_path, self.fast_set.inputs, eval_set.class_count)

        self.history = DistortionHistory()
        self._check_baseline(binary_path, timeout_ms, memory_cap, baseline_runs)

    def _check_baseline(
        self, binary_path: str, timeout_ms: int | None, memory_cap: int, runs: int
    ) -> None:
        probe = ExecSpec(
            binary=binary_path,
            argv=(self.full_eval_path,),
            timeout_ms=timeout_ms or 60000,
            memory_cap=memory_cap,
        )
        try:
            baseline_ms = measure_baseline(probe, runs=runs)
        except RuntimeError as exc:
            raise BaselineFailed(str(exc)) from exc
        out = run_once(probe)
        if out.status is not RunStatus.COMPLETED:
            raise BaselineFailed(f"baseline run ended {out.status.value}")
        n = len(self.eval_set)
        if self.kind == CLASSIFIER:
            preds = parse_class_predictions(out.stdout, n, self.eval_set.class_count)
            if preds is None:
                raise BaselineFailed("baseline stdout unparseable")
            acc = float(np.mean(preds == self.eval_set.labels))
            # Verdicts are meaningless unless the clean model clearly beats chance.
            if acc <= 2.0 / self.eval_set.class_count:
                raise BaselineFailed(
                    f"baseline accuracy {acc:.3f} <= 2x random guess "
                    f"({2.0 / self.eval_set.class_count:.3f})"
                )
            self.baseline_accuracy = acc
        else:
            outputs = parse_vector_predictions(out.stdout, n, self.eval_set.class_count)
            if outputs is None:
                raise BaselineFailed("baseline stdout unparseable")
            ref = np.asarray(self.eval_set.labels, dtype=np.float32)
            if distortion_score(outputs, ref) != 0.0:
                raise BaselineFailed("baseline generative outputs differ from reference")
            self.baseline_accuracy = None
        self.spec = ExecSpec(
            binary=binary_path,
            argv=(self.full_eval_path,),
            timeout_ms=timeout_ms or derive_timeout_ms(baseline_ms),
            memory_cap=memory_cap,
        )
        self.baseline_ms = baseline_ms

    # -- single-bit evaluation ----------------------------------------------

    def _run_mutant(self, loc: BitLocation, eval_path: str) -> RawOutcome:
        tag = f"{loc.byte_offset:06x}-{loc.bit_index}"
        path = self.workspace.next_path(tag)
        elfimage.write_mutant(self.img, loc, path)
        try:
            return run_stable(
                ExecSpec(
                    binary=path,
                    argv=(eval_path,),
                    timeout_ms=self.spec.timeout_ms,
                    memory_cap=self.spec.memory_cap,
                )
            )
        finally:
            self.workspace.discard(path)

    def _classifier_verdict(self, out: RawOutcome, eval_set: EvalSet) -> Verdict | None:
        """None means crash/malformed; otherwise the oracle verdict."""
        preds = None
        if out.status is RunStatus.COMPLETED:
            preds = parse_class_predictions(out.stdout, len(eval_set), eval_set.class_count)
        if classify_raw(out, parse_ok=preds is not None) is TriageResult.CRASHED:
            return None
        return classifier_verdict(preds, eval_set, self.oracle_cfg)

    def evaluate(self, loc: BitLocation) -> SweepRecord:
        if self.kind == CLASSIFIER:
            return self._evaluate_classifier(loc)
        return self._evaluate_generative(loc)

    def _evaluate_classifier(self, loc: BitLocation) -> SweepRecord:
        fast_out = self._run_mutant(loc, self.fast_eval_path)
        wall = fast_out.wall_ms
        fast_verdict = self._classifier_verdict(fast_out, self.fast_set)
        if fast_verdict is None:
            return SweepRecord(loc, CRASH_VERDICT, status_code(fast_out), wall)
        if not fast_verdict.is_vulnerable:
            return SweepRecord(loc, fast_verdict, status_code(fast_out), wall)
        # Fast filter flagged a candidate: confirm on the full set.
        full_out = self._run_mutant(loc, self.full_eval_path)
        wall += full_out.wall_ms
        full_verdict = self._classifier_verdict(full_out, self.eval_set)
        if full_verdict is None:
            return SweepRecord(loc, CRASH_VERDICT, status_code(full_out), wall)
        return SweepRecord(loc, full_verdict, status_code(full_out), wall)

    def _evaluate_generative(self, loc: BitLocation) -> SweepRecord:
        out = self._run_mutant(loc, self.full_eval_path)
        outputs = None
        if out.status is RunStatus.COMPLETED:
            outputs = parse_vector_predictions(
                out.stdout, len(self.eval_set), self.eval_set.class_count
            )
        if classify_raw(out, parse_ok=outputs is not None) is TriageResult.CRASHED:
            return SweepRecord(loc, CRASH_VERDICT, status_code(out), out.wall_ms)
        verdict = generative_verdict(
            outputs,
            self.eval_set,
            self.history,
            label_fn=lambda v: int(np.argmax(v)),
            cfg=self.oracle_cfg,
        )
        self.history.add(verdict.distortion)
        return SweepRecord(loc, verdict, status_code(out), out.wall_ms)

    def evaluate_full_only(self, loc: BitLocation) -> SweepRecord:
        """Verification path: skip the fast filter, judge on the full set."""
        if self.kind == GENERATIVE:
            return self._evaluate_generative(loc)
        out = self._run_mutant(loc, self.full_eval_path)
        verdict = self._classifier_verdict(out, self.eval_set)
        if verdict is None:
            return SweepRecord(loc, CRASH_VERDICT, status_code(out), out.wall_ms)
        return SweepRecord(loc, verdict, status_code(out), out.wall_ms)

    def close(self) -> None:
        if self._own_workdir and not self.workspace.keep_artifacts:
            import shutil

            shutil.rmtree(self.workdir, ignore_errors=True)


def parse_exclude_ranges(text: str) -> list[tuple[int, int]]:
    """Parse OFF:LEN[,OFF:LEN...] (.text-relative byte ranges)."""
    ranges = []
    if not text:
        return ranges
    for part in text.split(","):
        off_s, len_s = part.split(":")
        off, length = int(off_s, 0), int(len_s, 0)
        if off < 0 or length <= 0:
            raise ValueError(f"bad exclude range {part!r}")
        ranges.append((off, off + length))
    return ranges


def _excluded(byte_offset: int, ranges: list[tuple[int, int]]) -> bool:
    return any(lo <= byte_offset < hi for lo, hi in ranges)


def run_sweep(
    target: SweepTarget,
    log_path: str | None = None,
    workers: int = 1,
    exclude_ranges: list[tuple[int, int]] | None = None,
    config_header: dict | None = None,
    progress: bool = False,
) -> list[SweepRecord]:
    """Sweep all (non-excluded) .text bits; resume from log_path when present.

    Workers claim contiguous chunks of 256 bits; a single writer appends
    records as chunks complete. Every enumerated location ends up with
    exactly one record, already-logged locations are never re-executed.
    """
    exclude_ranges = exclude_ranges or []
    log = CampaignLog(log_path) if log_path else None
    campaign_id = uuid.uuid4().hex[:12]
    binary_sha = target.img.file_sha256()
    done: dict[tuple[int, int], SweepRecord] = {}

    if log is not None and log.exists():
        header, done = log.read()
        if header is not None:
            if header.get("binary_sha256") not in (None, binary_sha):
                raise ValueError(
                    "resume log belongs to a different binary "
                    f"({header.get('binary_sha256')[:12]}... vs {binary_sha[:12]}...)"
                )
            campaign_id = header.get("campaign_id", campaign_id)
    elif log is not None:
        log.write_header(
            {
                "campaign_id": campaign_id,
                "binary_sha256": binary_sha,
                "text_sha256": target.img.text_sha256(),
                "text_size": target.img.text.size,
                "target_kind": target.kind,
                "baseline_accuracy": target.baseline_accuracy,
                "timeout_ms": target.spec.timeout_ms,
                "fast_samples": len(target.fast_set),
                "eval_size": len(target.eval_set),
                "excluded_ranges": [list(r) for r in exclude_ranges],
                "oracle": {
                    "delta": target.oracle_cfg.delta,
                    "pin_threshold": target.oracle_cfg.pin_threshold,
                    "label_change_threshold": target.oracle_cfg.label_change_threshold,
                    "distortion_percentile": target.oracle_cfg.distortion_percentile,
                    "warmup_flips": target.oracle_cfg.warmup_flips,
                },
                **(config_header or {}),
            }
        )

    if target.kind == GENERATIVE and done:
        # Resume must restore the streaming distortion history in log order,
        # or post-resume percentile verdicts would restart from scratch.
        for rec in done.values():
            if rec.verdict.kind is not VerdictKind.CRASH and rec.verdict.distortion is not None:
                target.history.add(rec.verdict.distortion)

    todo = [
        loc
        for loc in elfimage.enumerate_bits(target.img)
        if (loc.byte_offset, loc.bit_index) not in done
        and not _excluded(loc.byte_offset, exclude_ranges)
    ]
    results: list[SweepRecord] = list(done.values())

    def work_chunk(chunk: list[BitLocation]) -> list[SweepRecord]:
        return [target.evaluate(loc) for loc in chunk]

    chunks = [todo[i : i + CHUNK_BITS] for i in range(0, len(todo), CHUNK_BITS)]
    completed = 0
    if workers <= 1:
        for chunk in chunks:
            recs = work_chunk(chunk)
            for rec in recs:
                if log is not None:
                    log.append(rec, campaign_id, binary_sha)
                results.append(rec)
            completed += len(chunk)
            if progress:
                print(f"  swept {completed}/{len(todo)} bits", flush=True)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for recs in pool.map(work_chunk, chunks):
                for rec in recs:
                    if log is not None:
                        log.append(rec, campaign_id, binary_sha)
                    results.append(rec)
                completed += len(recs)
                if progress:
                    print(f"  swept {completed}/{len(todo)} bits", flush=True)

    if target.kind == GENERATIVE:
        results = _rescore_warmup(target, results, log, campaign_id, binary_sha)

    results.sort(key=lambda r: r.key())
    return results


def _rescore_warmup(
    target: SweepTarget,
    results: list[SweepRecord],
    log: "CampaignLog | None",
    campaign_id: str,
    binary_sha: str,
) -> list[SweepRecord]:
    """Re-judge the flips that filled the distortion warm-up window.

    Streaming percentile verdicts only begin once warmup_flips scores exist,
    so the earliest scored flips were judged on label change alone. Once the
    sweep ends (and only if it warmed up at all), their recorded distortions
    are compared against the percentile of the complete history; upgrades are
    appended to the log as corrected records (the reader keeps the latest
    record per location).
    """
    cfg = target.oracle_cfg
    if len(target.history) < cfg.warmup_flips:
        return results
    cutoff = target.history.percentile(cfg.distortion_percentile)
    scored = 0
    out: list[SweepRecord] = []
    for rec in results:  # append order: resumed records first, then new ones
        if scored >= cfg.warmup_flips:
            out.append(rec)
            continue
        if rec.verdict.kind is VerdictKind.CRASH or rec.verdict.distortion is None:
            out.append(rec)
            continue
        scored += 1
        if rec.verdict.kind is VerdictKind.NO_EFFECT and rec.verdict.distortion > cutoff:
            rec = SweepRecord(
                loc=rec.loc,
                verdict=replace(rec.verdict, kind=VerdictKind.VULNERABLE),
                raw_status=rec.raw_status,
                wall_ms=rec.wall_ms,
            )
            if log is not None:
                log.append(rec, campaign_id, binary_sha)
        out.append(rec)
    return out


def verify_bits(
    target: SweepTarget, locs: list[BitLocation], workers: int = 1
) -> dict[BitLocation, Verdict]:
    """Full-eval verdicts for just these locations; order-independent."""
    if not locs:
        return {}
    if workers <= 1:
        return {loc: target.evaluate_full_only(loc).verdict for loc in locs}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        verdicts = pool.map(lambda loc: target.evaluate_full_only(loc).verdict, locs)
        return dict(zip(locs, verdicts))


# --- summaries --------------------------------------------------------------


@dataclass(frozen=True)
class HistogramBucket:
    byte_start: int
    byte_end: int
    vuln_count: int
    density: float  # vulnerable bits / total bits in the bucket


@dataclass(frozen=True)
class CampaignSummary:
    total_bits: int
    swept_bits: int
    excluded_bits: int
    vuln_count: int
    vuln_pct: float
    zero_to_one_pct: float | None  # among vulnerable bits; None when none
    crash_count: int
    per_class_pin_counts: dict[int, int]
    histogram: tuple[HistogramBucket, ...]

    def to_dict(self) -> dict:
        return {
            "total_bits": self.total_bits,
            "swept_bits": self.swept_bits,
            "excluded_bits": self.excluded_bits,
            "vuln_count": self.vuln_count,
            "vuln_pct": self.vuln_pct,
            "zero_to_one_pct": self.zero_to_one_pct,
            "crash_count": self.crash_count,
            "per_class_pin_counts": {str(k): v for k, v in sorted(self.per_class_pin_counts.items())},
            "histogram": [
                [b.byte_start, b.byte_end, b.vuln_count, b.density] for b in self.histogram
            ],
        }

    def histogram_csv(self) -> str:
        lines = ["bucket_start,bucket_end,vuln_count,density"]
        for b in self.histogram:
            lines.append(f"{b.byte_start},{b.byte_end},{b.vuln_count},{b.density:.6f}")
        return "\n".join(lines) + "\n"


def summarize(
    records: list[SweepRecord],
    text_size: int,
    buckets: int = DEFAULT_BUCKETS,
    excluded_bits: int = 0,
) -> CampaignSummary:
    """Pure fold over the records; raises IncompleteSweep on missing bits."""
    total_bits = text_size * 8
    if len(records) != total_bits - excluded_bits:
        raise IncompleteSweep(
            f"{len(records)} records for {total_bits - excluded_bits} expected bits"
        )
    keys = {r.key() for r in records}
    if len(keys) != len(records):
        raise IncompleteSweep("duplicate (byte_offset, bit_index) records")

    vuln = [r for r in records if r.verdict.is_vulnerable]
    crash = [r for r in records if r.verdict.kind is VerdictKind.CRASH]
    zero_to_one = sum(1 for r in vuln if r.loc.direction is FlipDirection.ZERO_TO_ONE)

    pins: dict[int, int] = {}
    for r in vuln:
        if r.verdict.kind is VerdictKind.VULNERABLE_PINNED:
            pins[r.verdict.pinned_class] = pins.get(r.verdict.pinned_class, 0) + 1

    buckets = max(1, min(buckets, text_size))
    edges = np.linspace(0, text_size, buckets + 1, dtype=np.int64)
    hist: list[HistogramBucket] = []
    for bi in range(buckets):
        lo, hi = int(edges[bi]), int(edges[bi + 1])
        count = sum(1 for r in vuln if lo <= r.loc.byte_offset < hi)
        bits_here = (hi - lo) * 8
        hist.append(
            HistogramBucket(lo, hi, count, count / bits_here if bits_here else 0.0)
        )

    return CampaignSummary(
        total_bits=total_bits,
        swept_bits=len(records),
        excluded_bits=excluded_bits,
        vuln_count=len(vuln),
        vuln_pct=100.0 * len(vuln) / total_bits if total_bits else 0.0,
        zero_to_one_pct=100.0 * zero_to_one / len(vuln) if vuln else None,
        crash_count=len(crash),
        per_class_pin_counts=pins,
        histogram=tuple(hist),
    )


def vulnerable_set(records: list[SweepRecord]) -> set[BitLocation]:
    return {r.loc for r in records if r.verdict.is_vulnerable}
