"""flipscan command-line entry point.

Subcommands wire the library into scriptable campaigns: corpus-build, sweep,
superbits, simulate, classify-flips, report. Exit codes are stable: 0 ok,
1 usage error, 2 bad input, 3 runtime failure. Human-readable summaries go
to stdout; machine formats only to --out files, each embedding the run
configuration for reproducibility.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import campaign, corpus, elfimage, rhsim, superbits, x86
from .oracles import EvalSet, OracleConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3

_INPUT_ERRORS = (
    elfimage.ElfFormatError,
    elfimage.OutOfRange,
    corpus.BadShape,
    corpus.ShapeMismatch,
    corpus.UnsupportedLayer,
    corpus.StructureMismatch,
    superbits.EmptyInput,
    rhsim.NoSuperbits,
    FileNotFoundError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)
_RUNTIME_ERRORS = (
    corpus.ToolchainMissing,
    corpus.BaselineMismatch,
    corpus.UnderTrained,
    campaign.BaselineFailed,
    campaign.IncompleteSweep,
)


@dataclass(frozen=True)
class GlobalConfig:
    """Run-wide knobs, serialized into every output file header."""

    workers: int = 1
    seed: int = 0
    timeout_ms: int | None = None
    delta: float = 0.15
    pin_threshold: float = 0.90
    label_change_threshold: float = 0.85
    distortion_pct: float = 0.85
    keep_artifacts: bool = False

    def oracle(self) -> OracleConfig:
        return OracleConfig(
            delta=self.delta,
            pin_threshold=self.pin_threshold,
            label_change_threshold=self.label_change_threshold,
            distortion_percentile=self.distortion_pct,
        )


class _Parser(argparse.ArgumentParser):
    # Usage problems exit 1 (argparse's default of 2 is reserved for bad input).
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_globals(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=1, help="parallel sweep workers")
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    p.add_argument("--timeout-ms", type=int, default=None, help="per-run wall deadline")
    p.add_argument("--delta", type=float, default=0.15,
                   help="random-guess slack: vulnerable iff acc <= (1/C)(1+delta)")
    p.add_argument("--pin-threshold", type=float, default=0.90,
                   help="modal-class share that upgrades to pinned")
    p.add_argument("--label-change-threshold", type=float, default=0.85)
    p.add_argument("--distortion-pct", type=float, default=0.85)
    p.add_argument("--keep-artifacts", action="store_true",
                   help="keep mutant binaries and scratch dirs")


def _globals_from(args: argparse.Namespace) -> GlobalConfig:
    return GlobalConfig(
        workers=args.workers,
        seed=args.seed,
        timeout_ms=args.timeout_ms,
        delta=args.delta,
        pin_threshold=args.pin_threshold,
        label_change_threshold=args.label_change_threshold,
        distortion_pct=args.distortion_pct,
        keep_artifacts=args.keep_artifacts,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="flipscan",
        description="Find, characterize, and exploit single-bit flips in "
        "compiled neural-network executables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus-build", help="build an executable family from a plan")
    p.add_argument("manifest", help="family plan JSON (model, config, n, seeds)")
    p.add_argument("out_dir", help="corpus output directory")
    p.add_argument("--opt-level", choices=["O0", "O3"], default=None,
                   help="override the plan's optimization level")
    p.add_argument("--vectorize", choices=["on", "off"], default=None,
                   help="override the plan's vector-ISA setting")
    p.add_argument("--runtime-dir", default=None, help="kernel-runtime kit location")
    _add_globals(p)

    p = sub.add_parser("sweep", help="sweep every .text bit of one corpus entry")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--entry", required=True, help="entry id (e.g. m00 or victim)")
    p.add_argument("--out", required=True, help="campaign log path (JSONL)")
    p.add_argument("--resume", action="store_true",
                   help="continue an interrupted campaign from --out")
    p.add_argument("--exclude-ranges", default="",
                   help="skip .text byte ranges, OFF:LEN[,OFF:LEN...]")
    _add_globals(p)

    p = sub.add_parser("superbits", help="shrinking-search superbits over a family")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="superbit set file")
    p.add_argument("--victim", default=None,
                   help="held-out entry id to score transfer against")
    p.add_argument("--order", choices=["corpus", "random"], default="corpus",
                   help="entry consumption order")
    p.add_argument("--sweep-dir", default=None,
                   help="directory for cached per-entry campaign logs")
    _add_globals(p)

    p = sub.add_parser("simulate", help="run simulated attacks with DRAM templates")
    p.add_argument("--superbits", required=True, help="superbit set file")
    p.add_argument("--corpus", required=True, help="corpus holding the victim binary")
    p.add_argument("--victim", default="victim", help="victim entry id")
    p.add_argument("--log", default=None,
                   help="campaign log of a family member: orders bits by damage")
    p.add_argument("--templates", type=int, default=17366,
                   help="template pool size (0 = synthetic full coverage)")
    p.add_argument("--zero-one-ratio", type=float, default=0.51,
                   help="fraction of templates flipping 0 to 1")
    p.add_argument("--max-attempts", type=int, default=10)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--order", choices=["damage", "offset", "random"], default="damage")
    p.add_argument("--out", default=None, help="attack trace file")
    _add_globals(p)

    p = sub.add_parser("classify-flips", help="attribute vulnerable flips to "
                       "instruction fields")
    p.add_argument("--log", required=True, help="campaign log")
    p.add_argument("--binary", required=True, help="the swept binary")
    p.add_argument("--out", default=None, help="CSV output path")
    _add_globals(p)

    p = sub.add_parser("report", help="summarize a campaign log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None, help="histogram CSV path")
    p.add_argument("--buckets", type=int, default=64)
    _add_globals(p)

    return parser


# --- subcommand bodies ------------------------------------------------------


def _load_entry(corpus_dir: str, entry_id: str):
    family = corpus.load_family(corpus_dir)
    all_entries = {e.entry_id: e for e in family.entries}
    all_entries[family.victim.entry_id] = family.victim
    if entry_id not in all_entries:
        raise KeyError(f"no entry {entry_id!r} in {corpus_dir} "
                       f"(have {sorted(all_entries)})")
    entry = all_entries[entry_id]
    ds = family.dataset_of(entry)
    return family, entry, ds


def _eval_set_for(entry, ds) -> EvalSet:
    if entry.spec.head == corpus.ARGMAX_HEAD:
        return EvalSet(ds.inputs, ds.labels, entry.spec.class_count)
    ref = corpus.predict_reference(entry.spec, entry.weights, ds.inputs)
    return EvalSet(ds.inputs, ref, entry.spec.class_count)


def cmd_corpus_build(args: argparse.Namespace, gcfg: GlobalConfig) -> int:
    with open(args.manifest) as fh:
        plan_doc = json.load(fh)
    plan = corpus.FamilyPlan.from_dict(plan_doc)
    if args.opt_level or args.vectorize:
        cfg = corpus.CompilerConfig(
            args.opt_level or plan.config.opt_level,
            (args.vectorize == "on") if args.vectorize else plan.config.vectorize,
        )
        plan = corpus.FamilyPlan(
            spec=plan.spec, config=cfg, n=plan.n, base_seed=plan.base_seed,
            dataset_size=plan.dataset_size, epochs=plan.epochs, lr=plan.lr,
        )
    family = corpus.build_family(plan, args.out_dir, runtime_dir=args.runtime_dir)
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    with open(manifest_path, "rb") as fh:
        import hashlib

        digest = hashlib.sha256(fh.read()).hexdigest()
    print(f"built {len(family.entries)} entries + victim in {args.out_dir}")
    print(f"text_sha256 {family.victim.text_sha256}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, gcfg: GlobalConfig) -> int:
    _family, entry, ds = _load_entry(args.corpus, args.entry)
    eval_set = _eval_set_for(entry, ds)
    kind = campaign.CLASSIFIER if entry.spec.head == corpus.ARGMAX_HEAD else campaign.GENERATIVE
    if not args.resume and os.path.exists(args.out):
        raise ValueError(f"{args.out} exists; pass --resume to continue it")
    target = campaign.SweepTarget(
        entry.binary_path,
        eval_set,
        oracle_cfg=gcfg.oracle(),
        kind=kind,
        timeout_ms=gcfg.timeout_ms,
        keep_artifacts=gcfg.keep_artifacts,
    )
    try:
        records = campaign.run_sweep(
            target,
            log_path=args.out,
            workers=gcfg.workers,
            exclude_ranges=campaign.parse_exclude_ranges(args.exclude_ranges),
            config_header={"global_config": asdict(gcfg), "entry_id": entry.entry_id},
            progress=True,
        )
        excluded = target.img.bit_count - len(records)
        summary = campaign.summarize(
            records, target.img.text.size, excluded_bits=excluded
        )
    finally:
        target.close()
    print(f"swept {summary.swept_bits} bits: {summary.vuln_count} vulnerable "
          f"({summary.vuln_pct:.2f}%), {summary.crash_count} crashes")
    if summary.zero_to_one_pct is not None:
        print(f"zero-to-one among vulnerable: {summary.zero_to_one_pct:.2f}%")
    print(f"log: {args.out}")
    return EXIT_OK


def _family_sweep_provider(family, gcfg: GlobalConfig, sweep_dir: str):
    """SweepProvider over a corpus family with per-entry cached logs."""

    entries = {e.entry_id: e for e in family.entries}

    class Provider:
        def __init__(self):
            self._targets: dict[str, campaign.SweepTarget] = {}

        def entry_ids(self):
            return [e.entry_id for e in family.entries]

        def _target(self, entry_id: str) -> campaign.SweepTarget:
            if entry_id not in self._targets:
                entry = entries[entry_id]
                ds = family.dataset_of(entry)
                self._targets[entry_id] = campaign.SweepTarget(
                    entry.binary_path,
                    _eval_set_for(entry, ds),
                    oracle_cfg=gcfg.oracle(),
                    timeout_ms=gcfg.timeout_ms,
                )
            return self._targets[entry_id]

        def sweep_cost(self, entry_id: str) -> int:
            return elfimage.load(entries[entry_id].binary_path).bit_count

        def full_sweep(self, entry_id: str):
            os.makedirs(sweep_dir, exist_ok=True)
            log_path = os.path.join(sweep_dir, f"{entry_id}.jsonl")
            target = self._target(entry_id)
            records = campaign.run_sweep(
                target, log_path=log_path, workers=gcfg.workers, progress=True
            )
            return campaign.vulnerable_set(records)

        def verify(self, entry_id: str, bits):
            target = self._target(entry_id)
            verdicts = campaign.verify_bits(target, sorted(bits), workers=gcfg.workers)
            return {loc for loc, v in verdicts.items() if v.is_vulnerable}

        def close(self):
            for t in self._targets.values():
                t.close()

    return Provider()


def cmd_superbits(args: argparse.Namespace, gcfg: GlobalConfig) -> int:
    family = corpus.load_family(args.corpus)
    superbits.check_same_structure(list(family.entries), family.victim.text_sha256)
    sweep_dir = args.sweep_dir or os.path.join(args.corpus, "sweeps")
    provider = _family_sweep_provider(family, gcfg, sweep_dir)
    order = provider.entry_ids()
    if args.order == "random":
        rng = np.random.default_rng(gcfg.seed)
        rng.shuffle(order)
    try:
        sbits, stats = superbits.shrink_search(provider, order)
        report = None
        if args.victim:
            _f, victim_entry, victim_ds = _load_entry(args.corpus, args.victim)
            target = campaign.SweepTarget(
                victim_entry.binary_path,
                _eval_set_for(victim_entry, victim_ds),
                oracle_cfg=gcfg.oracle(),
                timeout_ms=gcfg.timeout_ms,
            )
            try:
                verdicts = campaign.verify_bits(
                    target, sbits.ordered(), workers=gcfg.workers
                )
            finally:
                target.close()
            report = superbits.transfer_eval(sbits, args.victim, verdicts)
    finally:
        provider.close()
    superbits.save_superbits(
        args.out,
        sbits,
        entry_hashes={e.entry_id: e.text_sha256 for e in family.entries},
        extra_header={
            "global_config": asdict(gcfg),
            "executions_used": stats.executions_used,
            "executions_naive": stats.executions_naive,
            "progression": [[e, n] for e, n in stats.progression],
        },
    )
    print(f"superbits: {len(sbits)} bits after {len(sbits.provenance)} entries")
    print(f"shrink trail: {' -> '.join(str(n) for _e, n in stats.progression)}")
    print(f"executions: {stats.executions_used} used vs {stats.executions_naive} naive "
          f"({stats.executions_saved} saved)")
    if args.victim:
        frac = "n/a" if report.no_superbits else f"{report.fraction:.3f}"
        print(f"transfer fraction on {args.victim}: {frac}")
    print(f"superbit file: {args.out}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, gcfg: GlobalConfig) -> int:
    sbits, _header = superbits.load_superbits(args.superbits)
    if not sbits.bits:
        raise rhsim.NoSuperbits("superbit file holds no bits")
    _family, victim_entry, victim_ds = _load_entry(args.corpus, args.victim)

    damage: dict = {}
    if args.log:
        _h, recs = campaign.CampaignLog(args.log).read()
        damage = {
            r.loc: r.verdict.accuracy
            for r in recs.values()
            if r.verdict.is_vulnerable and r.verdict.accuracy is not None
        }
    ordered = rhsim.order_superbits(
        sbits.ordered(), damage, policy=args.order, seed=gcfg.seed
    )

    if args.templates > 0:
        pool = rhsim.generate_templates(gcfg.seed, args.templates, args.zero_one_ratio)
    else:
        pool = rhsim.full_coverage_pool()

    runs = []
    for ri in range(args.runs):
        victim = rhsim.LiveVictim(
            victim_entry.binary_path,
            _eval_set_for(victim_entry, victim_ds),
            oracle_cfg=gcfg.oracle(),
        )
        runs.append(
            rhsim.simulate_attack(
                ordered, pool, victim, seed=gcfg.seed + ri, max_attempts=args.max_attempts
            )
        )
    stats = rhsim.attack_stats(runs)
    if args.out:
        rhsim.save_trace(
            args.out,
            runs,
            header={
                "global_config": asdict(gcfg),
                "superbits": len(sbits),
                "templates": len(pool),
                "order": args.order,
            },
        )
        print(f"trace: {args.out}")
    print(f"runs {stats.runs}: success rate {stats.success_rate:.2f}, "
          f"mean flips {stats.mean_flips:.2f}, mean crashes {stats.mean_crashes:.2f}")
    if stats.single_flip_fraction is not None:
        print(f"single-flip success fraction: {stats.single_flip_fraction:.3f}")
    return EXIT_OK


def cmd_classify_flips(args: argparse.Namespace, gcfg: GlobalConfig) -> int:
    _header, recs = campaign.CampaignLog(args.log).read()
    if not recs:
        raise ValueError(f"no records in {args.log}")
    img = elfimage.load(args.binary)
    vuln = [r.loc for r in recs.values() if r.verdict.is_vulnerable]
    if not vuln:
        print("no vulnerable bits in log; nothing to classify")
        return EXIT_OK
    report = x86.flip_type_report(
        img.text_bytes, vuln, elfimage.function_symbols(img), img.text.vaddr
    )
    print(f"{len(vuln)} vulnerable flips over {report.total} attributed:")
    for i, row in enumerate(report.rows[:10], 1):
        print(f"  {i:2d}. {row.mnem_class.value:<14s} {row.bucket:<9s} "
              f"{row.count:6d}  {row.share:6.2f}%")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_csv())
        print(f"csv: {args.out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, gcfg: GlobalConfig) -> int:
    header, recs = campaign.CampaignLog(args.log).read()
    if header is None:
        raise ValueError(f"{args.log} has no campaign header")
    text_size = header["text_size"]
    excluded = text_size * 8 - len(recs)
    summary = campaign.summarize(
        list(recs.values()), text_size, buckets=args.buckets, excluded_bits=excluded
    )
    doc = summary.to_dict()
    doc["campaign_id"] = header.get("campaign_id")
    doc["binary_sha256"] = header.get("binary_sha256")
    print(json.dumps(doc, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(summary.histogram_csv())
        print(f"histogram csv: {args.out}", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "corpus-build": cmd_corpus_build,
    "sweep": cmd_sweep,
    "superbits": cmd_superbits,
    "simulate": cmd_simulate,
    "classify-flips": cmd_classify_flips,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    gcfg = _globals_from(args)
    try:
        return _COMMANDS[args.command](args, gcfg)
    except _RUNTIME_ERRORS as exc:
        print(f"flipscan: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _INPUT_ERRORS as exc:
        print(f"flipscan: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
