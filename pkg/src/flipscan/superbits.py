"""Find bits that stay vulnerable across every executable of one structure.

Executables that share a model structure and compiler config have identical
.text bytes but different trained weights, so a bit that breaks all of them
(a superbit) breaks the *code*, not any particular weight set -- and likely
breaks a victim trained on data the attacker never saw. The shrinking search
fully sweeps only the first entry and then merely re-verifies the surviving
candidates on each further entry, which costs a small fraction of sweeping
everything while provably computing the same intersection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

from .elfimage import BitLocation, FlipDirection
from .oracles import Verdict
from .corpus import StructureMismatch


class EmptyInput(ValueError):
    """Intersection of zero sets requested."""


@dataclass(frozen=True)
class SuperbitSet:
    bits: frozenset[BitLocation]
    provenance: tuple[str, ...]  # entry ids consumed, in order

    def __len__(self) -> int:
        return len(self.bits)

    def ordered(self) -> list[BitLocation]:
        return sorted(self.bits)


def intersect_naive(
    vuln_sets: list[set[BitLocation]], entry_ids: list[str] | None = None
) -> SuperbitSet:
    """Exact set intersection keyed by (byte_offset, bit_index, direction)."""
    if not vuln_sets:
        raise EmptyInput("need at least one vulnerable-bit set")
    acc = set(vuln_sets[0])
    for s in vuln_sets[1:]:
        acc &= s
    ids = tuple(entry_ids) if entry_ids else tuple(f"set{i}" for i in range(len(vuln_sets)))
    return SuperbitSet(bits=frozenset(acc), provenance=ids)


class SweepProvider(Protocol):
    """Source of per-entry vulnerability data for the shrinking search."""

    def entry_ids(self) -> list[str]: ...

    def sweep_cost(self, entry_id: str) -> int:
        """Executions a full sweep of this entry would take (= its bit count)."""
        ...

    def full_sweep(self, entry_id: str) -> set[BitLocation]:
        """All vulnerable bits of one entry (full campaign)."""
        ...

    def verify(self, entry_id: str, bits: set[BitLocation]) -> set[BitLocation]:
        """Subset of bits that are vulnerable on this entry (targeted runs)."""
        ...


@dataclass
class ShrinkStats:
    """Cost accounting and the per-step shrink trail."""

    executions_used: int = 0
    executions_naive: int = 0
    progression: list[tuple[str, int]] = field(default_factory=list)  # (entry, |S| after)
    sets_after: list[frozenset[BitLocation]] = field(default_factory=list)

    @property
    def executions_saved(self) -> int:
        return self.executions_naive - self.executions_used


def shrink_search(
    provider: SweepProvider, entry_order: list[str] | None = None
) -> tuple[SuperbitSet, ShrinkStats]:
    """Interleaved shrinking intersection over a family of executables.

    Entry 1 is swept in full; every later entry only re-verifies the current
    candidate set and drops bits that are not vulnerable there (a crash there
    also drops the bit -- superbits must stay silent in every family member).
    Equals intersect_naive over per-entry full sweeps; exits early once empty.
    """
    ids = entry_order if entry_order is not None else provider.entry_ids()
    if not ids:
        raise EmptyInput("need at least one entry")
    stats = ShrinkStats()
    stats.executions_naive = sum(provider.sweep_cost(e) for e in ids)

    first = ids[0]
    current = set(provider.full_sweep(first))
    stats.executions_used += provider.sweep_cost(first)
    consumed = [first]
    stats.progression.append((first, len(current)))
    stats.sets_after.append(frozenset(current))

    for entry_id in ids[1:]:
        if not current:
            break  # intersection can only stay empty
        candidates = len(current)
        current &= provider.verify(entry_id, current)
        stats.executions_used += candidates
        consumed.append(entry_id)
        stats.progression.append((entry_id, len(current)))
        stats.sets_after.append(frozenset(current))

    return SuperbitSet(bits=frozenset(current), provenance=tuple(consumed)), stats


@dataclass(frozen=True)
class TransferReport:
    """How the family's superbits fare on a held-out victim."""

    fraction: float | None          # None when there were no superbits
    no_superbits: bool
    vulnerable: tuple[BitLocation, ...]
    verdicts: dict[BitLocation, Verdict]

    @property
    def tried(self) -> int:
        return len(self.verdicts)


def transfer_eval(
    superbits: SuperbitSet,
    victim_id: str,
    victim_verdicts: dict[BitLocation, Verdict],
) -> TransferReport:
    """Score superbits against per-bit victim verdicts.

    The caller obtains victim_verdicts from a verification pass on the victim
    (campaign.verify_bits); this stays a pure function over them. The victim
    must not be part of the family the superbits came from.
    """
    if victim_id in superbits.provenance:
        raise StructureMismatch(f"victim {victim_id!r} is part of the superbit family")
    if not superbits.bits:
        return TransferReport(fraction=None, no_superbits=True, vulnerable=(), verdicts={})
    missing = superbits.bits - set(victim_verdicts)
    if missing:
        raise ValueError(f"verdicts missing for {len(missing)} superbits")
    hits = tuple(
        sorted(loc for loc in superbits.bits if victim_verdicts[loc].is_vulnerable)
    )
    return TransferReport(
        fraction=len(hits) / len(superbits.bits),
        no_superbits=False,
        vulnerable=hits,
        verdicts={loc: victim_verdicts[loc] for loc in superbits.bits},
    )


def check_same_structure(
    entries: list, text_sha256: str | None = None
) -> str:
    """Assert identical (structure, config, text) across entries; returns text hash."""
    keys = {e.structure_key() for e in entries}
    if len(keys) > 1:
        raise StructureMismatch(f"mixed model/config in family: {sorted(keys)}")
    texts = {e.text_sha256 for e in entries}
    if text_sha256 is not None:
        texts.add(text_sha256)
    if len(texts) > 1:
        raise StructureMismatch(f".text differs across family: {sorted(texts)}")
    return texts.pop()


# --- serialization ----------------------------------------------------------


def save_superbits(
    path: str,
    superbits: SuperbitSet,
    entry_hashes: dict[str, str] | None = None,
    extra_header: dict | None = None,
) -> str:
    """Write the campaign-log record format restricted to member bits."""
    with open(path, "w") as fh:
        header = {
            "kind": "superbits-header",
            "count": len(superbits),
            "provenance": list(superbits.provenance),
            "entry_hashes": entry_hashes or {},
            **(extra_header or {}),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for loc in superbits.ordered():
            fh.write(
                json.dumps(
                    {
                        "byte_offset": loc.byte_offset,
                        "bit_index": loc.bit_index,
                        "direction": loc.direction.value,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def load_superbits(path: str) -> tuple[SuperbitSet, dict]:
    header: dict = {}
    bits: set[BitLocation] = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if doc.get("kind") == "superbits-header":
                header = doc
                continue
            bits.add(
                BitLocation(
                    doc["byte_offset"], doc["bit_index"], FlipDirection(doc["direction"])
                )
            )
    return (
        SuperbitSet(bits=frozenset(bits), provenance=tuple(header.get("provenance", ()))),
        header,
    )
