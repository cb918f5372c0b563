"""Attack simulator: template pools, page constraint, crash semantics, stats."""

from __future__ import annotations

import numpy as np
import pytest

from flipscan.elfimage import BitLocation, FlipDirection
from flipscan.rhsim import (
    Attempt,
    AttackRun,
    MemoryTemplate,
    NoSuperbits,
    Outcome,
    PAGE_SIZE,
    StubVictim,
    TemplatePool,
    attack_stats,
    full_coverage_pool,
    generate_templates,
    order_superbits,
    save_trace,
    simulate_attack,
)

Z2O = FlipDirection.ZERO_TO_ONE
O2Z = FlipDirection.ONE_TO_ZERO


def bit(byte_offset: int, bit_index: int = 0, direction=Z2O) -> BitLocation:
    return BitLocation(byte_offset, bit_index, direction)


def distinct_pages(n: int) -> list[BitLocation]:
    """n bits on n distinct pages with n distinct in-page offsets."""
    return [bit(i * (PAGE_SIZE + 1)) for i in range(n)]


def single_template_pool(*templates: MemoryTemplate) -> TemplatePool:
    return TemplatePool(
        templates=templates, seed=None, count=len(templates), zero_to_one_ratio=None
    )


class TestTemplateGeneration:
    def test_deterministic_per_seed(self):
        a = generate_templates(7, 500, 0.5)
        b = generate_templates(7, 500, 0.5)
        assert a.templates == b.templates
        c = generate_templates(8, 500, 0.5)
        assert a.templates != c.templates

    def test_count_and_bounds(self):
        pool = generate_templates(3, 1000, 0.6)
        assert len(pool) == 1000 and pool.count == 1000
        for t in pool.templates:
            assert 0 <= t.offset_in_page < PAGE_SIZE
            assert 0 <= t.bit_index < 8

    def test_each_template_on_its_own_frame(self):
        pool = generate_templates(3, 200, 0.5)
        frames = [t.page_frame for t in pool.templates]
        assert len(set(frames)) == len(frames)

    def test_direction_ratio_tracks_parameter(self):
        n, ratio = 20_000, 0.51
        pool = generate_templates(123, n, ratio)
        got = pool.zero_to_one_count()
        sigma = (n * ratio * (1 - ratio)) ** 0.5
        assert abs(got - n * ratio) <= 4 * sigma

    @pytest.mark.parametrize("ratio", [0.0, 1.0])
    def test_degenerate_ratios(self, ratio):
        pool = generate_templates(1, 64, ratio)
        expect = 64 if ratio == 1.0 else 0
        assert pool.zero_to_one_count() == expect

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError):
            generate_templates(0, 10, 1.5)

    def test_index_groups_by_key(self):
        pool = generate_templates(5, 300, 0.5)
        idx = pool.index()
        assert sum(len(v) for v in idx.values()) == 300
        for key, ids in idx.items():
            assert ids == sorted(ids)
            for i in ids:
                assert pool.templates[i].key() == key


class TestFullCoveragePool:
    def test_covers_every_key_once(self):
        pool = full_coverage_pool()
        assert len(pool) == PAGE_SIZE * 8 * 2
        idx = pool.index()
        assert len(idx) == PAGE_SIZE * 8 * 2
        assert all(len(ids) == 1 for ids in idx.values())

    def test_copies(self):
        pool = full_coverage_pool(copies=2)
        assert len(pool) == PAGE_SIZE * 8 * 2 * 2
        assert all(len(ids) == 2 for ids in pool.index().values())


class TestSimulateAttack:
    def test_empty_superbits_raises(self):
        with pytest.raises(NoSuperbits):
            simulate_attack([], full_coverage_pool(), StubVictim(1.0))

    def test_success_stops_immediately(self):
        run = simulate_attack(distinct_pages(3),
                              full_coverage_pool(), StubVictim(1.0))
        assert run.succeeded
        assert run.flips_attempted == 1
        assert [a.outcome for a in run.attempts] == [Outcome.SUCCESS]

    def test_no_template_consumes_nothing(self):
        # Pool only matches in-page offset 5; the first superbit sits at 0.
        pool = single_template_pool(MemoryTemplate(0, 5, 0, Z2O))
        run = simulate_attack([bit(0), bit(5)], pool, StubVictim(1.0))
        assert [a.outcome for a in run.attempts] == \
               [Outcome.NO_TEMPLATE, Outcome.SUCCESS]
        assert run.flips_attempted == 1
        assert run.attempts[0].template_id is None

    def test_direction_must_match_template(self):
        pool = single_template_pool(MemoryTemplate(0, 0, 0, O2Z))
        run = simulate_attack([bit(0, 0, Z2O)], pool, StubVictim(1.0))
        assert [a.outcome for a in run.attempts] == [Outcome.NO_TEMPLATE]

    def test_one_flip_per_page_per_lifetime(self):
        # Two bits on page 0; the victim survives the first (no change), so
        # the second is blocked. A third bit on page 1 still proceeds.
        victim = StubVictim(0.0)
        run = simulate_attack([bit(0), bit(1), bit(PAGE_SIZE + 2)],
                              full_coverage_pool(), victim)
        assert [a.outcome for a in run.attempts] == [
            Outcome.NO_CHANGE, Outcome.PAGE_ALREADY_FLIPPED, Outcome.NO_CHANGE,
        ]
        assert run.flips_attempted == 2
        assert run.attempts[1].template_id is None  # blocked: nothing consumed

    def test_crash_resets_pages(self):
        # Every flip crashes the victim; page state clears each time, so the
        # second bit on page 0 is attempted rather than blocked.
        victim = StubVictim(0.0, crash_prob=1.0)
        run = simulate_attack([bit(0), bit(1)], full_coverage_pool(), victim)
        assert [a.outcome for a in run.attempts] == [Outcome.CRASH, Outcome.CRASH]
        assert run.crashes == 2 and run.flips_attempted == 2
        assert not run.succeeded

    def test_crash_does_not_restore_templates(self):
        # Two bits share one (offset, bit, direction) key on different pages;
        # the pool holds exactly one matching cell. After the crash wipes the
        # page state, the template is still gone.
        pool = single_template_pool(MemoryTemplate(0, 5, 3, Z2O))
        superbits = [bit(5, 3), bit(5 + PAGE_SIZE, 3)]
        run = simulate_attack(superbits, pool, StubVictim(0.0, crash_prob=1.0))
        assert [a.outcome for a in run.attempts] == \
               [Outcome.CRASH, Outcome.NO_TEMPLATE]
        assert run.flips_attempted == 1

    def test_page_blocked_template_survives_for_later_bit(self):
        # bit(1) is page-blocked and must NOT consume its template: bit(1+PAGE)
        # shares the same key and needs that exact cell.
        pool = single_template_pool(
            MemoryTemplate(0, 0, 0, Z2O), MemoryTemplate(1, 1, 0, Z2O),
        )
        superbits = [bit(0), bit(1), bit(1 + PAGE_SIZE)]
        run = simulate_attack(superbits, pool, StubVictim(0.0))
        assert [a.outcome for a in run.attempts] == [
            Outcome.NO_CHANGE, Outcome.PAGE_ALREADY_FLIPPED, Outcome.NO_CHANGE,
        ]

    def test_max_attempts_caps_flips(self):
        superbits = distinct_pages(50)
        run = simulate_attack(superbits, full_coverage_pool(), StubVictim(0.0),
                              max_attempts=10)
        assert run.flips_attempted == 10
        assert len(run.attempts) == 10
        assert not run.succeeded

    def test_deterministic_per_seed(self):
        superbits = distinct_pages(32)
        runs = [
            simulate_attack(superbits, full_coverage_pool(),
                            StubVictim(0.3, crash_prob=0.1), seed=42)
            for _ in range(2)
        ]
        assert runs[0] == runs[1]

    def test_flipped_attempts_excludes_non_flips(self):
        pool = single_template_pool(MemoryTemplate(0, 0, 0, Z2O))
        run = simulate_attack([bit(0), bit(PAGE_SIZE)], pool, StubVictim(0.0))
        flipped = run.flipped_attempts()
        assert len(flipped) == 1 and flipped[0].bit == bit(0)

    def test_consumption_is_per_run(self):
        # Each simulate_attack call starts from a fresh pool state: template
        # consumption in one Monte Carlo run must not leak into the next.
        pool = single_template_pool(MemoryTemplate(0, 0, 0, Z2O))
        for _ in range(3):
            run = simulate_attack([bit(0)], pool, StubVictim(1.0))
            assert run.succeeded

    def test_stub_mean_flips_tracks_geometric_law(self):
        p = 0.5
        superbits = distinct_pages(64)
        pool = full_coverage_pool()
        runs = [
            simulate_attack(superbits, pool, StubVictim(p), seed=s)
            for s in range(2000)
        ]
        assert all(r.succeeded for r in runs)
        mean = float(np.mean([r.flips_attempted for r in runs]))
        se = ((1 - p) / p**2 / len(runs)) ** 0.5
        assert abs(mean - 1 / p) <= 3 * se


class TestAttackStats:
    def _run(self, flips, crashes=0, succeeded=True):
        return AttackRun(attempts=(), flips_attempted=flips, crashes=crashes,
                         succeeded=succeeded, seed=0)

    def test_mean_flips(self):
        runs = [self._run(f) for f in (1, 1, 2, 1, 2)]
        stats = attack_stats(runs)
        assert stats.mean_flips == pytest.approx(1.4)
        assert stats.runs == 5
        assert stats.success_rate == 1.0
        assert stats.single_flip_fraction == pytest.approx(3 / 5)

    def test_crashes_and_failures(self):
        runs = [self._run(3, crashes=2, succeeded=False), self._run(1)]
        stats = attack_stats(runs)
        assert stats.mean_crashes == pytest.approx(1.0)
        assert stats.success_rate == 0.5
        assert stats.single_flip_fraction == 1.0  # among the one success

    def test_no_successes(self):
        stats = attack_stats([self._run(4, succeeded=False)])
        assert stats.single_flip_fraction is None
        assert stats.success_rate == 0.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            attack_stats([])

    def test_to_dict_keys(self):
        doc = attack_stats([self._run(1)]).to_dict()
        assert set(doc) == {"runs", "mean_flips", "mean_crashes",
                            "success_rate", "single_flip_fraction"}


class TestOrdering:
    BITS = [bit(30), bit(10), bit(20)]

    def test_offset_policy(self):
        assert order_superbits(self.BITS, policy="offset") == \
               [bit(10), bit(20), bit(30)]

    def test_damage_policy_sorts_ascending_accuracy(self):
        damage = {bit(30): 0.10, bit(10): 0.50, bit(20): 0.25}
        out = order_superbits(self.BITS, damage=damage, policy="damage")
        assert out == [bit(30), bit(20), bit(10)]

    def test_damage_policy_missing_entries_sort_last(self):
        damage = {bit(30): 0.10}
        out = order_superbits(self.BITS, damage=damage, policy="damage")
        assert out[0] == bit(30)
        assert out[1:] == [bit(10), bit(20)]  # tie broken by offset

    def test_random_policy_is_seeded_permutation(self):
        a = order_superbits(self.BITS, policy="random", seed=9)
        b = order_superbits(self.BITS, policy="random", seed=9)
        assert a == b
        assert sorted(a) == sorted(self.BITS)

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            order_superbits(self.BITS, policy="luck")


class TestTrace:
    def _runs(self):
        superbits = distinct_pages(3)
        pool = full_coverage_pool()
        return [
            simulate_attack(superbits, pool, StubVictim(0.6, crash_prob=0.2),
                            seed=s)
            for s in range(4)
        ]

    def test_trace_layout(self, tmp_path):
        import json

        runs = self._runs()
        path = str(tmp_path / "trace.jsonl")
        save_trace(path, runs, header={"victim": "victim"})
        lines = [json.loads(l) for l in open(path) if l.strip()]
        assert lines[0]["kind"] == "attack-header"
        assert lines[0]["victim"] == "victim"
        assert lines[-1]["kind"] == "attack-summary"
        body = lines[1:-1]
        assert len(body) == sum(len(r.attempts) for r in runs)
        for doc in body:
            assert {"run", "attempt", "byte_offset", "bit_index",
                    "direction", "template_id", "outcome"} <= set(doc)

    def test_trace_bytes_deterministic(self, tmp_path):
        runs = self._runs()
        p1, p2 = (str(tmp_path / n) for n in ("a.jsonl", "b.jsonl"))
        save_trace(p1, runs)
        save_trace(p2, runs)
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestLiveVictimMechanics:
    def test_flip_accumulation_and_reset(self, cprogs):
        from flipscan.rhsim import LiveVictim
        from helpers import tiny_eval

        victim = LiveVictim(cprogs["ok"], tiny_eval(4, 10), probe_samples=4)
        pristine = bytes(victim.pristine)
        b0, b1 = bit(0, 0), bit(1, 1)
        rng = np.random.default_rng(0)
        # "ok" completes but prints no class vector: the oracle calls it a
        # crash, and the mutated image keeps both accumulated flips.
        assert victim.query_flip(b0, rng) is Outcome.CRASH
        assert victim.query_flip(b1, rng) is Outcome.CRASH
        diff = [
            i for i, (a, b) in enumerate(zip(pristine, bytes(victim.current)))
            if a != b
        ]
        assert diff == [victim.img.text.offset + 0, victim.img.text.offset + 1]
        victim.reset()
        assert bytes(victim.current) == pristine

    def test_page_geometry_follows_image(self, mini_img):
        from flipscan.rhsim import LiveVictim
        from helpers import tiny_eval

        victim = LiveVictim(mini_img.path, tiny_eval(4, 10), probe_samples=4)
        # mini .text sits at vaddr 0x401000: in-page offset 0, page frame
        # 0x401 for its first byte.
        assert victim.page_offset(bit(0)) == 0
        assert victim.page_frame(bit(0)) == 0x401
        assert victim.page_offset(bit(17)) == 17
