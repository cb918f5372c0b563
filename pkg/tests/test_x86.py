"""Decoder tests: tiling, field tags, padding, flip attribution, reports.

Ground truth comes from two places: hand-assembled encodings whose byte
layout is written out field by field below, and the frozen reference
boundary files under tests/fixtures/decoder/ (produced from objdump
output by tools/make_fixtures.py).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipscan.elfimage import function_symbols
from flipscan.x86 import (
    BUCKET_OF,
    MAX_INSN_LEN,
    FieldTag,
    MnemClass,
    annotate_padding,
    classify_flip,
    decode_one,
    field_map,
    flip_type_report,
    linear_sweep,
    nop_filler,
    span_at,
)

from helpers import bitloc, random_locs

P = FieldTag.PREFIX
O = FieldTag.OPCODE
M = FieldTag.MODRM
S = FieldTag.SIB
D = FieldTag.DISP
I = FieldTag.IMM


def one(raw: bytes):
    """Decode raw as a single instruction starting at offset 0."""
    return decode_one(raw, 0)


class TestDecodeOne:
    # (encoding, length, mnemonic class, per-byte field tags)
    KNOWN = [
        # push rbp
        (b"\x55", 1, MnemClass.OTHER, (O,)),
        # mov rbp, rsp  (REX.W + 89 /r, register-direct)
        (b"\x48\x89\xe5", 3, MnemClass.MOV, (P, O, M)),
        # mov eax, 0x2a  (B8 + imm32)
        (b"\xb8\x2a\x00\x00\x00", 5, MnemClass.MOV, (O, I, I, I, I)),
        # movabs rax, imm64  (REX.W promotes B8's immediate to 8 bytes)
        (b"\x48\xb8\x01\x02\x03\x04\x05\x06\x07\x08", 10, MnemClass.MOV,
         (P, O, I, I, I, I, I, I, I, I)),
        # ret
        (b"\xc3", 1, MnemClass.BRANCH, (O,)),
        # call rel32
        (b"\xe8\x10\x00\x00\x00", 5, MnemClass.BRANCH, (O, D, D, D, D)),
        # je rel8
        (b"\x74\x05", 2, MnemClass.BRANCH, (O, D)),
        # jmp rel8
        (b"\xeb\xfe", 2, MnemClass.BRANCH, (O, D)),
        # mov eax, [rsp+8]  (modrm mod=01 rm=100 pulls in SIB + disp8)
        (b"\x8b\x44\x24\x08", 4, MnemClass.MOV, (O, M, S, D)),
        # mov eax, [rip+0x10]  (mod=00 rm=101 is RIP-relative disp32)
        (b"\x8b\x05\x10\x00\x00\x00", 6, MnemClass.MOV, (O, M, D, D, D, D)),
        # mov eax, [0x10]  (SIB with base=101 under mod=00 adds disp32)
        (b"\x8b\x04\x25\x10\x00\x00\x00", 7, MnemClass.MOV,
         (O, M, S, D, D, D, D)),
        # test eax, imm32  (group 3, reg=0 carries the immediate)
        (b"\xf7\xc0\x01\x00\x00\x00", 6, MnemClass.ARITH, (O, M, I, I, I, I)),
        # neg eax  (group 3, reg=3: no immediate)
        (b"\xf7\xd8", 2, MnemClass.ARITH, (O, M)),
        # nop
        (b"\x90", 1, MnemClass.NOP, (O,)),
        # nopw 0x0(%rax,%rax,1)  (66-prefixed two-byte nop)
        (b"\x66\x0f\x1f\x44\x00\x00", 6, MnemClass.NOP, (P, O, O, M, S, D)),
        # nopl 0x0(%rax)  (disp32 form)
        (b"\x0f\x1f\x80\x00\x00\x00\x00", 7, MnemClass.NOP,
         (O, O, M, D, D, D, D)),
        # movaps xmm0, [rdi]  (legacy SSE, map 0F)
        (b"\x0f\x28\x07", 3, MnemClass.VEC_MOV, (O, O, M)),
        # vmovaps ymm0, [rdi]  (two-byte VEX)
        (b"\xc5\xfc\x28\x07", 4, MnemClass.VEC_MOV, (P, P, O, M)),
        # vfmadd132ps ymm0, ymm1, ymm2  (three-byte VEX, map 0F38)
        (b"\xc4\xe2\x75\x98\xc2", 5, MnemClass.VEC_ARITH, (P, P, P, O, M)),
        # vperm2f128 ymm0, ymm1, ymm1, 3  (map 0F3A always carries imm8)
        (b"\xc4\xe3\x75\x06\xc1\x03", 6, MnemClass.VEC_ARITH,
         (P, P, P, O, M, I)),
        # vzeroupper  (VEX.128 0F 77)
        (b"\xc5\xf8\x77", 3, MnemClass.VEC_ARITH, (P, P, O)),
        # pshufd xmm0, xmm1, 2  (66 0F 70 /r ib)
        (b"\x66\x0f\x70\xc1\x02", 5, MnemClass.VEC_ARITH, (P, O, O, M, I)),
        # palignr xmm0, xmm1, 4  (legacy map 0F3A, three opcode bytes + ib)
        (b"\x66\x0f\x3a\x0f\xc1\x04", 6, MnemClass.VEC_ARITH,
         (P, O, O, O, M, I)),
    ]

    @pytest.mark.parametrize(
        "raw,length,mnem,fields", KNOWN, ids=lambda v: v.hex() if isinstance(v, bytes) else None
    )
    def test_known_encodings(self, raw, length, mnem, fields):
        span = one(raw)
        assert span.decoded
        assert span.start == 0
        assert span.length == length
        assert span.end == length
        assert span.mnem_class is mnem
        assert span.fields == fields

    def test_group5_class_depends_on_reg_field(self):
        assert one(b"\xff\xc0").mnem_class is MnemClass.ARITH    # inc eax
        assert one(b"\xff\xd0").mnem_class is MnemClass.BRANCH   # call rax
        assert one(b"\xff\xe0").mnem_class is MnemClass.BRANCH   # jmp rax
        assert one(b"\xff\xf0").mnem_class is MnemClass.OTHER    # push rax

    def test_unknown_opcode_is_one_byte_undecoded(self):
        span = one(b"\x06\x90")  # 0x06 has no 64-bit meaning
        assert not span.decoded
        assert span.length == 1
        assert span.mnem_class is MnemClass.UNDECODED
        assert span.fields == (FieldTag.UNDECODED,)

    def test_truncated_immediate_is_undecoded(self):
        # B8 wants 4 immediate bytes; only 2 are present.
        span = one(b"\xb8\x2a\x00")
        assert not span.decoded and span.length == 1

    def test_truncated_after_prefix_is_undecoded(self):
        assert not one(b"\x48").decoded
        assert not one(b"\x66\x66").decoded

    def test_prefix_run_at_length_cap_still_decodes(self):
        # 14 prefixes + one-byte opcode = 15 bytes: exactly at the limit.
        span = one(b"\x66" * 14 + b"\x90")
        assert span.decoded and span.length == MAX_INSN_LEN

    def test_prefix_run_past_length_cap_is_undecoded(self):
        span = one(b"\x66" * 15 + b"\x90")
        assert not span.decoded and span.length == 1

    def test_operand_size_prefix_shrinks_immediate(self):
        # 66 B8 imm16: the 16-bit form takes a 2-byte immediate.
        span = one(b"\x66\xb8\x34\x12")
        assert span.decoded and span.length == 4
        assert span.fields == (P, O, I, I)

    def test_decode_past_end_raises(self):
        with pytest.raises(IndexError):
            decode_one(b"\x90", 1)


class TestLinearSweep:
    # f1 body, then f2 body, then unclaimed tail (mirrors tests/fixtures/mini.elf).
    MINI_LENGTHS = [1, 3, 5, 1, 1, 6, 7, 5, 1, 1, 1,  # f1: 32 bytes
                    3, 3, 4, 5, 1, 8,                 # f2: 24 bytes
                    1, 1, 1, 1, 1, 1, 1, 1]           # tail fill

    def test_mini_text_tiling(self, mini_img):
        text = mini_img.text_bytes
        spans = linear_sweep(text)
        assert [s.length for s in spans] == self.MINI_LENGTHS
        assert all(s.decoded for s in spans)

    def test_tiling_has_no_gaps_or_overlaps(self, mini_img):
        spans = linear_sweep(mini_img.text_bytes)
        off = 0
        for span in spans:
            assert span.start == off
            off = span.end
        assert off == len(mini_img.text_bytes)

    @given(data=st.binary(min_size=1, max_size=256))
    @settings(max_examples=200, deadline=None)
    def test_tiling_is_exact_on_arbitrary_bytes(self, data):
        spans = linear_sweep(data)
        assert spans[0].start == 0
        assert all(a.end == b.start for a, b in zip(spans, spans[1:]))
        assert spans[-1].end == len(data)
        assert all(1 <= s.length <= MAX_INSN_LEN for s in spans)
        assert all(len(s.fields) == s.length for s in spans)

    def test_field_map_covers_every_byte(self, mini_img):
        text = mini_img.text_bytes
        tags = field_map(linear_sweep(text))
        assert len(tags) == len(text)
        assert all(isinstance(t, FieldTag) for t in tags)

    def test_span_at_finds_containing_span(self, mini_img):
        spans = linear_sweep(mini_img.text_bytes)
        for span in spans:
            for off in range(span.start, span.end):
                assert span_at(spans, off) is span

    def test_span_at_out_of_range(self, mini_img):
        spans = linear_sweep(mini_img.text_bytes)
        with pytest.raises(IndexError):
            span_at(spans, len(mini_img.text_bytes))

    def test_sweep_window(self, mini_img):
        # Sweeping only f2's window reproduces its tiling.
        spans = linear_sweep(mini_img.text_bytes, start=32, end=56)
        assert [s.length for s in spans] == [3, 3, 4, 5, 1, 8]
        assert spans[0].start == 32 and spans[-1].end == 56


class TestPadding:
    def test_unclaimed_tail_is_padding(self, mini_img):
        text = mini_img.text_bytes
        spans = annotate_padding(
            linear_sweep(text), text, function_symbols(mini_img),
            mini_img.text.vaddr,
        )
        padded = [s for s in spans if FieldTag.PADDING in s.fields]
        assert sorted(s.start for s in padded) == list(range(56, 64))
        for s in padded:
            assert set(s.fields) == {FieldTag.PADDING}
            assert s.mnem_class is MnemClass.NOP  # class survives re-tagging

    def test_bytes_inside_symbols_are_never_padding(self, mini_img):
        text = mini_img.text_bytes
        spans = annotate_padding(
            linear_sweep(text), text, function_symbols(mini_img),
            mini_img.text.vaddr,
        )
        # The three single-byte nops at 29..31 sit inside f1's symbol range.
        for off in (29, 30, 31):
            assert FieldTag.PADDING not in span_at(spans, off).fields

    def test_nop_filler_recognizers(self):
        assert nop_filler(one(b"\x90"), b"\x90")
        assert nop_filler(one(b"\x0f\x1f\x80\x00\x00\x00\x00"),
                          b"\x0f\x1f\x80\x00\x00\x00\x00")
        int3 = b"\xcc"
        assert nop_filler(one(int3), int3)
        zero = b"\x00\x00"   # decodes as add [rax], al
        assert nop_filler(one(zero), zero)
        assert not nop_filler(one(b"\xc3"), b"\xc3")


def _load_corpora(fixtures_dir):
    found = sorted((Path(fixtures_dir) / "decoder").glob("*.json"))
    assert found, "decoder fixtures missing; run tools/make_fixtures.py"
    out = []
    for ref_path in found:
        ref = json.loads(ref_path.read_text())
        data = ref_path.with_suffix(".bin").read_bytes()
        out.append((ref, data))
    return out


class TestReferenceBoundaries:
    """Span starts must agree with the frozen disassembler reference."""

    def test_agreement_at_least_99_5_percent(self, fixtures_dir):
        for ref, data in _load_corpora(fixtures_dir):
            expected = set(ref["instruction_starts"])
            got = {s.start for s in linear_sweep(data)}
            agreement = len(expected & got) / len(expected)
            assert agreement >= 0.995, (
                f"{ref['name']}: {agreement:.4%} boundary agreement"
            )

    def test_corpus_integrity(self, fixtures_dir):
        import hashlib
        for ref, data in _load_corpora(fixtures_dir):
            assert hashlib.sha256(data).hexdigest() == ref["text_sha256"]
            starts = ref["instruction_starts"]
            assert starts == sorted(starts)
            assert starts[0] == 0 and starts[-1] < len(data)


class TestClassifyFlip:
    def test_immediate_byte_is_data_bucket(self, mini_img):
        text = mini_img.text_bytes
        # Offset 5 = second byte of "mov eax, 0x2a": immediate.
        eff = classify_flip(text, bitloc(text, 5, 0))
        assert eff.field is FieldTag.IMM
        assert eff.bucket == "data"
        assert eff.mnem_class is MnemClass.MOV
        assert eff.old_length == 5

    def test_opcode_byte_is_opcode_bucket(self, mini_img):
        text = mini_img.text_bytes
        eff = classify_flip(text, bitloc(text, 4, 0))  # B8 itself
        assert eff.field is FieldTag.OPCODE
        assert eff.bucket == "opcode"

    def test_flip_that_changes_length(self, mini_img):
        text = mini_img.text_bytes
        # B8 (mov eax,imm32, len 5) -> B0 (mov al,imm8, len 2): bit 3 of 0xB8.
        eff = classify_flip(text, bitloc(text, 4, 3))
        assert eff.length_changed
        assert (eff.old_length, eff.new_length) == (5, 2)
        assert not eff.becomes_undecodable

    def test_flip_that_breaks_decoding(self, mini_img):
        # Some flip over f1 must produce a byte with no 64-bit decoding;
        # whichever it is, the mutant must resynchronize as a 1-byte span.
        text = mini_img.text_bytes
        broken = [
            classify_flip(text, bitloc(text, off, bit))
            for off in range(0, 32)
            for bit in range(8)
        ]
        broken = [e for e in broken if e.becomes_undecodable]
        assert broken
        assert all(e.new_length == 1 for e in broken)

    def test_bucket_matches_field_table(self, mini_img):
        import numpy as np
        text = mini_img.text_bytes
        rng = np.random.default_rng(9)
        spans = linear_sweep(text)
        for loc in random_locs(rng, 200, len(text)):
            eff = classify_flip(text, loc, spans)
            assert eff.bucket == BUCKET_OF[eff.field]
            assert eff.loc == loc
            assert eff.old_length == span_at(spans, loc.byte_offset).length

    def test_padding_bucket_with_symbols(self, mini_img):
        text = mini_img.text_bytes
        spans = annotate_padding(
            linear_sweep(text), text, function_symbols(mini_img),
            mini_img.text.vaddr,
        )
        eff = classify_flip(text, bitloc(text, 60, 2), spans)
        assert eff.field is FieldTag.PADDING
        assert eff.bucket == "padding"


class TestFlipTypeReport:
    def _all_locs(self, text):
        return [bitloc(text, off, bit)
                for off in range(len(text)) for bit in range(8)]

    def test_count_conservation(self, mini_img):
        text = mini_img.text_bytes
        locs = self._all_locs(text)
        report = flip_type_report(text, locs)
        assert report.total == len(text) * 8
        assert sum(r.count for r in report.rows) == report.total
        assert sum(report.field_counts.values()) == report.total
        assert abs(sum(r.share for r in report.rows) - 100.0) < 1e-9

    def test_rows_sorted_and_top(self, mini_img):
        text = mini_img.text_bytes
        report = flip_type_report(text, self._all_locs(text))
        counts = [r.count for r in report.rows]
        assert counts == sorted(counts, reverse=True)
        assert report.top() == report.rows[0]

    def test_field_counts_are_byte_exact(self, mini_img):
        # Every byte contributes its 8 bit flips to exactly one field tag.
        text = mini_img.text_bytes
        report = flip_type_report(text, self._all_locs(text))
        tags = field_map(linear_sweep(text))
        for tag in FieldTag:
            expect = 8 * sum(1 for t in tags if t is tag)
            assert report.field_counts.get(tag, 0) == expect

    def test_bucket_share_with_padding(self, mini_img):
        text = mini_img.text_bytes
        report = flip_type_report(
            text, self._all_locs(text),
            symbols=function_symbols(mini_img),
            text_vaddr=mini_img.text.vaddr,
        )
        # 8 padding bytes out of 64 -> exactly 12.5% of all flips.
        assert report.bucket_share("padding") == pytest.approx(12.5)

    def test_csv_round_trip(self, mini_img):
        text = mini_img.text_bytes
        report = flip_type_report(text, self._all_locs(text))
        rows = list(csv.reader(io.StringIO(report.to_csv())))
        assert rows[0] == ["rank", "mnemonic_class", "field_bucket",
                           "count", "share_pct"]
        assert len(rows) == 1 + len(report.rows)
        assert [int(r[0]) for r in rows[1:]] == list(range(1, len(report.rows) + 1))
        assert sum(int(r[3]) for r in rows[1:]) == report.total

    def test_empty_report(self):
        report = flip_type_report(b"\x90" * 4, [])
        assert report.total == 0 and report.rows == ()
        with pytest.raises(ValueError):
            report.top()
