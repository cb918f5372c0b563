"""Length-decode x86-64 machine code and attribute bit flips to fields.

This is a linear-sweep length decoder, not a disassembler: for every
instruction it recovers the span length, a coarse mnemonic class, and a
per-byte field tag (prefix / opcode / modrm / sib / displacement / immediate).
Legacy, REX and VEX (AVX/AVX2) encodings are covered; EVEX is out of scope and
decodes as unknown. Undecodable bytes become one-byte spans and the sweep
resynchronizes at the next byte, so the sweep always tiles the buffer exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

from .elfimage import BitLocation, FunctionSymbol

MAX_INSN_LEN = 15

LEGACY_PREFIXES = {
    0xF0, 0xF2, 0xF3,        # lock / repne / rep
    0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65,  # segment overrides
    0x66, 0x67,              # operand / address size
}


class FieldTag(Enum):
    PREFIX = "prefix"
    OPCODE = "opcode"
    MODRM = "modrm"
    SIB = "sib"
    DISP = "displacement"
    IMM = "immediate"
    PADDING = "padding"
    UNDECODED = "undecoded"


# Coarse-grained field buckets used by flip-type reports: anything that steers
# the operation (prefix/opcode) versus anything that carries operand data.
BUCKET_OF = {
    FieldTag.PREFIX: "opcode",
    FieldTag.OPCODE: "opcode",
    FieldTag.MODRM: "data",
    FieldTag.SIB: "data",
    FieldTag.DISP: "data",
    FieldTag.IMM: "data",
    FieldTag.PADDING: "padding",
    FieldTag.UNDECODED: "undecoded",
}


class MnemClass(Enum):
    MOV = "mov"
    ARITH = "arith"
    BRANCH = "branch"
    VEC_MOV = "vector-mov"
    VEC_ARITH = "vector-arith"
    NOP = "nop"
    OTHER = "other"
    UNDECODED = "undecoded"


@dataclass(frozen=True)
class InsnSpan:
    start: int
    length: int
    mnem_class: MnemClass
    fields: tuple[FieldTag, ...]  # one tag per byte
    decoded: bool

    @property
    def end(self) -> int:
        return self.start + self.length


# --- opcode tables ----------------------------------------------------------
#
# Entry: (has_modrm, imm_code, MnemClass). imm codes:
#   ""     no immediate            "ib"  1 byte       "iw"   2 bytes
#   "iz"   2/4 by operand size     "iv"  2/4/8 (mov r64, imm64 takes REX.W)
#   "iwb"  enter: iw then ib       "jb"  rel8          "jz"   rel16/32
#   "moffs" absolute moffs (8 bytes, 4 with 0x67)
#   "g3b"/"g3z"  F6/F7 groups: immediate only when modrm.reg is 0 or 1

_ONE: dict[int, tuple[bool, str, MnemClass]] = {}

for _base in (0x00, 0x08, 0x10, 0x18, 0x20, 0x28, 0x30, 0x38):
    for _o in range(4):
        _ONE[_base + _o] = (True, "", MnemClass.ARITH)
    _ONE[_base + 4] = (False, "ib", MnemClass.ARITH)
    _ONE[_base + 5] = (False, "iz", MnemClass.ARITH)

for _o in range(0x50, 0x60):
    _ONE[_o] = (False, "", MnemClass.OTHER)  # push/pop reg

_ONE.update(
    {
        0x63: (True, "", MnemClass.MOV),      # movsxd
        0x68: (False, "iz", MnemClass.OTHER),  # push imm32
        0x69: (True, "iz", MnemClass.ARITH),   # imul r, r/m, imm32
        0x6A: (False, "ib", MnemClass.OTHER),  # push imm8
        0x6B: (True, "ib", MnemClass.ARITH),
        0x6C: (False, "", MnemClass.OTHER),
        0x6D: (False, "", MnemClass.OTHER),
        0x6E: (False, "", MnemClass.OTHER),
        0x6F: (False, "", MnemClass.OTHER),
    }
)

for _o in range(0x70, 0x80):
    _ONE[_o] = (False, "jb", MnemClass.BRANCH)  # jcc rel8

_ONE.update(
    {
        0x80: (True, "ib", MnemClass.ARITH),
        0x81: (True, "iz", MnemClass.ARITH),
        0x83: (True, "ib", MnemClass.ARITH),
        0x84: (True, "", MnemClass.ARITH),    # test
        0x85: (True, "", MnemClass.ARITH),
        0x86: (True, "", MnemClass.MOV),      # xchg
        0x87: (True, "", MnemClass.MOV),
        0x88: (True, "", MnemClass.MOV),
        0x89: (True, "", MnemClass.MOV),
        0x8A: (True, "", MnemClass.MOV),
        0x8B: (True, "", MnemClass.MOV),
        0x8C: (True, "", MnemClass.MOV),
        0x8D: (True, "", MnemClass.MOV),      # lea
        0x8E: (True, "", MnemClass.MOV),
        0x8F: (True, "", MnemClass.OTHER),    # pop r/m
        0x90: (False, "", MnemClass.NOP),
        0x98: (False, "", MnemClass.ARITH),   # cwde
        0x99: (False, "", MnemClass.ARITH),   # cdq
        0x9B: (False, "", MnemClass.OTHER),
        0x9C: (False, "", MnemClass.OTHER),
        0x9D: (False, "", MnemClass.OTHER),
        0x9E: (False, "", MnemClass.OTHER),
        0x9F: (False, "", MnemClass.OTHER),
    }
)

for _o in range(0x91, 0x98):
    _ONE[_o] = (False, "", MnemClass.MOV)  # xchg rAX, reg

_ONE.update(
    {
        0xA0: (False, "moffs", MnemClass.MOV),
        0xA1: (False, "moffs", MnemClass.MOV),
        0xA2: (False, "moffs", MnemClass.MOV),
        0xA3: (False, "moffs", MnemClass.MOV),
        0xA4: (False, "", MnemClass.MOV),     # movsb
        0xA5: (False, "", MnemClass.MOV),
        0xA6: (False, "", MnemClass.ARITH),   # cmpsb
        0xA7: (False, "", MnemClass.ARITH),
        0xA8: (False, "ib", MnemClass.ARITH),
        0xA9: (False, "iz", MnemClass.ARITH),
        0xAA: (False, "", MnemClass.MOV),
        0xAB: (False, "", MnemClass.MOV),
        0xAC: (False, "", MnemClass.MOV),
        0xAD: (False, "", MnemClass.MOV),
        0xAE: (False, "", MnemClass.ARITH),   # scasb
        0xAF: (False, "", MnemClass.ARITH),
    }
)

for _o in range(0xB0, 0xB8):
    _ONE[_o] = (False, "ib", MnemClass.MOV)
for _o in range(0xB8, 0xC0):
    _ONE[_o] = (False, "iv", MnemClass.MOV)

_ONE.update(
    {
        0xC0: (True, "ib", MnemClass.ARITH),  # shift groups
        0xC1: (True, "ib", MnemClass.ARITH),
        0xC2: (False, "iw", MnemClass.BRANCH),
        0xC3: (False, "", MnemClass.BRANCH),
        0xC6: (True, "ib", MnemClass.MOV),
        0xC7: (True, "iz", MnemClass.MOV),
        0xC8: (False, "iwb", MnemClass.OTHER),  # enter
        0xC9: (False, "", MnemClass.OTHER),     # leave
        0xCA: (False, "iw", MnemClass.BRANCH),
        0xCB: (False, "", MnemClass.BRANCH),
        0xCC: (False, "", MnemClass.OTHER),     # int3
        0xCD: (False, "ib", MnemClass.OTHER),
        0xCF: (False, "", MnemClass.BRANCH),
        0xD0: (True, "", MnemClass.ARITH),
        0xD1: (True, "", MnemClass.ARITH),
        0xD2: (True, "", MnemClass.ARITH),
        0xD3: (True, "", MnemClass.ARITH),
        0xD7: (False, "", MnemClass.OTHER),
        0xE0: (False, "jb", MnemClass.BRANCH),
        0xE1: (False, "jb", MnemClass.BRANCH),
        0xE2: (False, "jb", MnemClass.BRANCH),
        0xE3: (False, "jb", MnemClass.BRANCH),
        0xE4: (False, "ib", MnemClass.OTHER),
        0xE5: (False, "ib", MnemClass.OTHER),
        0xE6: (False, "ib", MnemClass.OTHER),
        0xE7: (False, "ib", MnemClass.OTHER),
        0xE8: (False, "jz", MnemClass.BRANCH),  # call rel32
        0xE9: (False, "jz", MnemClass.BRANCH),  # jmp rel32
        0xEB: (False, "jb", MnemClass.BRANCH),
        0xEC: (False, "", MnemClass.OTHER),
        0xED: (False, "", MnemClass.OTHER),
        0xEE: (False, "", MnemClass.OTHER),
        0xEF: (False, "", MnemClass.OTHER),
        0xF1: (False, "", MnemClass.OTHER),
        0xF4: (False, "", MnemClass.OTHER),     # hlt
        0xF5: (False, "", MnemClass.OTHER),
        0xF6: (True, "g3b", MnemClass.ARITH),
        0xF7: (True, "g3z", MnemClass.ARITH),
        0xF8: (False, "", MnemClass.OTHER),
        0xF9: (False, "", MnemClass.OTHER),
        0xFA: (False, "", MnemClass.OTHER),
        0xFB: (False, "", MnemClass.OTHER),
        0xFC: (False, "", MnemClass.OTHER),
        0xFD: (False, "", MnemClass.OTHER),
        0xFE: (True, "", MnemClass.ARITH),
        0xFF: (True, "", MnemClass.OTHER),  # group 5; class refined by reg field
    }
)

# x87 escapes: opcode meaning depends on modrm but the length rule is uniform.
for _o in range(0xD8, 0xE0):
    _ONE[_o] = (True, "", MnemClass.OTHER)

_TWO: dict[int, tuple[bool, str, MnemClass]] = {
    0x00: (True, "", MnemClass.OTHER),
    0x01: (True, "", MnemClass.OTHER),
    0x02: (True, "", MnemClass.OTHER),
    0x03: (True, "", MnemClass.OTHER),
    0x05: (False, "", MnemClass.BRANCH),  # syscall
    0x06: (False, "", MnemClass.OTHER),
    0x07: (False, "", MnemClass.BRANCH),  # sysret
    0x0B: (False, "", MnemClass.OTHER),   # ud2
    0x0D: (True, "", MnemClass.OTHER),    # prefetchw
    0x10: (True, "", MnemClass.VEC_MOV),  # movups / movss
    0x11: (True, "", MnemClass.VEC_MOV),
    0x12: (True, "", MnemClass.VEC_MOV),
    0x13: (True, "", MnemClass.VEC_MOV),
    0x14: (True, "", MnemClass.VEC_ARITH),  # unpcklps
    0x15: (True, "", MnemClass.VEC_ARITH),
    0x16: (True, "", MnemClass.VEC_MOV),
    0x17: (True, "", MnemClass.VEC_MOV),
    0x18: (True, "", MnemClass.OTHER),    # prefetch hints
    0x28: (True, "", MnemClass.VEC_MOV),  # movaps
    0x29: (True, "", MnemClass.VEC_MOV),
    0x2A: (True, "", MnemClass.VEC_ARITH),  # cvt family
    0x2B: (True, "", MnemClass.VEC_MOV),    # movntps
    0x2C: (True, "", MnemClass.VEC_ARITH),
    0x2D: (True, "", MnemClass.VEC_ARITH),
    0x2E: (True, "", MnemClass.VEC_ARITH),  # ucomiss
    0x2F: (True, "", MnemClass.VEC_ARITH),
    0x30: (False, "", MnemClass.OTHER),
    0x31: (False, "", MnemClass.OTHER),  # rdtsc
    0x32: (False, "", MnemClass.OTHER),
    0x33: (False, "", MnemClass.OTHER),
    0x50: (True, "", MnemClass.VEC_MOV),  # movmskps
    0x70: (True, "ib", MnemClass.VEC_ARITH),  # pshufd
    0x71: (True, "ib", MnemClass.VEC_ARITH),
    0x72: (True, "ib", MnemClass.VEC_ARITH),
    0x73: (True, "ib", MnemClass.VEC_ARITH),
    0x74: (True, "", MnemClass.VEC_ARITH),
    0x75: (True, "", MnemClass.VEC_ARITH),
    0x76: (True, "", MnemClass.VEC_ARITH),
    0x77: (False, "", MnemClass.OTHER),   # emms / vzeroupper
    0x7E: (True, "", MnemClass.VEC_MOV),  # movd/movq
    0x7F: (True, "", MnemClass.VEC_MOV),
    0xA0: (False, "", MnemClass.OTHER),
    0xA1: (False, "", MnemClass.OTHER),
    0xA2: (False, "", MnemClass.OTHER),   # cpuid
    0xA3: (True, "", MnemClass.ARITH),    # bt
    0xA4: (True, "ib", MnemClass.ARITH),  # shld
    0xA5: (True, "", MnemClass.ARITH),
    0xA8: (False, "", MnemClass.OTHER),
    0xA9: (False, "", MnemClass.OTHER),
    0xAB: (True, "", MnemClass.ARITH),
    0xAC: (True, "ib", MnemClass.ARITH),
    0xAD: (True, "", MnemClass.ARITH),
    0xAE: (True, "", MnemClass.OTHER),    # fences, ldmxcsr/stmxcsr
    0xAF: (True, "", MnemClass.ARITH),    # imul
    0xB0: (True, "", MnemClass.ARITH),
    0xB1: (True, "", MnemClass.ARITH),
    0xB3: (True, "", MnemClass.ARITH),
    0xB6: (True, "", MnemClass.MOV),      # movzx
    0xB7: (True, "", MnemClass.MOV),
    0xB8: (True, "", MnemClass.ARITH),    # popcnt (F3)
    0xBA: (True, "ib", MnemClass.ARITH),
    0xBB: (True, "", MnemClass.ARITH),
    0xBC: (True, "", MnemClass.ARITH),    # bsf / tzcnt
    0xBD: (True, "", MnemClass.ARITH),
    0xBE: (True, "", MnemClass.MOV),      # movsx
    0xBF: (True, "", MnemClass.MOV),
    0xC0: (True, "", MnemClass.ARITH),    # xadd
    0xC1: (True, "", MnemClass.ARITH),
    0xC2: (True, "ib", MnemClass.VEC_ARITH),  # cmpps
    0xC3: (True, "", MnemClass.MOV),          # movnti
    0xC4: (True, "ib", MnemClass.VEC_ARITH),
    0xC5: (True, "ib", MnemClass.VEC_ARITH),
    0xC6: (True, "ib", MnemClass.VEC_ARITH),  # shufps
    0xC7: (True, "", MnemClass.OTHER),
    0xD6: (True, "", MnemClass.VEC_MOV),
    0xD7: (True, "", MnemClass.VEC_MOV),  # pmovmskb
    0xE6: (True, "", MnemClass.VEC_ARITH),
    0xE7: (True, "", MnemClass.VEC_MOV),  # movntdq
    0xF0: (True, "", MnemClass.VEC_MOV),  # lddqu
}

for _o in range(0x19, 0x20):   # hint-nop group (incl. 0F 1F long nop, endbr64)
    _TWO[_o] = (True, "", MnemClass.NOP)
for _o in range(0x40, 0x50):   # cmovcc
    _TWO[_o] = (True, "", MnemClass.MOV)
for _o in range(0x51, 0x60):   # sqrt / logic / arith ps-ss family
    _TWO[_o] = (True, "", MnemClass.VEC_ARITH)
for _o in range(0x60, 0x6E):   # punpck / pack
    _TWO[_o] = (True, "", MnemClass.VEC_ARITH)
_TWO[0x6E] = (True, "", MnemClass.VEC_MOV)  # movd
_TWO[0x6F] = (True, "", MnemClass.VEC_MOV)  # movdqa/movdqu
for _o in range(0x80, 0x90):   # jcc rel32
    _TWO[_o] = (False, "jz", MnemClass.BRANCH)
for _o in range(0x90, 0xA0):   # setcc
    _TWO[_o] = (True, "", MnemClass.OTHER)
for _o in range(0xC8, 0xD0):   # bswap
    _TWO[_o] = (False, "", MnemClass.OTHER)
for _o in (*range(0xD0, 0xD6), *range(0xD8, 0xE6), *range(0xE8, 0xF0),
           *range(0xF1, 0xFF)):
    _TWO.setdefault(_o, (True, "", MnemClass.VEC_ARITH))

# 0F 38 map: uniformly modrm + no immediate; a handful are data movement.
_THREE_38_MOV = {0x18, 0x19, 0x1A, 0x2A, 0x2C, 0x2D, 0x2E, 0x2F,
                 0x58, 0x59, 0x5A, 0x78, 0x79, 0xF0, 0xF1}
# 0F 3A map: uniformly modrm + imm8; insert/extract forms are data movement.
_THREE_3A_MOV = {0x14, 0x15, 0x16, 0x17, 0x18, 0x19, 0x20, 0x21, 0x22,
                 0x38, 0x39}


def _lookup_38(op: int) -> tuple[bool, str, MnemClass]:
    cls = MnemClass.VEC_MOV if op in _THREE_38_MOV else MnemClass.VEC_ARITH
    if op in (0xF0, 0xF1):
        cls = MnemClass.MOV  # movbe / crc32 operate on scalar registers
    return (True, "", cls)


def _lookup_3a(op: int) -> tuple[bool, str, MnemClass]:
    # The 0F 3A escape map exists for operations carrying a one-byte
    # immediate (shuffles, permutes, blends, inserts): modrm + ib throughout.
    cls = MnemClass.VEC_MOV if op in _THREE_3A_MOV else MnemClass.VEC_ARITH
    return (True, "ib", cls)


def _undecoded(start: int) -> InsnSpan:
    return InsnSpan(start, 1, MnemClass.UNDECODED, (FieldTag.UNDECODED,), False)


def decode_one(data: bytes, start: int) -> InsnSpan:
    """Decode the instruction at start; on any failure, a 1-byte undecoded span."""
    n = len(data)
    if start >= n:
        raise IndexError("decode past end of buffer")

    off = start
    fields: list[FieldTag] = []
    opsize16 = False
    addr32 = False
    rex = 0
    rex_w = False

    # Legacy prefixes, then at most one REX immediately before the opcode.
    while off < n and data[off] in LEGACY_PREFIXES:
        if data[off] == 0x66:
            opsize16 = True
        elif data[off] == 0x67:
            addr32 = True
        fields.append(FieldTag.PREFIX)
        off += 1
        if off - start > MAX_INSN_LEN:
            return _undecoded(start)
    while off < n and 0x40 <= data[off] <= 0x4F:
        rex = data[off]
        rex_w = bool(rex & 8)
        fields.append(FieldTag.PREFIX)
        off += 1
        if off - start > MAX_INSN_LEN:
            return _undecoded(start)
    if off >= n:
        return _undecoded(start)

    byte = data[off]
    vex = False
    if byte in (0xC4, 0xC5) and rex == 0 and not opsize16:
        # In 64-bit mode C4/C5 always introduce VEX (LES/LDS are invalid).
        vex = True
        vex_len = 3 if byte == 0xC4 else 2
        if off + vex_len >= n:
            return _undecoded(start)
        if byte == 0xC4:
            mmap = data[off + 1] & 0x1F
            rex_w = bool(data[off + 2] & 0x80)
        else:
            mmap = 1
        fields.extend([FieldTag.PREFIX] * vex_len)
        off += vex_len
        op = data[off]
        if mmap == 1:
            entry = _TWO.get(op)
            if entry is not None and entry[2] not in (
                MnemClass.VEC_MOV, MnemClass.VEC_ARITH, MnemClass.OTHER
            ):
                entry = None  # VEX with a non-vector map-1 opcode: not AVX
        elif mmap == 2:
            entry = _lookup_38(op)
        elif mmap == 3:
            entry = _lookup_3a(op)
        else:
            entry = None
        if entry is None:
            return _undecoded(start)
        fields.append(FieldTag.OPCODE)
        off += 1
        opcode = op
        table = mmap
    else:
        opcode = byte
        if byte == 0x0F:
            if off + 1 >= n:
                return _undecoded(start)
            nxt = data[off + 1]
            if nxt == 0x38:
                if off + 2 >= n:
                    return _undecoded(start)
                opcode = data[off + 2]
                entry = _lookup_38(opcode)
                fields.extend([FieldTag.OPCODE] * 3)
                off += 3
                table = 2
            elif nxt == 0x3A:
                if off + 2 >= n:
                    return _undecoded(start)
                opcode = data[off + 2]
                entry = _lookup_3a(opcode)
                fields.extend([FieldTag.OPCODE] * 3)
                off += 3
                table = 3
            else:
                opcode = nxt
                entry = _TWO.get(nxt)
                if entry is None:
                    return _undecoded(start)
                fields.extend([FieldTag.OPCODE] * 2)
                off += 2
                table = 1
        else:
            entry = _ONE.get(byte)
            if entry is None:
                return _undecoded(start)
            fields.append(FieldTag.OPCODE)
            off += 1
            table = 0

    has_modrm, imm_code, mnem = entry
    modrm_reg = 0

    if has_modrm:
        if off >= n:
            return _undecoded(start)
        modrm = data[off]
        fields.append(FieldTag.MODRM)
        off += 1
        mod = modrm >> 6
        rm = modrm & 7
        modrm_reg = (modrm >> 3) & 7
        disp = 0
        if mod != 3:
            if rm == 4:
                if off >= n:
                    return _undecoded(start)
                sib = data[off]
                fields.append(FieldTag.SIB)
                off += 1
                if mod == 0 and (sib & 7) == 5:
                    disp = 4
            if mod == 1:
                disp = 1
            elif mod == 2:
                disp = 4
            elif mod == 0 and rm == 5:
                disp = 4  # RIP-relative
        if disp:
            if off + disp > n:
                return _undecoded(start)
            fields.extend([FieldTag.DISP] * disp)
            off += disp

    # Immediate size resolution.
    imm = 0
    imm_tag = FieldTag.IMM
    if imm_code == "ib":
        imm = 1
    elif imm_code == "iw":
        imm = 2
    elif imm_code == "iz":
        imm = 2 if opsize16 else 4
    elif imm_code == "iv":
        imm = 2 if opsize16 else (8 if rex_w else 4)
    elif imm_code == "iwb":
        imm = 3
    elif imm_code == "jb":
        imm = 1
        imm_tag = FieldTag.DISP  # branch displacement
    elif imm_code == "jz":
        imm = 2 if opsize16 else 4
        imm_tag = FieldTag.DISP
    elif imm_code == "moffs":
        imm = 4 if addr32 else 8
        imm_tag = FieldTag.DISP
    elif imm_code == "g3b":
        imm = 1 if modrm_reg in (0, 1) else 0
    elif imm_code == "g3z":
        imm = (2 if opsize16 else 4) if modrm_reg in (0, 1) else 0

    if imm:
        if off + imm > n:
            return _undecoded(start)
        fields.extend([imm_tag] * imm)
        off += imm

    length = off - start
    if length > MAX_INSN_LEN:
        return _undecoded(start)

    # Class refinements that depend on more than the opcode byte.
    if table == 0 and opcode == 0xFF:
        mnem = (
            MnemClass.ARITH if modrm_reg in (0, 1)
            else MnemClass.BRANCH if modrm_reg in (2, 3, 4, 5)
            else MnemClass.OTHER
        )
    if vex and mnem is MnemClass.OTHER and opcode == 0x77:
        mnem = MnemClass.VEC_ARITH  # vzeroupper / vzeroall

    return InsnSpan(start, length, mnem, tuple(fields), True)


def linear_sweep(data: bytes, start: int = 0, end: int | None = None) -> list[InsnSpan]:
    """Tile data[start:end] with instruction spans; never leaves gaps."""
    if end is None:
        end = len(data)
    spans: list[InsnSpan] = []
    off = start
    while off < end:
        span = decode_one(data[:end], off)
        spans.append(span)
        off = span.end
    return spans


def nop_filler(span: InsnSpan, data: bytes) -> bool:
    """Recognized inter-function fill: nop encodings or zero bytes."""
    if span.mnem_class is MnemClass.NOP:
        return True
    body = data[span.start : span.end]
    return all(b == 0x00 for b in body) or all(b == 0xCC for b in body)


def annotate_padding(
    spans: list[InsnSpan],
    data: bytes,
    symbols: tuple[FunctionSymbol, ...],
    text_vaddr: int,
) -> list[InsnSpan]:
    """Re-tag spans that are alignment fill between function symbols.

    A span becomes padding when no byte of it belongs to any function symbol's
    [start, start+size) range and it looks like fill. Without symbols the spans
    are returned unchanged.
    """
    if not symbols:
        return spans
    ranges = sorted(
        (s.vaddr - text_vaddr, s.vaddr - text_vaddr + s.size)
        for s in symbols
        if s.size > 0
    )

    def covered(a: int, b: int) -> bool:
        for lo, hi in ranges:
            if a < hi and b > lo:
                return True
        return False

    out: list[InsnSpan] = []
    for span in spans:
        if not covered(span.start, span.end) and nop_filler(span, data):
            out.append(
                InsnSpan(
                    span.start,
                    span.length,
                    span.mnem_class,
                    tuple(FieldTag.PADDING for _ in range(span.length)),
                    span.decoded,
                )
            )
        else:
            out.append(span)
    return out


def field_map(spans: list[InsnSpan]) -> list[FieldTag]:
    """Per-byte field tags over the swept region, in byte order."""
    tags: list[FieldTag] = []
    for span in spans:
        tags.extend(span.fields)
    return tags


def span_at(spans: list[InsnSpan], byte_offset: int) -> InsnSpan:
    """Span containing a byte offset (binary search over the tiling)."""
    lo, hi = 0, len(spans) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        span = spans[mid]
        if byte_offset < span.start:
            hi = mid - 1
        elif byte_offset >= span.end:
            lo = mid + 1
        else:
            return span
    raise IndexError(f"offset {byte_offset} outside swept region")


@dataclass(frozen=True)
class FlipEffect:
    """Static characterization of one bit flip against the decoded stream."""

    loc: BitLocation
    mnem_class: MnemClass
    field: FieldTag
    bucket: str            # opcode / data / padding / undecoded
    old_length: int
    new_length: int
    becomes_undecodable: bool

    @property
    def length_changed(self) -> bool:
        return self.new_length != self.old_length


def classify_flip(
    data: bytes,
    loc: BitLocation,
    spans: list[InsnSpan] | None = None,
) -> FlipEffect:
    """Attribute one flip to (mnemonic class, field) and probe its reshaping.

    Re-decodes the mutated bytes at the containing span start to see whether
    the flip changes the instruction length or makes it undecodable.
    """
    if spans is None:
        spans = linear_sweep(data)
    span = span_at(spans, loc.byte_offset)
    field = span.fields[loc.byte_offset - span.start]

    mutated = bytearray(data)
    mutated[loc.byte_offset] ^= 1 << loc.bit_index
    new_span = decode_one(bytes(mutated), span.start)

    return FlipEffect(
        loc=loc,
        mnem_class=span.mnem_class,
        field=field,
        bucket=BUCKET_OF[field],
        old_length=span.length,
        new_length=new_span.length,
        becomes_undecodable=not new_span.decoded,
    )


@dataclass(frozen=True)
class FlipTypeRow:
    mnem_class: MnemClass
    bucket: str
    count: int
    share: float  # percentage of all attributed flips


@dataclass(frozen=True)
class FlipTypeReport:
    rows: tuple[FlipTypeRow, ...]           # sorted by descending count
    field_counts: dict[FieldTag, int]
    total: int

    def top(self) -> FlipTypeRow:
        if not self.rows:
            raise ValueError("empty report")
        return self.rows[0]

    def bucket_share(self, bucket: str) -> float:
        return sum(r.share for r in self.rows if r.bucket == bucket)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["rank", "mnemonic_class", "field_bucket", "count", "share_pct"])
        for i, row in enumerate(self.rows, 1):
            writer.writerow(
                [i, row.mnem_class.value, row.bucket, row.count, f"{row.share:.2f}"]
            )
        return buf.getvalue()


def flip_type_report(
    data: bytes,
    locs: list[BitLocation],
    symbols: tuple[FunctionSymbol, ...] = (),
    text_vaddr: int = 0,
) -> FlipTypeReport:
    """Rank (mnemonic class, field bucket) pairs across a set of flips."""
    spans = linear_sweep(data)
    if symbols:
        spans = annotate_padding(spans, data, symbols, text_vaddr)
    counts: dict[tuple[MnemClass, str], int] = {}
    field_counts: dict[FieldTag, int] = {}
    for loc in locs:
        effect = classify_flip(data, loc, spans)
        key = (effect.mnem_class, effect.bucket)
        counts[key] = counts.get(key, 0) + 1
        field_counts[effect.field] = field_counts.get(effect.field, 0) + 1
    total = len(locs)
    rows = tuple(
        FlipTypeRow(mc, bucket, c, 100.0 * c / total if total else 0.0)
        for (mc, bucket), c in sorted(counts.items(), key=lambda kv: -kv[1])
    )
    return FlipTypeReport(rows=rows, field_counts=field_counts, total=total)
