"""Minimal ELF64 reader and single-bit mutation of the .text section.

Only little-endian 64-bit images are supported; that is the entire corpus this
toolkit builds and attacks. Parsing never mutates; flips are applied to fresh
byte copies so one image can back thousands of mutants.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1
ET_EXEC = 2
ET_DYN = 3
PT_LOAD = 1
SHT_NOBITS = 8
STT_FUNC = 2

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
_SHDR = struct.Struct("<IIQQQQIIQQ")
_SYM = struct.Struct("<IBBHQQ")


class ElfFormatError(ValueError):
    """Base for all image-parsing failures."""


class BadMagic(ElfFormatError):
    pass


class UnsupportedClass(ElfFormatError):
    pass


class UnsupportedEndianness(ElfFormatError):
    pass


class TruncatedHeader(ElfFormatError):
    pass


class NoTextSection(ElfFormatError):
    pass


class OutOfRange(IndexError):
    """Bit location does not fall inside the .text section."""


class FlipDirection(Enum):
    """Which way the stored bit moves when flipped."""

    ZERO_TO_ONE = "01"
    ONE_TO_ZERO = "10"

    def opposite(self) -> "FlipDirection":
        if self is FlipDirection.ZERO_TO_ONE:
            return FlipDirection.ONE_TO_ZERO
        return FlipDirection.ZERO_TO_ONE


@dataclass(frozen=True, order=True)
class BitLocation:
    """One flippable bit: byte offset relative to .text, bit 0 = LSB."""

    byte_offset: int
    bit_index: int
    direction: FlipDirection

    def key(self) -> tuple[int, int, str]:
        return (self.byte_offset, self.bit_index, self.direction.value)


@dataclass(frozen=True)
class SectionRef:
    name: str
    sh_type: int
    flags: int
    vaddr: int
    offset: int
    size: int


@dataclass(frozen=True)
class FunctionSymbol:
    name: str
    vaddr: int
    size: int


@dataclass(frozen=True)
class ElfImage:
    path: str
    data: bytes
    entry_kind: str  # "executable" or "shared-object"
    sections: tuple[SectionRef, ...]
    text: SectionRef
    load_align: int

    @property
    def text_bytes(self) -> bytes:
        return self.data[self.text.offset : self.text.offset + self.text.size]

    @property
    def bit_count(self) -> int:
        return self.text.size * 8

    def text_sha256(self) -> str:
        return hashlib.sha256(self.text_bytes).hexdigest()

    def file_sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def section(self, name: str) -> SectionRef | None:
        for sec in self.sections:
            if sec.name == name:
                return sec
        return None

    def text_vaddr_of(self, byte_offset: int) -> int:
        return self.text.vaddr + byte_offset

    def page_offset_of(self, byte_offset: int, page_size: int = 4096) -> int:
        """In-page offset of a .text byte once the segment is mapped."""
        return (self.text.vaddr + byte_offset) % page_size

    def page_frame_of(self, byte_offset: int, page_size: int = 4096) -> int:
        return (self.text.vaddr + byte_offset) // page_size


def _read_cstr(blob: bytes, off: int) -> str:
    end = blob.find(b"\x00", off)
    if end < 0:
        end = len(blob)
    return blob[off:end].decode("utf-8", "replace")


def load(path: str | os.PathLike[str]) -> ElfImage:
    """Parse an ELF file into an immutable ElfImage.

    Raises BadMagic / UnsupportedClass / UnsupportedEndianness /
    TruncatedHeader / NoTextSection on malformed or unsupported images.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != ELF_MAGIC:
        raise BadMagic(f"{path}: not an ELF file")
    if len(data) < _EHDR.size:
        raise TruncatedHeader(f"{path}: ELF header truncated")
    if data[4] != ELFCLASS64:
        raise UnsupportedClass(f"{path}: only ELFCLASS64 is supported")
    if data[5] != ELFDATA2LSB:
        raise UnsupportedEndianness(f"{path}: only little-endian is supported")

    (
        _ident,
        e_type,
        _machine,
        _version,
        _entry,
        e_phoff,
        e_shoff,
        _flags,
        _ehsize,
        e_phentsize,
        e_phnum,
        e_shentsize,
        e_shnum,
        e_shstrndx,
    ) = _EHDR.unpack_from(data, 0)

    entry_kind = "shared-object" if e_type == ET_DYN else "executable"

    end = e_shoff + e_shentsize * e_shnum
    if e_shnum == 0 or end > len(data):
        raise TruncatedHeader(f"{path}: section header table out of bounds")

    raw_shdrs = []
    for i in range(e_shnum):
        raw_shdrs.append(_SHDR.unpack_from(data, e_shoff + i * e_shentsize))

    if e_shstrndx >= e_shnum:
        raise TruncatedHeader(f"{path}: bad section name table index")
    str_off, str_size = raw_shdrs[e_shstrndx][4], raw_shdrs[e_shstrndx][5]
    if str_off + str_size > len(data):
        raise TruncatedHeader(f"{path}: section name table out of bounds")
    shstr = data[str_off : str_off + str_size]

    sections = []
    for sh_name, sh_type, sh_flags, sh_addr, sh_offset, sh_size, *_rest in raw_shdrs:
        # SHT_NOBITS occupies no file bytes, so only check file bounds otherwise.
        if sh_type != SHT_NOBITS and sh_offset + sh_size > len(data):
            raise TruncatedHeader(f"{path}: section body out of bounds")
        sections.append(
            SectionRef(
                name=_read_cstr(shstr, sh_name),
                sh_type=sh_type,
                flags=sh_flags,
                vaddr=sh_addr,
                offset=sh_offset,
                size=sh_size,
            )
        )

    text = next((s for s in sections if s.name == ".text"), None)
    if text is None or text.size == 0:
        raise NoTextSection(f"{path}: no non-empty .text section")

    # Alignment of the PT_LOAD segment covering .text drives page-offset math.
    load_align = 4096
    if e_phoff and e_phnum:
        if e_phoff + e_phentsize * e_phnum > len(data):
            raise TruncatedHeader(f"{path}: program header table out of bounds")
        for i in range(e_phnum):
            p_type, _pf, _off, p_vaddr, _pa, _filesz, p_memsz, p_align = _PHDR.unpack_from(
                data, e_phoff + i * e_phentsize
            )
            if p_type == PT_LOAD and p_vaddr <= text.vaddr < p_vaddr + p_memsz:
                load_align = max(int(p_align), 1)
                break

    return ElfImage(
        path=path,
        data=data,
        entry_kind=entry_kind,
        sections=tuple(sections),
        text=text,
        load_align=load_align,
    )


def function_symbols(img: ElfImage) -> tuple[FunctionSymbol, ...]:
    """STT_FUNC symbols that land inside .text, sorted by address."""
    out: list[FunctionSymbol] = []
    for tab_name, str_name in ((".symtab", ".strtab"), (".dynsym", ".dynstr")):
        symtab = img.section(tab_name)
        strtab = img.section(str_name)
        if symtab is None or strtab is None or symtab.size == 0:
            continue
        strs = img.data[strtab.offset : strtab.offset + strtab.size]
        for off in range(symtab.offset, symtab.offset + symtab.size, _SYM.size):
            st_name, st_info, _other, _shndx, st_value, st_size = _SYM.unpack_from(
                img.data, off
            )
            if st_info & 0xF != STT_FUNC:
                continue
            if not (img.text.vaddr <= st_value < img.text.vaddr + img.text.size):
                continue
            out.append(FunctionSymbol(_read_cstr(strs, st_name), st_value, st_size))
        if out:
            break
    out.sort(key=lambda s: (s.vaddr, -s.size))
    return tuple(out)


def direction_of(data_byte: int, bit_index: int) -> FlipDirection:
    """Flip direction implied by the stored bit value (0 flips up, 1 down)."""
    if (data_byte >> bit_index) & 1:
        return FlipDirection.ONE_TO_ZERO
    return FlipDirection.ZERO_TO_ONE


def location_at(img: ElfImage, byte_offset: int, bit_index: int) -> BitLocation:
    """BitLocation for one (byte, bit) coordinate of .text."""
    if not (0 <= byte_offset < img.text.size):
        raise OutOfRange(f"byte offset {byte_offset} outside .text (size {img.text.size})")
    if not (0 <= bit_index < 8):
        raise OutOfRange(f"bit index {bit_index} not in 0..7")
    b = img.data[img.text.offset + byte_offset]
    return BitLocation(byte_offset, bit_index, direction_of(b, bit_index))


def enumerate_bits(img: ElfImage) -> Iterator[BitLocation]:
    """All .text bits in (byte_offset, bit_index) order; 8 per byte."""
    base = img.text.offset
    data = img.data
    for byte_offset in range(img.text.size):
        b = data[base + byte_offset]
        for bit_index in range(8):
            yield BitLocation(byte_offset, bit_index, direction_of(b, bit_index))


def apply_flip(img: ElfImage, loc: BitLocation) -> bytes:
    """Whole-file byte string with exactly one .text bit inverted."""
    if not (0 <= loc.byte_offset < img.text.size):
        raise OutOfRange(f"byte offset {loc.byte_offset} outside .text")
    if not (0 <= loc.bit_index < 8):
        raise OutOfRange(f"bit index {loc.bit_index} not in 0..7")
    mutated = bytearray(img.data)
    mutated[img.text.offset + loc.byte_offset] ^= 1 << loc.bit_index
    return bytes(mutated)


def write_mutant(img: ElfImage, loc: BitLocation, out_path: str | os.PathLike[str]) -> str:
    """Write the one-bit mutant to out_path, preserving the execute bits."""
    out_path = os.fspath(out_path)
    blob = apply_flip(img, loc)
    with open(out_path, "wb") as fh:
        fh.write(blob)
    os.chmod(out_path, os.stat(img.path).st_mode & 0o7777)
    return out_path
