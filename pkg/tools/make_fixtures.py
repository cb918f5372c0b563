#!/usr/bin/env python3
"""Regenerate the checked-in test fixtures.

Produces, under tests/fixtures/:

  mini.elf                 -- handcrafted 64-bit little-endian executable with a
                              64-byte .text, two function symbols, and 8 bytes
                              of inter-function nop fill; every offset is fixed
                              by this script so tests can assert exact values.
  decoder/<name>.bin       -- raw .text bytes of a generated model executable
                              built at a pinned compiler config from pinned
                              training seeds.
  decoder/<name>.json      -- instruction-start offsets (text-relative) frozen
                              from the reference disassembler (objdump) for the
                              matching .bin, plus provenance metadata.

Rerunning the script is deterministic given the same toolchain; the JSON
records the toolchain versions used to freeze the boundaries.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import subprocess
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from flipscan import elfimage
from flipscan.corpus import (
    CompilerConfig,
    build_entry,
    conv_spec,
    make_fake_dataset,
    mlp_spec,
    train,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")

# --- handcrafted executable --------------------------------------------------

# .text layout (64 bytes, vaddr 0x401000):
#   f1 @ +0x00, 32 bytes: push/mov/mov-imm/pop/ret then multi-byte nops
#   f2 @ +0x20, 24 bytes: loads, VEX2 + VEX3 vector ops, ret, 8-byte nop
#   tail @ +0x38, 8 bytes: single-byte nops OUTSIDE both symbols (pad fill)
MINI_TEXT = bytes(
    [
        # f1: 11 instruction bytes + alignment nops inside the symbol range
        0x55,                                      # push %rbp
        0x48, 0x89, 0xE5,                          # mov %rsp,%rbp
        0xB8, 0x2A, 0x00, 0x00, 0x00,              # mov $0x2a,%eax
        0x5D,                                      # pop %rbp
        0xC3,                                      # ret
        0x66, 0x0F, 0x1F, 0x44, 0x00, 0x00,        # 6-byte nopw
        0x0F, 0x1F, 0x80, 0x00, 0x00, 0x00, 0x00,  # 7-byte nopl
        0x0F, 0x1F, 0x44, 0x00, 0x00,              # 5-byte nopl
        0x90, 0x90, 0x90,                          # nop x3
        # f2
        0x48, 0x8B, 0x07,                          # mov (%rdi),%rax
        0x48, 0x01, 0xF0,                          # add %rsi,%rax
        0xC5, 0xFC, 0x28, 0x07,                    # vmovaps (%rdi),%ymm0
        0xC4, 0xE2, 0x75, 0x98, 0xC2,              # vfmadd132ps %ymm2,%ymm1,%ymm0
        0xC3,                                      # ret
        0x0F, 0x1F, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00,  # 8-byte nopl
        # inter-function fill (no covering symbol)
        0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90,
    ]
)

MINI_TEXT_VADDR = 0x401000
MINI_TEXT_OFFSET = 0x1000


def build_mini_elf() -> bytes:
    assert len(MINI_TEXT) == 64
    ehdr_fmt = struct.Struct("<16sHHIQQQIHHHHHH")
    phdr_fmt = struct.Struct("<IIQQQQQQ")
    shdr_fmt = struct.Struct("<IIQQQQIIQQ")
    sym_fmt = struct.Struct("<IBBHQQ")

    strtab = b"\x00f1\x00f2\x00"
    shstrtab = b"\x00.text\x00.symtab\x00.strtab\x00.shstrtab\x00"
    symtab = b"".join(
        [
            sym_fmt.pack(0, 0, 0, 0, 0, 0),
            sym_fmt.pack(1, 0x12, 0, 1, MINI_TEXT_VADDR, 32),        # f1
            sym_fmt.pack(4, 0x12, 0, 1, MINI_TEXT_VADDR + 0x20, 24),  # f2
        ]
    )

    symtab_off = MINI_TEXT_OFFSET + len(MINI_TEXT)
    strtab_off = symtab_off + len(symtab)
    shstrtab_off = strtab_off + len(strtab)
    shoff = shstrtab_off + len(shstrtab)
    assert shoff % 8 == 0, hex(shoff)

    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + b"\x00" * 8
    ehdr = ehdr_fmt.pack(
        ident, 2, 0x3E, 1, MINI_TEXT_VADDR, 0x40, shoff, 0,
        ehdr_fmt.size, phdr_fmt.size, 1, shdr_fmt.size, 5, 4,
    )
    load_size = symtab_off  # code + headers mapped; tables follow unmapped
    phdr = phdr_fmt.pack(1, 5, 0, 0x400000, 0x400000, load_size, load_size, 0x1000)

    shdrs = b"".join(
        [
            shdr_fmt.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
            shdr_fmt.pack(1, 1, 6, MINI_TEXT_VADDR, MINI_TEXT_OFFSET,
                          len(MINI_TEXT), 0, 0, 16, 0),
            shdr_fmt.pack(7, 2, 0, 0, symtab_off, len(symtab), 3, 1, 8, sym_fmt.size),
            shdr_fmt.pack(15, 3, 0, 0, strtab_off, len(strtab), 0, 0, 1, 0),
            shdr_fmt.pack(23, 3, 0, 0, shstrtab_off, len(shstrtab), 0, 0, 1, 0),
        ]
    )

    blob = bytearray(shoff + len(shdrs))
    blob[0:len(ehdr)] = ehdr
    blob[0x40:0x40 + len(phdr)] = phdr
    blob[MINI_TEXT_OFFSET:MINI_TEXT_OFFSET + len(MINI_TEXT)] = MINI_TEXT
    blob[symtab_off:symtab_off + len(symtab)] = symtab
    blob[strtab_off:strtab_off + len(strtab)] = strtab
    blob[shstrtab_off:shstrtab_off + len(shstrtab)] = shstrtab
    blob[shoff:shoff + len(shdrs)] = shdrs
    return bytes(blob)


# --- reference-disassembler boundary freezing --------------------------------


def objdump_starts(binary: str, text_vaddr: int) -> list[int]:
    """Text-relative instruction-start offsets per `objdump -d`."""
    proc = subprocess.run(
        ["objdump", "-d", "-z", "--section=.text", binary],
        capture_output=True, text=True, check=True,
    )
    starts = []
    for line in proc.stdout.splitlines():
        parts = line.split("\t")
        if len(parts) >= 3 and parts[2].strip():
            addr = int(parts[0].strip().rstrip(":"), 16)
            starts.append(addr - text_vaddr)
    return starts


def tool_versions() -> dict[str, str]:
    out = {}
    for tool in ("gcc", "objdump"):
        proc = subprocess.run([tool, "--version"], capture_output=True, text=True)
        out[tool] = proc.stdout.splitlines()[0] if proc.returncode == 0 else "unavailable"
    return out


DECODER_BUILDS = [
    ("mlp-o0-avx2", "mlp", CompilerConfig("O0", True)),
    ("mlp-o3-avx2", "mlp", CompilerConfig("O3", True)),
    ("mlp-o3-novec", "mlp", CompilerConfig("O3", False)),
    ("conv-o3-avx2", "conv", CompilerConfig("O3", True)),
]


def make_decoder_corpora(out_dir: str) -> None:
    versions = tool_versions()
    specs = {"mlp": mlp_spec(), "conv": conv_spec()}
    trained = {}
    for kind, spec in specs.items():
        ds = make_fake_dataset(77, 128, spec.input_shape, spec.class_count)
        trained[kind] = (spec, train(spec, ds, epochs=200, lr=0.05, seed=770), ds)

    with tempfile.TemporaryDirectory(prefix="fixture-builds-") as tmp:
        for name, kind, config in DECODER_BUILDS:
            spec, weights, ds = trained[kind]
            entry = build_entry(spec, weights, config, tmp, name,
                                check_inputs=ds.inputs[:8])
            img = elfimage.load(entry.binary_path)
            text = img.text_bytes
            starts = objdump_starts(entry.binary_path, img.text.vaddr)
            bin_path = os.path.join(out_dir, f"{name}.bin")
            with open(bin_path, "wb") as fh:
                fh.write(text)
            doc = {
                "name": name,
                "model": kind,
                "compiler_config": config.tag(),
                "text_vaddr": img.text.vaddr,
                "text_sha256": hashlib.sha256(text).hexdigest(),
                "instruction_starts": starts,
                "frozen_with": versions,
            }
            with open(os.path.join(out_dir, f"{name}.json"), "w") as fh:
                json.dump(doc, fh, indent=1)
            print(f"  {name}: {len(text)} text bytes, {len(starts)} instructions")


def main() -> None:
    os.makedirs(FIXTURES, exist_ok=True)
    decoder_dir = os.path.join(FIXTURES, "decoder")
    os.makedirs(decoder_dir, exist_ok=True)

    mini = build_mini_elf()
    mini_path = os.path.join(FIXTURES, "mini.elf")
    with open(mini_path, "wb") as fh:
        fh.write(mini)
    os.chmod(mini_path, 0o755)
    print(f"mini.elf: {len(mini)} bytes, text@{hex(MINI_TEXT_OFFSET)} "
          f"vaddr={hex(MINI_TEXT_VADDR)} size={len(MINI_TEXT)}")

    print("decoder corpora:")
    make_decoder_corpora(decoder_dir)


if __name__ == "__main__":
    main()
