import ctypes

import capstone
import pytest
from capstone import x86 as csx86
from elftools.elf.elffile import ELFFile
from hypothesis import given
from hypothesis import strategies as st

from selfdbg.domain import GPR_BY_NUMBER, FaultKind
from selfdbg.image import (CATCH_TOKEN, CodeImage, call_reg, decode_fault_operand, jmp_reg, mov_load, mov_store,
                           movabs, push_imm32, write_elf)

MD = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
MD.detail = True

plain_bases = st.sampled_from([r for r in range(16) if r & 7 not in (4, 5)])
any_reg = st.integers(0, 15)


def cs_one(code):
    insns = list(MD.disasm(code, 0x1000))
    assert insns, code.hex()
    return insns[0]


@given(any_reg, plain_bases)
def test_load_decodes_like_capstone(dst, base):
    code = mov_load(dst, base)
    kind, reg, length = decode_fault_operand(code + b"\xc3")
    insn = cs_one(code)
    mem = [op for op in insn.operands if op.type == csx86.X86_OP_MEM][0]
    assert kind is FaultKind.SEGV_LOAD_STORE
    assert GPR_BY_NUMBER[reg] == insn.reg_name(mem.mem.base)
    assert length == insn.size == len(code)


@given(plain_bases, any_reg)
def test_store_decodes_like_capstone(base, src):
    code = mov_store(base, src)
    kind, reg, length = decode_fault_operand(code)
    insn = cs_one(code)
    assert kind is FaultKind.SEGV_LOAD_STORE
    assert insn.mnemonic == "mov" and insn.operands[0].type == csx86.X86_OP_MEM
    assert GPR_BY_NUMBER[reg] == insn.reg_name(insn.operands[0].mem.base)
    assert length == insn.size


@given(any_reg, st.sampled_from([jmp_reg, call_reg]))
def test_branches_decode_like_capstone(r, enc):
    code = enc(r)
    kind, reg, length = decode_fault_operand(code)
    insn = cs_one(code)
    assert kind is FaultKind.SEGV_EXEC
    assert insn.mnemonic == ("jmp" if enc is jmp_reg else "call")
    assert GPR_BY_NUMBER[reg] == insn.reg_name(insn.operands[0].reg)
    assert length == insn.size


@given(any_reg, st.integers(0, (1 << 64) - 1))
def test_movabs_matches_capstone(r, imm):
    insn = cs_one(movabs(r, imm))
    assert insn.size == 10
    assert insn.reg_name(insn.operands[0].reg) == GPR_BY_NUMBER[r]
    assert insn.operands[1].imm & ((1 << 64) - 1) == imm


def test_other_instructions_are_not_fault_sites():
    assert decode_fault_operand(b"") is None
    assert decode_fault_operand(b"\x90\x90") is None
    assert decode_fault_operand(movabs(0, 5)) is None
    assert decode_fault_operand(b"\x48\x8b\x04\x24") is None  # mov rax, [rsp]: SIB form
    assert decode_fault_operand(b"\xcc") == (FaultKind.TRAP_REFERENCE, None, 1)


def test_bases_needing_sib_are_refused():
    for base in (4, 5, 12, 13):
        with pytest.raises(ValueError):
            mov_load(0, base)


def test_push_imm32():
    insn = cs_one(push_imm32(0x12345678))
    assert insn.mnemonic == "push" and insn.operands[0].imm == 0x12345678


def test_image_landing_pad_and_helpers():
    img = CodeImage(helper_pairs=6)
    assert img.call(img.loop_entry) & 0xFFFFFFFF == CATCH_TOKEN
    assert img.call(img.answer) == 42
    word = ctypes.c_uint64(0xDEADBEEF01)
    for h in img.helpers:
        decoded = decode_fault_operand(img.read(h.fault_pc, 16))
        assert decoded[0] is h.kind and decoded[1] == h.addr_reg
        if h.name.startswith("peek"):
            assert img.peek(h, ctypes.addressof(word)) == 0xDEADBEEF01
        if h.name.startswith("tail"):
            assert img.tail_call(h, img.answer) == 42


def test_image_is_sealed_executable():
    img = CodeImage(helper_pairs=2)
    with open("/proc/self/maps") as fh:
        line = next(ln for ln in fh if ln.startswith(f"{img.base:x}-"))
    assert line.split()[1].startswith("r-x")


def test_write_elf_round_trip(tmp_path):
    img = CodeImage(helper_pairs=3)
    path = tmp_path / "image.elf"
    write_elf(str(path), img.snapshot(), img.base, img.loop_entry)
    with open(path, "rb") as fh:
        elf = ELFFile(fh)
        text = elf.get_section_by_name(".text")
        assert text["sh_addr"] == img.base
        assert text.data() == img.snapshot()
        assert elf.header["e_entry"] == img.loop_entry
        assert [s["p_type"] for s in elf.iter_segments()] == ["PT_LOAD"]
