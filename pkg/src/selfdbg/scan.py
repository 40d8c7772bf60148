"""What a static scanner sees in an emitted code image.

Counts explicit breakpoint opcodes at registered invocation sites, and sites
whose encoded constant is loaded by a ``movabs`` into the very register the
faulting instruction dereferences or branches through, immediately before
it. Site locations come from the ``.sites.json`` sidecar written next to the
image.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import capstone
from capstone import x86 as csx86
from elftools.common.exceptions import ELFError
from elftools.elf.elffile import ELFFile

INT3 = 0xCC


class UnreadableBinary(Exception):
    pass


@dataclass(frozen=True)
class TextImage:
    data: bytes
    addr: int

    def byte_at(self, addr: int) -> int | None:
        off = addr - self.addr
        return self.data[off] if 0 <= off < len(self.data) else None


def load_text(binary_path: str) -> TextImage:
    try:
        with open(binary_path, "rb") as fh:
            elf = ELFFile(fh)
            text = elf.get_section_by_name(".text")
            if text is None:
                raise UnreadableBinary(f"{binary_path}: no .text section")
            return TextImage(text.data(), text["sh_addr"])
    except (OSError, ELFError) as e:
        raise UnreadableBinary(f"{binary_path}: {e}") from e


def sidecar_path(binary_path: str) -> str:
    return binary_path + ".sites.json"


def load_sites(binary_path: str, sites_path: str | None = None) -> list[dict]:
    path = sites_path or sidecar_path(binary_path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as e:
        raise UnreadableBinary(f"{path}: {e}") from e
    return raw["sites"]


def _disassemble(text: TextImage) -> list:
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
    md.detail = True
    md.skipdata = True
    return list(md.disasm(text.data, text.addr))


def _uses_reg_as_address(insn, reg: int) -> bool:
    if insn.id == 0:  # skipped data
        return False
    if insn.mnemonic in ("jmp", "call"):
        ops = insn.operands
        return len(ops) == 1 and ops[0].type == csx86.X86_OP_REG and ops[0].reg == reg
    for op in insn.operands:
        if op.type == csx86.X86_OP_MEM and op.mem.base == reg and op.mem.index == 0 and op.mem.disp == 0:
            return True
    return False


def _movabs_target(insn) -> int | None:
    if insn.id == 0 or insn.mnemonic not in ("movabs", "mov") or insn.size != 10:
        return None
    ops = insn.operands
    if len(ops) == 2 and ops[0].type == csx86.X86_OP_REG and ops[1].type == csx86.X86_OP_IMM:
        return ops[0].reg
    return None


def adjacent_setup_pairs(insns) -> list[tuple[int, int]]:
    """(setup pc, fault pc) for every movabs immediately followed by a use of that register as an address."""
    pairs = []
    for prev, cur in zip(insns, insns[1:]):
        reg = _movabs_target(prev)
        if reg is not None and prev.address + prev.size == cur.address and _uses_reg_as_address(cur, reg):
            pairs.append((prev.address, cur.address))
    return pairs


def static_footprint_report(binary_path: str, sites_path: str | None = None) -> dict:
    text = load_text(binary_path)
    sites = load_sites(binary_path, sites_path)
    insns = _disassemble(text)
    pairs = adjacent_setup_pairs(insns)
    fault_pcs_with_setup = {fault for _, fault in pairs}
    details = []
    traps = adjacent = 0
    for site in sites:
        pc = int(site["pc"], 16) if isinstance(site["pc"], str) else int(site["pc"])
        byte = text.byte_at(pc)
        is_trap = byte == INT3
        has_setup = pc in fault_pcs_with_setup
        traps += is_trap
        adjacent += has_setup
        details.append({"pc": hex(pc), "kind": site.get("kind"), "flavor": site.get("flavor"),
                        "role": site.get("role", "invoke"), "trap_opcode": is_trap, "adjacent_setup": has_setup})
    return {
        "binary": os.path.basename(binary_path),
        "site_count": len(sites),
        "trap_opcodes": traps,
        "adjacent_pairs": adjacent,
        "image_adjacent_pairs": len(pairs),
        "instructions": len(insns),
        "details": details,
    }
