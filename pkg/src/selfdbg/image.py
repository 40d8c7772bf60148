"""Native x86-64 code image shared by both processes.

The image is a private anonymous mapping created before the fork, so the
application and the self-debugger see identical code at identical
addresses. It holds the catcher landing pad, a pool of ordinary helper
routines whose memory or branch instructions invocation sites may reuse,
entry thunks for migrated fragments, and the invocation sites themselves.
"""
from __future__ import annotations

import ctypes
import struct
from dataclasses import dataclass

from . import linux
from .codec import AddressRange
from .domain import GPR_BY_NUMBER, FaultKind

RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)
R8, R9, R10, R11 = 8, 9, 10, 11

# Value a site call returns once the caller has been turned into the catcher.
CATCH_TOKEN = 0x5EEDC0DE

INT3 = 0xCC
NOP = 0x90
ALIGN = 16
DEFAULT_IMAGE_SIZE = 256 * 1024


# -- encoders ---------------------------------------------------------------

def _rex(w: bool, reg: int = 0, rm: int = 0) -> bytes:
    value = 0x40 | (8 if w else 0) | (4 if reg >= 8 else 0) | (1 if rm >= 8 else 0)
    return bytes([value]) if value != 0x40 else b""


def _modrm(mod: int, reg: int, rm: int) -> int:
    return (mod << 6) | ((reg & 7) << 3) | (rm & 7)


def _plain_base(reg: int) -> None:
    if reg & 7 in (RSP, RBP):
        raise ValueError(f"{GPR_BY_NUMBER[reg]} needs SIB or displacement; not emitted")


def movabs(reg: int, imm: int) -> bytes:
    return _rex(True, 0, reg) + bytes([0xB8 + (reg & 7)]) + struct.pack("<Q", imm & ((1 << 64) - 1))


def mov_load(dst: int, base: int) -> bytes:
    _plain_base(base)
    return _rex(True, dst, base) + bytes([0x8B, _modrm(0, dst, base)])


def mov_store(base: int, src: int) -> bytes:
    _plain_base(base)
    return _rex(True, src, base) + bytes([0x89, _modrm(0, src, base)])


def jmp_reg(reg: int) -> bytes:
    return _rex(False, 0, reg) + bytes([0xFF, _modrm(3, 4, reg)])


def call_reg(reg: int) -> bytes:
    return _rex(False, 0, reg) + bytes([0xFF, _modrm(3, 2, reg)])


def call_rel(src: int, dst: int) -> bytes:
    return b"\xE8" + struct.pack("<i", dst - (src + 5))


def mov_eax(imm: int) -> bytes:
    return b"\xB8" + struct.pack("<I", imm & 0xFFFFFFFF)


def push_imm32(imm: int) -> bytes:
    return b"\x68" + struct.pack("<I", imm & 0xFFFFFFFF)


ADD_RSP_8 = b"\x48\x83\xC4\x08"
XOR_EAX_EAX = b"\x31\xC0"
RET = b"\xC3"


def decode_fault_operand(code: bytes) -> tuple[FaultKind, int | None, int] | None:
    """Recognise the faulting instruction at the start of ``code``.

    Returns (fault kind, ModRM number of the register holding the accessed or
    branched-to address, instruction length), or None for anything else.
    A breakpoint has no address register.
    """
    if not code:
        return None
    if code[0] == INT3:
        return FaultKind.TRAP_REFERENCE, None, 1
    i = 0
    rex = 0
    if 0x40 <= code[0] <= 0x4F:
        rex = code[0]
        i = 1
    if len(code) < i + 2:
        return None
    opcode, modrm = code[i], code[i + 1]
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    rm_full = rm | (8 if rex & 1 else 0)
    if opcode in (0x8B, 0x89) and mod == 0 and rm not in (RSP, RBP):
        return FaultKind.SEGV_LOAD_STORE, rm_full, i + 2
    if opcode == 0xFF and mod == 3 and reg in (2, 4):
        return FaultKind.SEGV_EXEC, rm_full, i + 2
    return None


# -- the image --------------------------------------------------------------

@dataclass(frozen=True)
class Helper:
    """A benign routine in the image whose faulting-capable instruction can be reused."""

    name: str
    addr: int
    fault_pc: int
    kind: FaultKind
    addr_reg: int


class ImageFull(RuntimeError):
    pass


class CodeImage:
    def __init__(self, size: int = DEFAULT_IMAGE_SIZE, helper_pairs: int = 24):
        self.size = size
        self.base = linux.map_pages(size, linux.PROT_READ | linux.PROT_WRITE)
        self._used = 0
        self._writable = True
        self.labels: dict[str, int] = {}
        self.loop_entry = self._emit("loop_entry", mov_eax(CATCH_TOKEN) + RET)
        self.answer = self._emit("answer", mov_eax(42) + RET)
        self._helpers: list[Helper] = []
        self._build_helper_pool(helper_pairs)
        self._next_helper = {FaultKind.SEGV_LOAD_STORE: 0, FaultKind.SEGV_EXEC: 0}
        self.seal()

    @property
    def code_range(self) -> AddressRange:
        return AddressRange(self.base, self.size)

    @property
    def used(self) -> int:
        return self._used

    def _emit(self, label: str | None, code: bytes) -> int:
        start = (self._used + ALIGN - 1) & ~(ALIGN - 1)
        if start + len(code) > self.size:
            raise ImageFull(f"code image of {self.size} bytes exhausted")
        if not self._writable:
            linux.protect_pages(self.base, self.size, linux.PROT_READ | linux.PROT_WRITE)
            self._writable = True
        if start > self._used:
            ctypes.memmove(self.base + self._used, bytes([NOP]) * (start - self._used), start - self._used)
        addr = self.base + start
        ctypes.memmove(addr, code, len(code))
        self._used = start + len(code)
        if label:
            self.labels[label] = addr
        return addr

    def emit(self, label: str | None, code: bytes) -> int:
        addr = self._emit(label, code)
        self.seal()
        return addr

    def emit_at_next(self, builder, label: str | None = None) -> int:
        """Emit code whose bytes depend on its own address (relative calls)."""
        start = self.base + ((self._used + ALIGN - 1) & ~(ALIGN - 1))
        return self.emit(label, builder(start))

    def seal(self) -> None:
        if self._writable:
            linux.protect_pages(self.base, self.size, linux.PROT_READ | linux.PROT_EXEC)
            self._writable = False

    def _build_helper_pool(self, pairs: int) -> None:
        # Ordinary little routines: word peek/poke and pointer tail calls, some
        # with a side-effect-free instruction ahead of the access.
        for i in range(pairs):
            if i % 3 == 2:
                body = mov_store(RDI, RSI) + RET
                name, lead = f"poke_{i}", b""
            elif i % 2:
                lead = XOR_EAX_EAX
                body = lead + mov_load(RAX, RDI) + RET
                name = f"peek_z_{i}"
            else:
                lead = b""
                body = mov_load(RAX, RDI) + RET
                name = f"peek_{i}"
            addr = self._emit(name, body)
            self._helpers.append(Helper(name, addr, addr + len(lead), FaultKind.SEGV_LOAD_STORE, RDI))
            lead = XOR_EAX_EAX if i % 2 else b""
            addr = self._emit(f"tail_{i}", lead + jmp_reg(RDI))
            self._helpers.append(Helper(f"tail_{i}", addr, addr + len(lead), FaultKind.SEGV_EXEC, RDI))

    @property
    def helpers(self) -> tuple[Helper, ...]:
        return tuple(self._helpers)

    def take_helper(self, kind: FaultKind) -> Helper:
        pool = [h for h in self._helpers if h.kind is kind]
        index = self._next_helper[kind]
        if index >= len(pool):
            raise ImageFull(f"no unused {kind.value} helper left to reuse")
        self._next_helper[kind] = index + 1
        return pool[index]

    def helper_at(self, fault_pc: int) -> Helper | None:
        for h in self._helpers:
            if h.fault_pc == fault_pc:
                return h
        return None

    def read(self, addr: int, length: int) -> bytes:
        return ctypes.string_at(addr, length)

    def snapshot(self) -> bytes:
        return ctypes.string_at(self.base, self._used)

    # benign entry points into the helper pool

    def call(self, addr: int, *args: int) -> int:
        fn = ctypes.CFUNCTYPE(ctypes.c_long, *([ctypes.c_void_p] * len(args)))(addr)
        return fn(*args)

    def peek(self, helper: Helper, addr: int) -> int:
        return self.call(helper.addr, addr) & ((1 << 64) - 1)

    def tail_call(self, helper: Helper, fnptr: int) -> int:
        return self.call(helper.addr, fnptr)


# -- ELF output ----------------------------------------------------------------

def write_elf(path: str, code: bytes, vaddr: int, entry: int | None = None) -> None:
    """Write ``code`` as a minimal ELF64 executable image with one RX segment and a .text section."""
    ehdr_size, phdr_size, shdr_size = 64, 56, 64
    text_off = 0x1000
    shstrtab = b"\x00.text\x00.shstrtab\x00"
    shstr_off = text_off + len(code)
    sh_off = (shstr_off + len(shstrtab) + 7) & ~7

    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
    ehdr = ident + struct.pack("<HHIQQQIHHHHHH", 2, 62, 1, entry if entry is not None else vaddr,
                               ehdr_size, sh_off, 0, ehdr_size, phdr_size, 1, shdr_size, 3, 2)
    phdr = struct.pack("<IIQQQQQQ", 1, 5, text_off, vaddr, vaddr, len(code), len(code), 0x1000)
    null_sh = bytes(shdr_size)
    text_sh = struct.pack("<IIQQQQIIQQ", 1, 1, 0x6, vaddr, text_off, len(code), 0, 0, 16, 0)
    str_sh = struct.pack("<IIQQQQIIQQ", 7, 3, 0, 0, shstr_off, len(shstrtab), 0, 0, 1, 0)

    blob = bytearray(ehdr + phdr)
    blob += bytes(text_off - len(blob))
    blob += code
    blob += shstrtab
    blob += bytes(sh_off - len(blob))
    blob += null_sh + text_sh + str_sh
    with open(path, "wb") as fh:
        fh.write(blob)
