"""Domain types shared by the protocol, codec, fragment registry and runtime."""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Iterable

# Field order of the x86-64 ``struct user_regs_struct`` (sys/user.h).
REGISTER_NAMES = (
    "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8",
    "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags",
    "rsp", "ss", "fs_base", "gs_base", "ds", "es", "fs", "gs",
)

# ModRM register numbering, used when decoding fault operands.
GPR_BY_NUMBER = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)

WORD_MASK = (1 << 64) - 1


class ProcessRole(enum.Enum):
    THROWER = "thrower"
    CATCHER = "catcher"

    def other(self) -> ProcessRole:
        return ProcessRole.CATCHER if self is ProcessRole.THROWER else ProcessRole.THROWER


class FaultKind(enum.Enum):
    SEGV_LOAD_STORE = "segv_load_store"
    SEGV_EXEC = "segv_exec"
    TRAP_REFERENCE = "trap_reference"


class SiteFlavor(enum.Enum):
    INLINE = "inline"
    REUSED_CODE = "reused_code"


@dataclass(frozen=True)
class RegisterSnapshot:
    r15: int = 0
    r14: int = 0
    r13: int = 0
    r12: int = 0
    rbp: int = 0
    rbx: int = 0
    r11: int = 0
    r10: int = 0
    r9: int = 0
    r8: int = 0
    rax: int = 0
    rcx: int = 0
    rdx: int = 0
    rsi: int = 0
    rdi: int = 0
    orig_rax: int = 0
    rip: int = 0
    cs: int = 0
    eflags: int = 0
    rsp: int = 0
    ss: int = 0
    fs_base: int = 0
    gs_base: int = 0
    ds: int = 0
    es: int = 0
    fs: int = 0
    gs: int = 0

    @property
    def pc(self) -> int:
        return self.rip

    @property
    def sp(self) -> int:
        return self.rsp

    def words(self) -> tuple[int, ...]:
        return tuple(getattr(self, name) for name in REGISTER_NAMES)

    @classmethod
    def from_words(cls, words: Iterable[int]) -> RegisterSnapshot:
        values = [w & WORD_MASK for w in words]
        if len(values) != len(REGISTER_NAMES):
            raise ValueError(f"expected {len(REGISTER_NAMES)} register words, got {len(values)}")
        return cls(**dict(zip(REGISTER_NAMES, values)))

    def replace(self, **changes: int) -> RegisterSnapshot:
        return dataclasses.replace(self, **{k: v & WORD_MASK for k, v in changes.items()})

    def gpr(self, number: int) -> int:
        return getattr(self, GPR_BY_NUMBER[number])

    def diff(self, other: RegisterSnapshot) -> dict[str, tuple[int, int]]:
        return {
            name: (getattr(self, name), getattr(other, name))
            for name in REGISTER_NAMES
            if getattr(self, name) != getattr(other, name)
        }


@dataclass(frozen=True)
class InvocationSite:
    """A fault-raising program point registered in the whitelist.

    ``addr_reg`` is the general-purpose register (ModRM number) that holds the
    encoded target when the faulting instruction executes; ``continuation`` is
    where control resumes in the invoking process once the migrated call
    completes (zero for return sites, which never resume locally).
    """

    pc: int
    fault_kind: FaultKind
    scheme_id: int
    flavor: SiteFlavor = SiteFlavor.INLINE
    addr_reg: int = 0
    continuation: int = 0
