"""Encoding of code targets into guaranteed-faulting addresses.

An invocation site hands its target to the other process's mini-debugger as
the address its faulting instruction touches. Each scheme maps the code
segment injectively into a slice of the fault namespace; the decision table
picks the scheme from the kind of fault that was raised.
"""
from __future__ import annotations

import ctypes
import enum
import faulthandler
import os
import resource
import signal
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import linux
from .domain import FaultKind

USER_SPACE_END = 1 << 47

# Fixed pages that stay user-accessible inside otherwise-kernel address space.
FIXED_USER_PAGES = (
    (0xFFFFFFFFFF600000, 0x1000),  # x86-64 vsyscall
    (0xFFFF0000, 0x1000),          # ARMv7 vectors
)


class CodecError(Exception):
    pass


class TargetOutOfRange(CodecError):
    pass


class DecodeOutOfCodeRange(CodecError):
    pass


class NoScheme(CodecError):
    pass


class ProbeFailure(CodecError):
    def __init__(self, message: str, report: ProbeReport | None = None):
        super().__init__(message)
        self.report = report


class SchemeKind(enum.Enum):
    MASK_OR = "mask_or"
    XOR_KEY = "xor_key"


@dataclass(frozen=True)
class AddressRange:
    base: int
    length: int

    @property
    def end(self) -> int:
        return self.base + self.length

    def __contains__(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def overlaps(self, base: int, length: int) -> bool:
        return self.base < base + length and base < self.end


@dataclass(frozen=True)
class FaultNamespace:
    ranges: Mapping[FaultKind, tuple[AddressRange, ...]]

    def __post_init__(self):
        for kind, ranges in self.ranges.items():
            for rng in ranges:
                if rng.length <= 0:
                    raise ValueError(f"empty namespace range {rng} for {kind.value}")
                for base, length in FIXED_USER_PAGES:
                    if rng.overlaps(base, length):
                        raise ValueError(f"namespace range {rng.base:#x}+{rng.length:#x} covers the fixed user page at {base:#x}")

    @classmethod
    def build(cls, ranges: Mapping[FaultKind, Sequence[tuple[int, int]]]) -> FaultNamespace:
        return cls({kind: tuple(AddressRange(b, n) for b, n in rs) for kind, rs in ranges.items()})

    def contains(self, kind: FaultKind, addr: int) -> bool:
        return any(addr in rng for rng in self.ranges.get(kind, ()))


@dataclass(frozen=True)
class CodecScheme:
    scheme_id: int
    kind: SchemeKind
    param: int
    fault_kind: FaultKind


@dataclass(frozen=True)
class CodecConfig:
    namespace: FaultNamespace
    schemes: Mapping[int, CodecScheme]
    decision: Mapping[FaultKind, int]
    code_range: AddressRange | None = None
    # Legacy identifier table for breakpoint-style sites: identifier -> target.
    trap_table: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for kind, scheme_id in self.decision.items():
            scheme = self.schemes.get(scheme_id)
            if scheme is None:
                raise ValueError(f"decision table names unknown scheme {scheme_id}")
            if scheme.fault_kind is not kind:
                raise ValueError(f"scheme {scheme_id} is bound to {scheme.fault_kind.value}, not {kind.value}")
        if self.code_range is not None:
            for scheme in self.schemes.values():
                check_scheme_image(scheme, self.namespace, self.code_range)

    def with_code_range(self, code_range: AddressRange) -> CodecConfig:
        return CodecConfig(self.namespace, self.schemes, self.decision, code_range, self.trap_table)

    def with_trap_table(self, table: Mapping[int, int]) -> CodecConfig:
        return CodecConfig(self.namespace, self.schemes, self.decision, self.code_range, dict(table))

    def scheme_for_kind(self, kind: FaultKind) -> CodecScheme:
        try:
            return self.schemes[self.decision[kind]]
        except KeyError:
            raise NoScheme(f"no scheme bound to {kind.value}") from None


def check_scheme_image(scheme: CodecScheme, ns: FaultNamespace, code: AddressRange) -> None:
    """Reject a scheme whose image of ``code`` leaves the namespace.

    Both scheme kinds act bitwise, so the image of an interval is covered by
    checking the endpoints together with the parameter's interaction with
    every bit the interval can vary in.
    """
    last = code.end - 1
    varying = (code.base ^ last).bit_length()
    span = (1 << varying) - 1
    if scheme.kind is SchemeKind.MASK_OR:
        if (code.base | last | span) & scheme.param:
            raise ValueError(f"mask {scheme.param:#x} overlaps code range bits; encoding would not be injective")
        lo, hi = code.base | scheme.param, last | scheme.param
    else:
        lo = (code.base & ~span) ^ scheme.param & ~span
        hi = lo | span
    if not any(lo in rng and hi in rng for rng in ns.ranges.get(scheme.fault_kind, ())):
        raise ValueError(f"scheme {scheme.scheme_id} maps the code range outside the {scheme.fault_kind.value} namespace")


def encode_target(target: int, scheme: CodecScheme, ns: FaultNamespace,
                  code_range: AddressRange | None = None) -> int:
    if target < 0 or target >= USER_SPACE_END:
        raise TargetOutOfRange(f"target {target:#x} is not a user-space code address")
    if code_range is not None and target not in code_range:
        raise TargetOutOfRange(f"target {target:#x} outside registered code {code_range.base:#x}..{code_range.end:#x}")
    if scheme.kind is SchemeKind.MASK_OR:
        if target & scheme.param:
            raise TargetOutOfRange(f"target {target:#x} shares bits with mask {scheme.param:#x}")
        encoded = target | scheme.param
    else:
        encoded = target ^ scheme.param
    if not ns.contains(scheme.fault_kind, encoded):
        raise TargetOutOfRange(f"{target:#x} encodes to {encoded:#x}, outside the fault namespace")
    return encoded


def decode_target(fault_address: int, scheme: CodecScheme, code_range: AddressRange | None = None) -> int:
    if scheme.kind is SchemeKind.MASK_OR:
        if fault_address & scheme.param != scheme.param:
            raise DecodeOutOfCodeRange(f"{fault_address:#x} is not in the image of mask {scheme.param:#x}")
        target = fault_address & ~scheme.param
    else:
        target = fault_address ^ scheme.param
    if target >= USER_SPACE_END:
        raise DecodeOutOfCodeRange(f"{fault_address:#x} decodes to non-user address {target:#x}")
    if code_range is not None and target not in code_range:
        raise DecodeOutOfCodeRange(f"{fault_address:#x} decodes to {target:#x}, outside the code segment")
    return target


def select_scheme(event, config: CodecConfig) -> CodecScheme:
    kind = event.fault_kind
    if kind is None or kind is FaultKind.TRAP_REFERENCE:
        raise NoScheme("breakpoint-style sites carry identifiers, not encoded addresses")
    return config.scheme_for_kind(kind)


# -- defaults ---------------------------------------------------------------

MASK_OR_64 = 0x4000_0000_0000_0000
XOR_KEY_64 = 0x5A3C_1D2E_3F40_5A60


def default_namespace(word_bits: int = 64) -> FaultNamespace:
    if word_bits == 64:
        # Slices of the non-canonical hole: any access raises #GP.
        return FaultNamespace.build({
            FaultKind.SEGV_LOAD_STORE: [(MASK_OR_64, USER_SPACE_END)],
            FaultKind.SEGV_EXEC: [(XOR_KEY_64 & ~(USER_SPACE_END - 1), USER_SPACE_END)],
        })
    if word_bits == 32:
        kernel = [(0xC0000000, 0x3FFF0000)]  # stops short of the vectors page
        return FaultNamespace.build({FaultKind.SEGV_LOAD_STORE: kernel, FaultKind.SEGV_EXEC: kernel})
    raise ValueError(f"unsupported word size {word_bits}")


def default_schemes(word_bits: int = 64) -> dict[int, CodecScheme]:
    if word_bits == 64:
        return {
            1: CodecScheme(1, SchemeKind.MASK_OR, MASK_OR_64, FaultKind.SEGV_LOAD_STORE),
            2: CodecScheme(2, SchemeKind.XOR_KEY, XOR_KEY_64, FaultKind.SEGV_EXEC),
        }
    return {
        1: CodecScheme(1, SchemeKind.MASK_OR, 0xC0000000, FaultKind.SEGV_LOAD_STORE),
        2: CodecScheme(2, SchemeKind.XOR_KEY, 0xC0A5A5A0, FaultKind.SEGV_EXEC),
    }


def default_codec_config(code_range: AddressRange | None = None, word_bits: int = 64) -> CodecConfig:
    schemes = default_schemes(word_bits)
    return CodecConfig(
        namespace=default_namespace(word_bits),
        schemes=schemes,
        decision={s.fault_kind: s.scheme_id for s in schemes.values()},
        code_range=code_range,
    )


# -- namespace probing -------------------------------------------------------

ACCESS_LOAD = "load"
ACCESS_STORE = "store"
ACCESS_EXEC = "exec"

ACCESSES_FOR_KIND = {
    FaultKind.SEGV_LOAD_STORE: (ACCESS_LOAD, ACCESS_STORE),
    FaultKind.SEGV_EXEC: (ACCESS_EXEC,),
}

_PROBE_CODE = {
    ACCESS_LOAD: bytes.fromhex("488b07c3"),    # mov rax, [rdi]; ret
    ACCESS_STORE: bytes.fromhex("488937c3"),   # mov [rdi], rsi; ret
    ACCESS_EXEC: bytes.fromhex("ffe7"),        # jmp rdi
}
_probe_page: dict[str, int] = {}


def _probe_gadget(access: str):
    if not _probe_page:
        page = linux.map_pages(4096, linux.PROT_READ | linux.PROT_WRITE)
        offset = 0
        for name, code in _PROBE_CODE.items():
            ctypes.memmove(page + offset, code, len(code))
            _probe_page[name] = page + offset
            offset += 16
        linux.protect_pages(page, 4096, linux.PROT_READ | linux.PROT_EXEC)
    return ctypes.CFUNCTYPE(ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p)(_probe_page[access])


@dataclass(frozen=True)
class ProbeResult:
    kind: FaultKind
    range: AddressRange
    access: str
    address: int
    faulted: bool
    detail: str


@dataclass(frozen=True)
class ProbeReport:
    results: tuple[ProbeResult, ...]

    @property
    def ok(self) -> bool:
        return all(r.faulted for r in self.results)

    def failures(self) -> list[ProbeResult]:
        return [r for r in self.results if not r.faulted]


def _sample_addresses(rng: AddressRange) -> list[int]:
    last = (rng.end - 8) & ~7
    picks = {rng.base, last, (rng.base + rng.length // 2) & ~7}
    # a few deterministic interior points spread over the range
    for k in (3, 5, 7):
        picks.add((rng.base + rng.length * k // 11) & ~7)
    return sorted(p for p in picks if p in rng)


def _probe_one(access: str, address: int, timeout: float) -> tuple[bool, str]:
    gadget = _probe_gadget(access)
    pid = os.fork()
    if pid == 0:
        try:
            faulthandler.disable()
            resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
            signal.signal(signal.SIGSEGV, signal.SIG_DFL)
            gadget(address, 0)
        finally:
            os._exit(0)
    deadline = time.monotonic() + timeout
    while True:
        got, status = os.waitpid(pid, os.WNOHANG)
        if got:
            break
        if time.monotonic() > deadline:
            os.kill(pid, signal.SIGKILL)
            os.waitpid(pid, 0)
            return False, "probe child hung"
        time.sleep(0.001)
    if os.WIFSIGNALED(status) and os.WTERMSIG(status) == signal.SIGSEGV:
        return True, "SIGSEGV"
    if os.WIFSIGNALED(status):
        return False, f"killed by {signal.Signals(os.WTERMSIG(status)).name}"
    return False, f"access completed (exit {os.WEXITSTATUS(status)})"


def probe_namespace(ns: FaultNamespace, timeout: float = 2.0, strict: bool = True) -> ProbeReport:
    """Touch sample addresses of every range in a sacrificial child process.

    Must run before the reciprocal attach: the forked probe children would
    otherwise generate child notices for the counterpart.
    """
    results = []
    for kind, ranges in ns.ranges.items():
        for rng in ranges:
            for access in ACCESSES_FOR_KIND.get(kind, ()):
                for address in _sample_addresses(rng):
                    faulted, detail = _probe_one(access, address, timeout)
                    results.append(ProbeResult(kind, rng, access, address, faulted, detail))
    report = ProbeReport(tuple(results))
    if strict and not report.ok:
        bad = report.failures()[0]
        raise ProbeFailure(
            f"{bad.access} at {bad.address:#x} in range {bad.range.base:#x}+{bad.range.length:#x} "
            f"did not fault: {bad.detail}", report)
    return report
