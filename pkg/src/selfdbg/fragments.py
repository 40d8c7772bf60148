"""Registration of migrated fragments and generation of their invocation sites.

Every fragment gets an entry thunk in the shared code image plus one or more
invocation sites. Each invocation site is paired with a return site that
carries the caller's continuation back, so a round trip is two switches.
"""
from __future__ import annotations

import ctypes
import json
import secrets
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import linux
from .codec import AddressRange, CodecConfig, default_codec_config, encode_target
from .domain import FaultKind, InvocationSite, SiteFlavor
from .image import (ADD_RSP_8, INT3, RAX, RDI, RET, RSI, RSP, CodeImage, call_reg, call_rel, jmp_reg,
                    mov_load, mov_store, movabs, push_imm32, write_elf)

CONVENTIONS = ("payload", "rax")
_KINDS = (FaultKind.SEGV_LOAD_STORE, FaultKind.SEGV_EXEC, FaultKind.TRAP_REFERENCE)
_FLAVORS = (SiteFlavor.INLINE, SiteFlavor.REUSED_CODE)


class RegistrationError(Exception):
    pass


class DuplicateSite(RegistrationError):
    pass


class EntryOutOfRange(RegistrationError):
    pass


class WhitelistFrozen(RegistrationError):
    pass


class UnknownFragment(RegistrationError):
    pass


# -- whitelist ----------------------------------------------------------------

_ENTRY = struct.Struct("<QQQ")


class MaskedWhitelist:
    """pc -> InvocationSite, stored XOR-masked in its own page-aligned region.

    The index keys on masked pcs as well, so no plain site pc is kept at rest.
    """

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self.region_size = (capacity * _ENTRY.size + 4095) & ~4095
        self.region = linux.map_pages(self.region_size, linux.PROT_READ | linux.PROT_WRITE)
        self._pc_key = secrets.randbits(64) | 1
        self._meta_key = secrets.randbits(64)
        self._cont_key = secrets.randbits(64)
        self._slots: dict[int, int] = {}
        self.frozen = False

    def __len__(self) -> int:
        return len(self._slots)

    def __contains__(self, pc: int) -> bool:
        return (pc ^ self._pc_key) in self._slots

    def add(self, site: InvocationSite) -> None:
        if self.frozen:
            raise WhitelistFrozen("whitelist is frozen; register fragments before protection starts")
        masked = site.pc ^ self._pc_key
        if masked in self._slots:
            raise DuplicateSite(f"a site is already registered at {site.pc:#x}")
        slot = len(self._slots)
        if slot >= self.capacity:
            raise RegistrationError("whitelist full")
        meta = (_KINDS.index(site.fault_kind) | _FLAVORS.index(site.flavor) << 2
                | (site.addr_reg & 0xF) << 4 | (site.scheme_id & 0xFFFF) << 8)
        raw = _ENTRY.pack(masked, meta ^ self._meta_key, site.continuation ^ self._cont_key)
        ctypes.memmove(self.region + slot * _ENTRY.size, raw, len(raw))
        self._slots[masked] = slot

    def lookup(self, pc: int) -> InvocationSite | None:
        slot = self._slots.get(pc ^ self._pc_key)
        if slot is None:
            return None
        return self._unpack(slot)

    def _unpack(self, slot: int) -> InvocationSite:
        masked, meta, cont = _ENTRY.unpack(ctypes.string_at(self.region + slot * _ENTRY.size, _ENTRY.size))
        meta ^= self._meta_key
        return InvocationSite(
            pc=masked ^ self._pc_key,
            fault_kind=_KINDS[meta & 3],
            scheme_id=(meta >> 8) & 0xFFFF,
            flavor=_FLAVORS[(meta >> 2) & 3],
            addr_reg=(meta >> 4) & 0xF,
            continuation=cont ^ self._cont_key,
        )

    def sites(self) -> list[InvocationSite]:
        return [self._unpack(slot) for slot in sorted(self._slots.values())]

    def storage_bytes(self) -> bytes:
        return ctypes.string_at(self.region, len(self._slots) * _ENTRY.size)

    def freeze(self) -> None:
        self.frozen = True
        linux.protect_pages(self.region, self.region_size, linux.PROT_READ)


# -- descriptors ----------------------------------------------------------------

@dataclass(frozen=True)
class SiteSpec:
    """What kind of invocation site to generate.

    ``access`` picks the instruction: load or store for load/store sites,
    jump or call for branch sites. ``reuse_pc`` names a specific helper
    instruction to reuse instead of the next free one.
    """

    kind: FaultKind = FaultKind.SEGV_LOAD_STORE
    flavor: SiteFlavor = SiteFlavor.INLINE
    access: str | None = None
    reuse_pc: int | None = None


@dataclass(frozen=True)
class SitePair:
    invoke: InvocationSite
    invoke_stub: int
    back: InvocationSite
    back_stub: int


@dataclass
class FragmentDescriptor:
    fragment_id: int
    entry: int
    return_convention: str
    sites: tuple[InvocationSite, ...]
    name: str = ""
    func: Callable | None = field(default=None, repr=False)
    pairs: tuple[SitePair, ...] = field(default=(), repr=False)
    native: bool = False
    _next: int = field(default=0, repr=False)

    def next_pair(self) -> SitePair:
        # Rotate over the registered sites so each gets exercised.
        pair = self.pairs[self._next % len(self.pairs)]
        self._next += 1
        return pair


_RUNNER = ctypes.CFUNCTYPE(ctypes.c_long)


class FragmentRegistry:
    def __init__(self, codec: CodecConfig | None = None, image: CodeImage | None = None,
                 helper_pairs: int = 48):
        self.image = image or CodeImage(helper_pairs=helper_pairs)
        base = codec or default_codec_config()
        self.codec = base.with_code_range(self.image.code_range)
        self.whitelist = MaskedWhitelist()
        self.fragments: dict[int, FragmentDescriptor] = {}
        self._by_entry: dict[int, FragmentDescriptor] = {}
        self._returns: dict[int, SitePair] = {}  # continuation -> pair
        self._stubs: dict[int, int] = {}  # site pc -> stub address
        self._trap_ids: dict[int, int] = {}
        self._closures: list = []
        self._used_helpers: set[int] = set()
        self.runner_factory: Callable[[FragmentDescriptor], Callable[[], int]] | None = None

    @property
    def code_range(self) -> AddressRange:
        return self.image.code_range

    @property
    def frozen(self) -> bool:
        return self.whitelist.frozen

    def freeze(self) -> None:
        if not self.whitelist.frozen:
            self.codec = self.codec.with_trap_table(self._trap_ids)
            self.whitelist.freeze()

    # fragment lookup

    def fragment_at(self, entry: int) -> FragmentDescriptor | None:
        return self._by_entry.get(entry)

    def is_continuation(self, addr: int) -> bool:
        return addr in self._returns

    def return_pair(self, continuation: int) -> SitePair:
        return self._returns[continuation]

    def stub_for(self, site: InvocationSite) -> int:
        return self._stubs[site.pc]

    def get(self, fragment_id: int) -> FragmentDescriptor:
        try:
            return self.fragments[fragment_id]
        except KeyError:
            raise UnknownFragment(f"no fragment {fragment_id}") from None

    # registration

    def register_fragment(self, entry: Callable | int, sites: int | Sequence[SiteSpec] | None = None,
                          convention: str = "payload", name: str | None = None) -> FragmentDescriptor:
        if self.whitelist.frozen:
            raise WhitelistFrozen("fragments must be registered before protect_init")
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown return convention {convention!r}")
        if sites is None:
            specs: list[SiteSpec] = [SiteSpec()]
        elif isinstance(sites, int):
            specs = [SiteSpec()] * sites
        else:
            specs = list(sites)
        if not specs:
            raise ValueError("a fragment needs at least one invocation site")

        fragment_id = len(self.fragments) + 1
        if callable(entry):
            desc = FragmentDescriptor(fragment_id, 0, convention, (), name or getattr(entry, "__name__", ""),
                                      func=entry)
            entry_addr = self._emit_thunk(desc)
        else:
            entry_addr = int(entry)
            if entry_addr not in self.code_range:
                raise EntryOutOfRange(f"entry {entry_addr:#x} is outside the code segment "
                                      f"{self.code_range.base:#x}..{self.code_range.end:#x}")
            if entry_addr in self._by_entry:
                raise DuplicateSite(f"entry {entry_addr:#x} already registered")
            desc = FragmentDescriptor(fragment_id, 0, "rax", (), name or f"native_{entry_addr:x}", native=True)
        desc.entry = entry_addr

        pairs = []
        for spec in specs:
            pairs.append(self._make_pair(spec, entry_addr))
        desc.pairs = tuple(pairs)
        desc.sites = tuple(p.invoke for p in pairs)
        self.fragments[fragment_id] = desc
        self._by_entry[entry_addr] = desc
        return desc

    def _emit_thunk(self, desc: FragmentDescriptor) -> int:
        if self.runner_factory is None:
            raise RegistrationError("no runtime attached to build fragment runners")
        closure = _RUNNER(self.runner_factory(desc))
        self._closures.append(closure)
        ptr = ctypes.cast(closure, ctypes.c_void_p).value
        return self.image.emit(f"entry_{desc.fragment_id}", movabs(RAX, ptr) + jmp_reg(RAX))

    def _make_pair(self, spec: SiteSpec, target: int) -> SitePair:
        invoke, invoke_stub = self._emit_site(spec, target, continuation=None)
        back_spec = SiteSpec(spec.kind, spec.flavor, spec.access)
        back, back_stub = self._emit_site(back_spec, invoke.continuation, continuation=0)
        pair = SitePair(invoke, invoke_stub, back, back_stub)
        self._returns[invoke.continuation] = pair
        return pair

    def _emit_site(self, spec: SiteSpec, target: int, continuation: int | None) -> tuple[InvocationSite, int]:
        """Emit a stub that raises the fault; continuation None means 'after the fault'."""
        img = self.image
        if spec.kind is FaultKind.TRAP_REFERENCE:
            if spec.flavor is not SiteFlavor.INLINE:
                raise ValueError("breakpoint-style sites are inline only")
            # The identifier sits on the stack top, pushed right before the trap.
            ident = self._new_trap_id(target)
            stub = img.emit(None, push_imm32(ident) + bytes([INT3]) + ADD_RSP_8 + RET)
            pc = stub + 5
            site = InvocationSite(pc, spec.kind, 0, spec.flavor, RSP,
                                  pc + 1 if continuation is None else continuation)
            return self._record(site, stub)

        scheme = self.codec.scheme_for_kind(spec.kind)
        encoded = encode_target(target, scheme, self.codec.namespace, self.code_range)
        if spec.flavor is SiteFlavor.INLINE:
            access = spec.access or ("load" if spec.kind is FaultKind.SEGV_LOAD_STORE else "jump")
            if spec.kind is FaultKind.SEGV_LOAD_STORE:
                fault = {"load": mov_load(RAX, RAX), "store": mov_store(RAX, RSI)}[access]
            else:
                fault = {"jump": jmp_reg(RAX), "call": call_reg(RAX)}[access]
            stub = img.emit(None, movabs(RAX, encoded) + fault + RET)
            pc = stub + 10
            after = pc + len(fault)
            site = InvocationSite(pc, spec.kind, scheme.scheme_id, spec.flavor, RAX,
                                  after if continuation is None else continuation)
            return self._record(site, stub)

        helper = self._pick_helper(spec)
        stub = img.emit_at_next(lambda at: movabs(RDI, encoded) + call_rel(at + 10, helper.addr) + RET)
        after = stub + 15
        site = InvocationSite(helper.fault_pc, spec.kind, scheme.scheme_id, spec.flavor, helper.addr_reg,
                              after if continuation is None else continuation)
        return self._record(site, stub)

    def _pick_helper(self, spec: SiteSpec):
        if spec.reuse_pc is not None:
            helper = self.image.helper_at(spec.reuse_pc)
            if helper is None or helper.kind is not spec.kind:
                raise RegistrationError(f"no reusable {spec.kind.value} instruction at {spec.reuse_pc:#x}")
            if helper.fault_pc in self._used_helpers:
                raise DuplicateSite(f"reused instruction at {spec.reuse_pc:#x} already backs a site")
        else:
            while True:
                helper = self.image.take_helper(spec.kind)
                if helper.fault_pc not in self._used_helpers:
                    break
        self._used_helpers.add(helper.fault_pc)
        return helper

    def _record(self, site: InvocationSite, stub: int) -> tuple[InvocationSite, int]:
        self.whitelist.add(site)
        self._stubs[site.pc] = stub
        return site, stub

    def emit_image(self, path: str) -> None:
        """Write the code image as an ELF file plus a JSON sidecar naming every site."""
        write_elf(path, self.image.snapshot(), self.image.base, self.image.loop_entry)
        sites = []
        for desc in self.fragments.values():
            for pair in desc.pairs:
                for role, site in (("invoke", pair.invoke), ("return", pair.back)):
                    sites.append({"pc": hex(site.pc), "kind": site.fault_kind.value, "flavor": site.flavor.value,
                                  "role": role, "fragment": desc.fragment_id})
        with open(path + ".sites.json", "w") as fh:
            json.dump({"base": hex(self.image.base), "size": self.image.used, "sites": sites}, fh, indent=1)

    def _new_trap_id(self, target: int) -> int:
        while True:
            ident = secrets.randbits(32)
            if ident and ident not in self._trap_ids:
                self._trap_ids[ident] = target
                return ident


def fire_stub(stub: int, arg0: int = 0, nonce: int = 0) -> int:
    """Run a site stub natively; returns only once the caller has become the catcher."""
    fn = ctypes.CFUNCTYPE(ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p)(stub)
    return fn(arg0, nonce) & 0xFFFFFFFF
