import json
import signal
import struct

import pytest

from selfdbg.codec import encode_target
from selfdbg.domain import FaultKind, SiteFlavor
from selfdbg.fragments import (DuplicateSite, EntryOutOfRange, FragmentRegistry, SiteSpec, UnknownFragment,
                               WhitelistFrozen)
from selfdbg.protocol import SwitchEvent, SwitchRequest, classify
from selfdbg.scan import static_footprint_report

ALL_SPECS = [
    SiteSpec(FaultKind.SEGV_LOAD_STORE, access="load"),
    SiteSpec(FaultKind.SEGV_LOAD_STORE, access="store"),
    SiteSpec(FaultKind.SEGV_EXEC, access="jump"),
    SiteSpec(FaultKind.SEGV_EXEC, access="call"),
    SiteSpec(FaultKind.SEGV_LOAD_STORE, SiteFlavor.REUSED_CODE),
    SiteSpec(FaultKind.SEGV_EXEC, SiteFlavor.REUSED_CODE),
    SiteSpec(FaultKind.TRAP_REFERENCE),
]


def registry(**kw):
    reg = FragmentRegistry(helper_pairs=kw.pop("helper_pairs", 12), **kw)
    reg.runner_factory = lambda desc: (lambda: 0)
    return reg


def test_two_sites_land_in_the_whitelist():
    reg = registry()
    desc = reg.register_fragment(lambda ctx: 0, 2)
    assert len(desc.sites) == 2
    # every invocation site is paired with a return site
    assert len(reg.whitelist) == 4
    for site in desc.sites:
        assert reg.whitelist.lookup(site.pc) == site
        assert site.pc in reg.code_range
    assert reg.fragment_at(desc.entry) is desc
    assert reg.get(desc.fragment_id) is desc
    with pytest.raises(UnknownFragment):
        reg.get(99)


def test_reusing_the_same_instruction_twice_is_a_duplicate():
    reg = registry()
    helper = next(h for h in reg.image.helpers if h.kind is FaultKind.SEGV_LOAD_STORE)
    spec = SiteSpec(FaultKind.SEGV_LOAD_STORE, SiteFlavor.REUSED_CODE, reuse_pc=helper.fault_pc)
    desc = reg.register_fragment(lambda ctx: 0, [spec])
    assert desc.sites[0].pc == helper.fault_pc
    with pytest.raises(DuplicateSite):
        reg.register_fragment(lambda ctx: 1, [spec])


def test_registration_after_freeze_is_refused():
    reg = registry()
    reg.register_fragment(lambda ctx: 0)
    reg.freeze()
    with pytest.raises(WhitelistFrozen):
        reg.register_fragment(lambda ctx: 0)


def test_native_entry_must_be_in_the_code_segment():
    reg = registry()
    with pytest.raises(EntryOutOfRange):
        reg.register_fragment(0x1000, 1)
    native = reg.register_fragment(reg.image.answer, 1)
    assert native.native and native.return_convention == "rax"
    with pytest.raises(DuplicateSite):
        reg.register_fragment(reg.image.answer, 1)


def test_no_plain_site_address_at_rest():
    reg = registry()
    for i in range(4):
        reg.register_fragment(lambda ctx: i, ALL_SPECS)
    reg.freeze()
    raw = reg.whitelist.storage_bytes()
    assert len(raw) == 24 * len(reg.whitelist)
    for site in reg.whitelist.sites():
        assert struct.pack("<Q", site.pc) not in raw
        assert struct.pack("<I", site.pc & 0xFFFFFFFF) not in raw
        if site.continuation:
            assert struct.pack("<Q", site.continuation) not in raw


def _event_for(reg, site, target):
    if site.fault_kind is FaultKind.TRAP_REFERENCE:
        ident = next(i for i, t in reg.codec.trap_table.items() if t == target)
        return SwitchEvent(1, signal.SIGTRAP, faulting_pc=site.pc, fault_kind=site.fault_kind, trap_id=ident)
    scheme = reg.codec.scheme_for_kind(site.fault_kind)
    return SwitchEvent(1, signal.SIGSEGV, faulting_pc=site.pc, fault_kind=site.fault_kind,
                       fault_address=encode_target(target, scheme, reg.codec.namespace))


def test_every_registered_site_classifies_as_a_switch():
    reg = registry()
    descs = [reg.register_fragment(lambda ctx: 0, ALL_SPECS) for _ in range(3)]
    reg.freeze()
    seen = 0
    for desc in descs:
        for pair in desc.pairs:
            got = classify(_event_for(reg, pair.invoke, desc.entry), reg.whitelist, reg.codec)
            assert got == SwitchRequest(pair.invoke, desc.entry)
            back = classify(_event_for(reg, pair.back, pair.invoke.continuation), reg.whitelist, reg.codec)
            assert back == SwitchRequest(pair.back, pair.invoke.continuation)
            assert reg.is_continuation(pair.invoke.continuation)
            seen += 2
    assert seen == len(reg.whitelist) == 3 * 2 * len(ALL_SPECS)


def test_trap_sites_are_inline_only():
    reg = registry()
    with pytest.raises(ValueError):
        reg.register_fragment(lambda ctx: 0, [SiteSpec(FaultKind.TRAP_REFERENCE, SiteFlavor.REUSED_CODE)])


# -- emitted image vs the static scanner ---------------------------------------

def _emit(tmp_path, specs, fragments=3):
    reg = registry()
    for _ in range(fragments):
        reg.register_fragment(lambda ctx: 0, specs)
    reg.freeze()
    path = str(tmp_path / "image.elf")
    reg.emit_image(path)
    return reg, path


def _raw_byte_at(path, pc):
    # Oracle independent of the ELF parser: the text segment starts at file offset 0x1000.
    with open(path + ".sites.json") as fh:
        base = int(json.load(fh)["base"], 16)
    with open(path, "rb") as fh:
        fh.seek(pc - base + 0x1000)
        return fh.read(1)[0]


def test_stealthy_build_has_no_trap_opcodes(tmp_path):
    reg, path = _emit(tmp_path, ALL_SPECS[:6])
    report = static_footprint_report(path)
    assert report["site_count"] == len(reg.whitelist) == 36
    assert report["trap_opcodes"] == 0
    assert all(_raw_byte_at(path, s.pc) != 0xCC for s in reg.whitelist.sites())


def test_trap_build_has_one_trap_per_site(tmp_path):
    reg, path = _emit(tmp_path, [SiteSpec(FaultKind.TRAP_REFERENCE)] * 2)
    report = static_footprint_report(path)
    assert report["trap_opcodes"] == report["site_count"] == 12
    assert all(_raw_byte_at(path, s.pc) == 0xCC for s in reg.whitelist.sites())


def test_reused_sites_hide_the_address_setup(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    inline = static_footprint_report(_emit(tmp_path / "a", ALL_SPECS[:2])[1])
    reused = static_footprint_report(_emit(tmp_path / "b", [ALL_SPECS[4], ALL_SPECS[5]])[1])
    assert inline["site_count"] == reused["site_count"]
    assert inline["adjacent_pairs"] == inline["site_count"]
    assert reused["adjacent_pairs"] == 0
