"""Reciprocal self-debugging protection for Linux x86-64 processes.

Two processes, forked from one image, each hold the other's debugger seat.
Control moves between them through deliberate faults whose addresses encode
the code target, so migrated fragments run in the counterpart process.
"""
from .bootstrap import (AlreadyInitialized, NestedInvocation, ProtectionConfig, SignalPolicy,
                        attach_all_threads, invoke_migrated, protect_fini, protect_init,
                        register_fragment)
from .debugger import (AttachDenied, FragmentContext, KernelTooOld, RemoteFault, remote_read,
                       remote_write)
from .domain import FaultKind, ProcessRole, SiteFlavor
from .fragments import DuplicateSite, EntryOutOfRange, SiteSpec, WhitelistFrozen

__version__ = "0.1.0"

__all__ = [
    "AlreadyInitialized", "AttachDenied", "DuplicateSite", "EntryOutOfRange", "FaultKind",
    "FragmentContext", "KernelTooOld", "NestedInvocation", "ProcessRole", "ProtectionConfig",
    "RemoteFault", "SignalPolicy", "SiteFlavor", "SiteSpec", "WhitelistFrozen", "attach_all_threads",
    "invoke_migrated", "protect_fini", "protect_init", "register_fragment", "remote_read", "remote_write",
]
