"""The reciprocal switch protocol as pure functions.

A debug stop of the counterpart becomes a ``SwitchEvent``; ``classify``
decides what it means and ``plan_for`` turns that into the ordered actions
the active mini-debugger performs. Nothing here touches the OS.
"""
from __future__ import annotations

import enum
import signal
from dataclasses import dataclass
from typing import Protocol, Union

from .codec import CodecConfig, DecodeOutOfCodeRange, NoScheme, decode_target, select_scheme
from .domain import FaultKind, InvocationSite, ProcessRole, RegisterSnapshot

TRAP_ID_MASK = 0xFFFFFFFF


class Notice(enum.Enum):
    NONE = "none"
    EXIT = "exit"              # counterpart is about to exit
    GROUP_STOP = "group_stop"  # job-control stop already taken
    INTERRUPT = "interrupt"    # stop we requested ourselves
    THREAD_EXIT = "thread_exit"


@dataclass(frozen=True)
class SwitchEvent:
    pid: int
    signal: int
    faulting_pc: int | None = None
    fault_kind: FaultKind | None = None
    fault_address: int | None = None
    regs: RegisterSnapshot | None = None
    notice: Notice = Notice.NONE
    exit_status: int | None = None
    trap_id: int | None = None  # word found on the stack top at a trap

    def __post_init__(self):
        if self.fault_kind is FaultKind.TRAP_REFERENCE and self.fault_address is not None:
            raise ValueError("breakpoint-style stops carry an identifier, not a fault address")


class Whitelist(Protocol):
    def lookup(self, pc: int) -> InvocationSite | None: ...


@dataclass(frozen=True)
class SwitchRequest:
    site: InvocationSite
    target: int


@dataclass(frozen=True)
class GenuineFault:
    signal: int


@dataclass(frozen=True)
class CounterpartExit:
    status: int | None = None


@dataclass(frozen=True)
class IgnorableNotice:
    reason: str = ""


Classification = Union[SwitchRequest, GenuineFault, CounterpartExit, IgnorableNotice]


@dataclass(frozen=True)
class TransitionCounterpartToCatcher:
    pass


@dataclass(frozen=True)
class TransferControlTo:
    target: int


@dataclass(frozen=True)
class ForwardSignal:
    signal: int


@dataclass(frozen=True)
class DetachAndExit:
    status: int | None = None


@dataclass(frozen=True)
class SuppressAndContinue:
    pass


Action = Union[TransitionCounterpartToCatcher, TransferControlTo, ForwardSignal, DetachAndExit, SuppressAndContinue]
ActionPlan = tuple  # tuple[Action, ...]


class RoleViolation(RuntimeError):
    """Only the exception-catching process may plan actions."""


def _target_of(event: SwitchEvent, site: InvocationSite, codec: CodecConfig) -> int | None:
    if site.fault_kind is FaultKind.TRAP_REFERENCE:
        if event.trap_id is None:
            return None
        target = codec.trap_table.get(event.trap_id & TRAP_ID_MASK)
        if target is None or (codec.code_range is not None and target not in codec.code_range):
            return None
        return target
    if event.fault_address is None:
        return None
    try:
        scheme = select_scheme(event, codec)
    except NoScheme:
        return None
    if scheme.scheme_id != site.scheme_id:
        return None
    try:
        return decode_target(event.fault_address, scheme, codec.code_range)
    except DecodeOutOfCodeRange:
        return None


def classify(event: SwitchEvent, whitelist: Whitelist, codec: CodecConfig) -> Classification:
    if event.notice is Notice.EXIT:
        return CounterpartExit(event.exit_status)
    if event.notice is not Notice.NONE:
        return IgnorableNotice(event.notice.value)
    if event.fault_kind is None or event.faulting_pc is None:
        return GenuineFault(event.signal)
    site = whitelist.lookup(event.faulting_pc)
    # Kind mismatch at a whitelisted pc is treated as a real bug, never hijacked.
    if site is None or site.fault_kind is not event.fault_kind:
        return GenuineFault(event.signal)
    target = _target_of(event, site, codec)
    if target is None:
        return GenuineFault(event.signal)
    return SwitchRequest(site, target)


def plan_for(classification: Classification, my_role: ProcessRole) -> ActionPlan:
    if my_role is not ProcessRole.CATCHER:
        raise RoleViolation(f"plan_for called in the {my_role.value} role")
    if isinstance(classification, SwitchRequest):
        return (TransitionCounterpartToCatcher(), TransferControlTo(classification.target))
    if isinstance(classification, GenuineFault):
        return (ForwardSignal(classification.signal),)
    if isinstance(classification, CounterpartExit):
        return (DetachAndExit(classification.status),)
    if isinstance(classification, IgnorableNotice):
        return (SuppressAndContinue(),)
    raise TypeError(f"not a classification: {classification!r}")


def signal_name(signo: int) -> str:
    try:
        return signal.Signals(signo).name
    except ValueError:
        return f"SIG{signo}"
