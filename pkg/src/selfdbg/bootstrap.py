"""Start-up and shutdown of the protected pair, plus the public invocation API.

``protect_init`` forks. The child becomes the self-debugger: it attaches to
the parent, the parent attaches back, and from then on the child sits in its
debugger loop as the catcher while the parent runs the application.
"""
from __future__ import annotations

import enum
import errno
import os
import pickle
import select
import signal
import sys
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import linux
from .codec import CodecConfig, probe_namespace
from .debugger import (AttachDenied, DebuggerState, EventLog, FragmentContext, KernelTooOld, LocalMemory,
                       SwitchContext, block_all_when_catcher, check_kernel, debugger_loop, fail_closed,
                       make_runner, raise_switch, seize_counterpart, set_active_state, unblock_on_throw)
from .domain import ProcessRole
from .fragments import FragmentDescriptor, FragmentRegistry, SiteSpec

DISABLE_ENV = "SELFDBG_DISABLE"
HANDSHAKE_FAILED_EXIT = 3


class BootstrapError(RuntimeError):
    pass


class AlreadyInitialized(BootstrapError):
    pass


class ForkFailed(BootstrapError):
    pass


class HandshakeTimeout(BootstrapError):
    pass


class RaceLost(BootstrapError):
    pass


class NestedInvocation(RuntimeError):
    pass


class WrongThread(RuntimeError):
    pass


class HandshakePhase(enum.Enum):
    FORKED = "forked"
    CHILD_ATTACHED = "child_attached"
    PARENT_ATTACHED = "parent_attached"
    READY = "ready"


@dataclass
class Handshake:
    """Pipe pair the two processes synchronise the reciprocal attach over."""

    to_parent: tuple[int, int]
    to_child: tuple[int, int]
    timeout: float
    phase: HandshakePhase = HandshakePhase.FORKED

    @classmethod
    def create(cls, timeout: float) -> Handshake:
        return cls(os.pipe(), os.pipe(), timeout)

    def send(self, fds: tuple[int, int], msg: bytes) -> None:
        os.write(fds[1], msg)

    def recv(self, fds: tuple[int, int]) -> bytes:
        ready, _, _ = select.select([fds[0]], [], [], self.timeout)
        if not ready:
            raise HandshakeTimeout(f"no handshake message within {self.timeout} s")
        data = os.read(fds[0], 256)
        if not data:
            raise HandshakeTimeout("handshake peer went away")
        return data

    def close(self) -> None:
        for fd in (*self.to_parent, *self.to_child):
            try:
                os.close(fd)
            except OSError:
                pass


@dataclass(frozen=True)
class SignalPolicy:
    ignored_child_notices: bool = True
    blocked_set_when_catcher: int = linux.FULL_BLOCK_MASK
    unblockable: frozenset = linux.UNBLOCKABLE

    def __post_init__(self):
        expected = ((1 << 64) - 1) & ~linux.mask_of(self.unblockable)
        if self.blocked_set_when_catcher != expected and self.blocked_set_when_catcher != 0:
            raise ValueError("the catcher must block every signal except SIGKILL and SIGSTOP")


@dataclass
class ProtectionConfig:
    codec: CodecConfig | None = None
    probe: bool = True
    probe_timeout: float = 2.0
    handshake_timeout: float = 5.0
    event_log: str | None = None
    attach_threads: bool = False
    dbg_ignores_termination: bool = True
    policy: SignalPolicy = field(default_factory=SignalPolicy)


# -- process-wide runtime state ---------------------------------------------------

_registry: FragmentRegistry | None = None
_state: DebuggerState | None = None
_initialized = False
_designated_thread: int | None = None
_fragment_names: dict[str, int] = {}


def default_registry(codec: CodecConfig | None = None) -> FragmentRegistry:
    global _registry
    if _registry is None:
        _registry = FragmentRegistry(codec)
        _registry.runner_factory = make_runner
    return _registry


def protection_active() -> bool:
    return _state is not None


def current_state() -> DebuggerState | None:
    return _state


def disabled_by_env() -> bool:
    return os.environ.get(DISABLE_ENV) == "1"


def register_fragment(entry: Callable | int, sites: int | Sequence[SiteSpec] | None = None,
                      convention: str = "payload", name: str | None = None) -> FragmentDescriptor:
    desc = default_registry().register_fragment(entry, sites, convention, name)
    if desc.name:
        _fragment_names.setdefault(desc.name, desc.fragment_id)
    return desc


def suppress_child_notices() -> None:
    linux.set_child_stop_notices(False)


def _ignore_termination() -> None:
    # The application receives its own copy of any broadcast termination
    # signal and cleans up; the self-debugger follows it out. Relaying its copy
    # instead would run the application's cleanup twice.
    for signo in (signal.SIGTERM, signal.SIGINT, signal.SIGHUP):
        signal.signal(signo, signal.SIG_IGN)


def attach_all_threads(pid: int, options: int | None = None, attempts: int = 5) -> list[int]:
    """Seize every live thread of ``pid``; threads that vanish mid-enumeration are skipped."""
    from .debugger import SEIZE_OPTIONS
    opts = SEIZE_OPTIONS if options is None else options
    attached: list[int] = []
    for _ in range(attempts):
        tids = [t for t in linux.thread_ids(pid) if t not in attached]
        if not tids:
            break
        for tid in tids:
            try:
                linux.seize(tid, opts)
                attached.append(tid)
            except OSError as e:
                if e.errno == errno.ESRCH:
                    continue  # exited since we listed it
                if e.errno == errno.EPERM and linux.tracer_pid(tid) == os.getpid():
                    attached.append(tid)
                    continue
                raise AttachDenied(f"cannot seize thread {tid}: {e.strerror}") from None
    if not attached:
        raise RaceLost(f"no live threads found for {pid}")
    return sorted(attached)


def protect_init(config: ProtectionConfig | None = None) -> ProcessRole:
    """Fork into application and self-debugger and couple them reciprocally.

    Returns ProcessRole.THROWER in the application. The self-debugger never
    returns from here.
    """
    global _initialized, _state, _designated_thread
    config = config or ProtectionConfig()
    if _initialized:
        raise AlreadyInitialized("protect_init already ran in this process")
    registry = default_registry(config.codec)
    if disabled_by_env():
        _initialized = True
        registry.freeze()
        return ProcessRole.THROWER
    check_kernel()
    if linux.tracer_pid(os.getpid()) != 0:
        raise AttachDenied(f"already traced by {linux.tracer_pid(os.getpid())}")
    if config.probe:
        probe_namespace(registry.codec.namespace, timeout=config.probe_timeout)
    _initialized = True
    registry.freeze()

    ctx = SwitchContext()
    ctx.header.thrower_mask = linux.get_blocked_mask()
    log = EventLog.open(config.event_log)
    if config.policy.ignored_child_notices:
        suppress_child_notices()
    hs = Handshake.create(config.handshake_timeout)
    app_pid = os.getpid()
    sys.stdout.flush()
    sys.stderr.flush()
    try:
        pid = os.fork()
    except OSError as e:
        hs.close()
        raise ForkFailed(str(e)) from e

    if pid == 0:
        _child_main(app_pid, registry, ctx, log, hs, config)
        os._exit(HANDSHAKE_FAILED_EXIT)  # not reached

    try:
        msg = hs.recv(hs.to_parent)
        if not msg.startswith(b"A"):
            raise AttachDenied(msg[1:].decode(errors="replace") or "self-debugger could not attach")
        hs.phase = HandshakePhase.CHILD_ATTACHED
        seize_counterpart(pid)
        hs.phase = HandshakePhase.PARENT_ATTACHED
        hs.send(hs.to_child, b"R")
        hs.phase = HandshakePhase.READY
    except BaseException:
        try:
            os.kill(pid, signal.SIGKILL)
            os.waitpid(pid, 0)
        except OSError:
            pass
        raise
    finally:
        hs.close()
    _state = DebuggerState(
        counterpart_pid=pid, whitelist=registry.whitelist, codec=registry.codec, fragments=registry,
        role=ProcessRole.THROWER, loop_entry=registry.image.loop_entry, ctx=ctx, log=log, tracees={pid},
    )
    set_active_state(_state)
    _designated_thread = threading.get_ident()
    log.emit("init", role="thrower", counterpart=pid, loop_entry=hex(registry.image.loop_entry))
    return ProcessRole.THROWER


def _child_main(app_pid: int, registry: FragmentRegistry, ctx: SwitchContext, log: EventLog,
                hs: Handshake, config: ProtectionConfig) -> None:
    global _state
    try:
        if config.policy.blocked_set_when_catcher:
            block_all_when_catcher()
        if config.policy.ignored_child_notices:
            suppress_child_notices()
        if config.dbg_ignores_termination:
            _ignore_termination()
        devnull = os.open(os.devnull, os.O_RDWR)
        os.dup2(devnull, 0)
        os.dup2(devnull, 1)
        os.close(devnull)
        if config.attach_threads:
            tracees = set(attach_all_threads(app_pid))
        else:
            seize_counterpart(app_pid)
            tracees = {app_pid}
        hs.phase = HandshakePhase.CHILD_ATTACHED
        hs.send(hs.to_parent, b"A")
        if hs.recv(hs.to_child) != b"R":
            os._exit(HANDSHAKE_FAILED_EXIT)
        hs.phase = HandshakePhase.READY
        hs.close()
    except BaseException as exc:  # noqa: BLE001
        try:
            hs.send(hs.to_parent, b"F" + str(exc).encode()[:200])
        except OSError:
            pass
        os._exit(HANDSHAKE_FAILED_EXIT)

    _state = DebuggerState(
        counterpart_pid=app_pid, whitelist=registry.whitelist, codec=registry.codec, fragments=registry,
        role=ProcessRole.CATCHER, loop_entry=registry.image.loop_entry, ctx=ctx, log=log, tracees=tracees,
    )
    set_active_state(_state)
    log.emit("init", role="catcher", counterpart=app_pid, loop_entry=hex(registry.image.loop_entry))
    try:
        landed = debugger_loop(_state)
        fail_closed(_state, f"self-debugger root loop landed on {landed:#x}")
    except BaseException as exc:  # noqa: BLE001
        fail_closed(_state, f"self-debugger loop failed: {exc!r}")


def protect_fini(exit_code: int = 0) -> None:
    """Terminate the protected application; the self-debugger detaches and follows."""
    if _state is not None:
        _state.log.emit("fini", code=exit_code)
    try:
        sys.stdout.flush()
        sys.stderr.flush()
    except Exception:
        pass
    os._exit(exit_code)


def _resolve(fragment: int | str | FragmentDescriptor) -> FragmentDescriptor:
    registry = default_registry()
    if isinstance(fragment, FragmentDescriptor):
        return fragment
    if isinstance(fragment, str):
        return registry.get(_fragment_names[fragment])
    return registry.get(fragment)


def invoke_migrated(fragment: int | str | FragmentDescriptor, *args):
    """Run a registered fragment in the counterpart process and return its result."""
    desc = _resolve(fragment)
    state = _state
    if state is None:
        return _invoke_locally(desc, args)
    if state.in_fragment or state.role is not ProcessRole.THROWER:
        raise NestedInvocation("migrated fragments cannot invoke other migrated fragments")
    if threading.get_ident() != _designated_thread:
        raise WrongThread("only the thread that ran protect_init may switch")
    pair = desc.next_pair()
    ctx = state.ctx
    ctx.set_payload(pickle.dumps(args, protocol=pickle.HIGHEST_PROTOCOL))
    ctx.header.continuation = pair.invoke.continuation
    raise_switch(state, pair.invoke_stub)
    landed = debugger_loop(state)
    if landed != pair.invoke.continuation:
        fail_closed(state, f"resumed at {landed:#x}, expected {pair.invoke.continuation:#x}")
    status, value = pickle.loads(ctx.payload())
    if status == "err":
        raise value
    return value


def _invoke_locally(desc: FragmentDescriptor, args: tuple):
    if desc.native:
        import ctypes
        return ctypes.CFUNCTYPE(ctypes.c_long)(desc.entry)()
    return desc.func(FragmentContext(LocalMemory(), None, os.getpid()), *args)


__all__ = [
    "AlreadyInitialized", "AttachDenied", "BootstrapError", "ForkFailed", "Handshake", "HandshakePhase",
    "HandshakeTimeout", "KernelTooOld", "NestedInvocation", "ProtectionConfig", "RaceLost", "SignalPolicy",
    "WrongThread", "attach_all_threads", "block_all_when_catcher", "default_registry", "invoke_migrated",
    "protect_fini", "protect_init", "register_fragment", "suppress_child_notices", "unblock_on_throw",
]
