"""The mini-debugger both processes run while they hold the catcher role.

A switch works like this. The thrower executes an invocation site and
faults. The catcher, blocked in ``debugger_loop``, sees the debug stop and
classifies it. For a switch request it turns the thrower into the new
catcher (its pc goes to the landing pad, all signals blocked) and then
becomes the thrower itself, running the requested fragment or resuming at a
continuation.
"""
from __future__ import annotations

import ctypes
import errno
import json
import os
import pickle
import signal
import struct
import sys
import time
from dataclasses import dataclass, field

from . import linux
from .codec import CodecConfig
from .domain import WORD_MASK, FaultKind, ProcessRole, RegisterSnapshot
from .fragments import FragmentDescriptor, FragmentRegistry, fire_stub
from .image import CATCH_TOKEN, decode_fault_operand
from .protocol import (CounterpartExit, DetachAndExit, ForwardSignal, GenuineFault, Notice,
                       SuppressAndContinue, SwitchEvent, SwitchRequest, TransferControlTo,
                       TransitionCounterpartToCatcher, Whitelist, classify, plan_for, signal_name)

# No PTRACE_O_TRACEEXIT: a killed process would park in its exit stop until
# the counterpart waits, and a throwing counterpart never does, so exit-kill
# would never fire. The tracer learns of the exit from waitpid instead.
SEIZE_OPTIONS = linux.PTRACE_O_EXITKILL
MIN_KERNEL = (3, 8)
CTX_MAGIC = 0x5357_4354_5831  # "SWCTX1"
DEFAULT_PAYLOAD_CAPACITY = 1 << 20
FAIL_CLOSED_EXIT = 70

_FAULT_SIGNALS = (signal.SIGSEGV, signal.SIGBUS, signal.SIGILL, signal.SIGFPE, signal.SIGTRAP)
_STOP_SIGNALS = (signal.SIGSTOP, signal.SIGTSTP, signal.SIGTTIN, signal.SIGTTOU)


class AttachDenied(RuntimeError):
    pass


class KernelTooOld(RuntimeError):
    pass


class RegisterWriteFailed(RuntimeError):
    pass


class RemoteFault(OSError):
    def __init__(self, addr: int, length: int, reason: str = ""):
        super().__init__(errno.EFAULT, f"remote access {addr:#x}+{length} failed{': ' + reason if reason else ''}")
        self.addr = addr
        self.length = length


class ProtocolError(RuntimeError):
    pass


# -- switch context -------------------------------------------------------------

class SwitchHeader(ctypes.Structure):
    _fields_ = [
        ("magic", ctypes.c_uint64),
        ("seq", ctypes.c_uint64),
        ("site_pc", ctypes.c_uint64),
        ("continuation", ctypes.c_uint64),
        ("thrower_mask", ctypes.c_uint64),
        ("result_word", ctypes.c_uint64),
        ("archived", linux.user_regs_struct),
        ("result_regs", linux.user_regs_struct),
        ("payload_len", ctypes.c_uint64),
    ]


HEADER_SIZE = ctypes.sizeof(SwitchHeader)
THROWER_MASK_OFFSET = SwitchHeader.thrower_mask.offset


class SwitchContext:
    """Per-process record at an address both processes share through fork.

    Holds the archived registers of the last switch, the continuation, the
    caller's thrower-time signal mask and a pickled argument/result payload.
    """

    def __init__(self, capacity: int = DEFAULT_PAYLOAD_CAPACITY):
        self.capacity = capacity
        self.size = (HEADER_SIZE + capacity + 4095) & ~4095
        self.addr = linux.map_pages(self.size, linux.PROT_READ | linux.PROT_WRITE)
        self.header = SwitchHeader.from_address(self.addr)
        self.header.magic = CTX_MAGIC
        self.payload_addr = self.addr + HEADER_SIZE

    def set_payload(self, data: bytes) -> None:
        if len(data) > self.capacity:
            raise ValueError(f"payload of {len(data)} bytes exceeds the {self.capacity}-byte switch context")
        ctypes.memmove(self.payload_addr, data, len(data))
        self.header.payload_len = len(data)

    def payload(self) -> bytes:
        return ctypes.string_at(self.payload_addr, self.header.payload_len)

    def archived_regs(self) -> RegisterSnapshot:
        return self.header.archived.snapshot()

    def result_regs(self) -> RegisterSnapshot:
        return self.header.result_regs.snapshot()


# -- remote memory --------------------------------------------------------------

class RemoteMemory:
    """Byte-level access to the counterpart's address space.

    Bulk transfers go through process_vm_readv/writev, which work whether or
    not the counterpart is stopped. Word transfers through the debugging API
    are the fallback; they need the counterpart stopped, so a running one is
    interrupted for the duration.
    """

    def __init__(self, pid: int, word_mode: bool = False):
        self.pid = pid
        self.word_mode = word_mode

    def read(self, addr: int, length: int) -> bytes:
        if length <= 0:
            return b""
        if not self.word_mode:
            try:
                return linux.process_vm_read(self.pid, addr, length)
            except OSError as e:
                if e.errno == errno.EFAULT:
                    raise RemoteFault(addr, length, "unmapped") from None
                if e.errno not in (errno.ENOSYS, errno.EPERM):
                    raise
        return self._with_stop(lambda: self._read_words(addr, length))

    def write(self, addr: int, data: bytes) -> None:
        if not data:
            return
        if not self.word_mode:
            try:
                linux.process_vm_write(self.pid, addr, data)
                return
            except OSError as e:
                if e.errno == errno.EFAULT:
                    raise RemoteFault(addr, len(data), "unmapped or read-only") from None
                if e.errno not in (errno.ENOSYS, errno.EPERM):
                    raise
        self._with_stop(lambda: self._write_words(addr, bytes(data)))

    def read_word(self, addr: int) -> int:
        return struct.unpack("<Q", self.read(addr, 8))[0]

    def write_word(self, addr: int, value: int) -> None:
        self.write(addr, struct.pack("<Q", value & ((1 << 64) - 1)))

    def _peek(self, addr: int) -> int:
        try:
            return linux.peek(self.pid, addr)
        except OSError as e:
            if e.errno in (errno.EIO, errno.EFAULT):
                raise RemoteFault(addr, 8, "unmapped") from None
            raise

    def _poke(self, addr: int, word: int) -> None:
        try:
            linux.poke(self.pid, addr, word)
        except OSError as e:
            if e.errno in (errno.EIO, errno.EFAULT):
                raise RemoteFault(addr, 8, "unmapped or read-only") from None
            raise

    def _read_words(self, addr: int, length: int) -> bytes:
        start = addr & ~7
        end = (addr + length + 7) & ~7
        raw = b"".join(struct.pack("<Q", self._peek(a)) for a in range(start, end, 8))
        return raw[addr - start:addr - start + length]

    def _write_words(self, addr: int, data: bytes) -> None:
        start = addr & ~7
        end = (addr + len(data) + 7) & ~7
        buf = bytearray(self._read_words(start, end - start))
        buf[addr - start:addr - start + len(data)] = data
        for i in range(0, len(buf), 8):
            self._poke(start + i, struct.unpack_from("<Q", buf, i)[0])

    def _with_stop(self, op):
        try:
            return op()
        except OSError as e:
            if e.errno != errno.ESRCH or isinstance(e, RemoteFault):
                raise
        # Running counterpart: stop it, transfer, let it go again.
        linux.interrupt(self.pid)
        while True:
            st = linux.wait_any(self.pid)
            if st.gone:
                raise RemoteFault(0, 0, "counterpart exited")
            if st.event == linux.PTRACE_EVENT_STOP:
                break
            # a real signal raced the interrupt; it is re-injected after the transfer
            pending_sig = st.stop_signal
            linux.cont(self.pid, pending_sig)
        try:
            return op()
        finally:
            linux.cont(self.pid, 0)


class LocalMemory:
    """Same interface as RemoteMemory over this process's own memory."""

    pid = 0

    def read(self, addr: int, length: int) -> bytes:
        return ctypes.string_at(addr, length) if length > 0 else b""

    def write(self, addr: int, data: bytes) -> None:
        if data:
            ctypes.memmove(addr, bytes(data), len(data))

    def read_word(self, addr: int) -> int:
        return struct.unpack("<Q", self.read(addr, 8))[0]

    def write_word(self, addr: int, value: int) -> None:
        self.write(addr, struct.pack("<Q", value & ((1 << 64) - 1)))


def remote_read(mem: RemoteMemory, addr: int, length: int) -> bytes:
    return mem.read(addr, length)


def remote_write(mem: RemoteMemory, addr: int, data: bytes) -> None:
    mem.write(addr, data)


# -- event log ------------------------------------------------------------------

class EventLog:
    """Line-delimited JSON records on an inherited file descriptor; off unless given one."""

    def __init__(self, fd: int | None = None):
        self.fd = fd

    @classmethod
    def open(cls, path: str | None) -> EventLog:
        if not path:
            return cls(None)
        return cls(os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o600))

    def emit(self, event: str, **detail) -> None:
        if self.fd is None:
            return
        record = {"ts": time.time(), "pid": os.getpid(), "event": event, "detail": detail}
        try:
            os.write(self.fd, (json.dumps(record, default=str) + "\n").encode())
        except OSError:
            pass


def read_event_log(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- state ---------------------------------------------------------------------

@dataclass
class FragmentContext:
    """What a migrated fragment sees: the invoker's memory and registers."""

    remote: RemoteMemory | LocalMemory
    archived_regs: RegisterSnapshot | None
    invoker_pid: int


@dataclass
class DebuggerState:
    counterpart_pid: int
    whitelist: Whitelist
    codec: CodecConfig
    fragments: FragmentRegistry
    role: ProcessRole
    loop_entry: int
    ctx: SwitchContext
    log: EventLog = field(default_factory=EventLog)
    tracees: set[int] = field(default_factory=set)
    in_fragment: bool = False
    seq: int = 0
    counters: dict[str, int] = field(default_factory=lambda: {"to_catcher": 0, "to_thrower": 0})

    def set_role(self, role: ProcessRole) -> None:
        self.role = role
        key = "to_catcher" if role is ProcessRole.CATCHER else "to_thrower"
        self.counters[key] += 1
        self.log.emit("role", role=role.value)


_active: DebuggerState | None = None


def active_state() -> DebuggerState | None:
    return _active


def set_active_state(state: DebuggerState | None) -> None:
    global _active
    _active = state


def check_kernel() -> None:
    if linux.kernel_version() < MIN_KERNEL:
        raise KernelTooOld(f"kernel {'.'.join(map(str, linux.kernel_version()))} lacks seize/exit-kill "
                           f"(needs {MIN_KERNEL[0]}.{MIN_KERNEL[1]})")


def seize_counterpart(pid: int, options: int = SEIZE_OPTIONS) -> None:
    check_kernel()
    try:
        linux.seize(pid, options)
    except OSError as e:
        if e.errno in (errno.EPERM, errno.EBUSY, errno.ESRCH):
            raise AttachDenied(f"cannot take the debugger seat of {pid}: {e.strerror}") from None
        if e.errno in (errno.EINVAL, errno.EIO):
            raise KernelTooOld(f"seize with options {options:#x} rejected: {e.strerror}") from None
        raise


def attach_counterpart(pid: int, registry: FragmentRegistry | None = None, ctx: SwitchContext | None = None,
                       log: EventLog | None = None, role: ProcessRole = ProcessRole.CATCHER,
                       options: int = SEIZE_OPTIONS) -> DebuggerState:
    seize_counterpart(pid, options)
    registry = registry or FragmentRegistry()
    return DebuggerState(
        counterpart_pid=pid,
        whitelist=registry.whitelist,
        codec=registry.codec,
        fragments=registry,
        role=role,
        loop_entry=registry.image.loop_entry,
        ctx=ctx or SwitchContext(),
        log=log or EventLog(),
        tracees={pid},
    )


# -- stop decoding ----------------------------------------------------------------

def build_event(state: DebuggerState, st: linux.WaitStatus) -> SwitchEvent:
    """Turn a wait status of a stopped tracee into a SwitchEvent."""
    pid = st.pid
    main = pid == state.counterpart_pid
    if st.event == linux.PTRACE_EVENT_EXIT:
        status = linux.get_event_msg(pid)
        return SwitchEvent(pid, st.stop_signal, notice=Notice.EXIT if main else Notice.THREAD_EXIT,
                           exit_status=status)
    if st.event == linux.PTRACE_EVENT_STOP:
        notice = Notice.GROUP_STOP if st.stop_signal in _STOP_SIGNALS else Notice.INTERRUPT
        return SwitchEvent(pid, st.stop_signal, notice=notice)
    if st.event:
        return SwitchEvent(pid, st.stop_signal, notice=Notice.INTERRUPT)
    sig = st.stop_signal
    if sig not in _FAULT_SIGNALS:
        return SwitchEvent(pid, sig)
    info = linux.get_siginfo(pid)
    if info.code <= 0:
        # sent with kill/tgkill/sigqueue: never a fault, whatever the number
        return SwitchEvent(pid, sig)
    regs = linux.get_regs(pid)
    if not main:
        return SwitchEvent(pid, sig, regs=regs)
    if sig == signal.SIGTRAP and info.code == linux.SI_KERNEL:
        pc = regs.rip - 1
        if _code_at(pid, pc, 1) == b"\xcc":
            top = _code_at(pid, regs.rsp, 8)
            ident = int.from_bytes(top, "little") if len(top) == 8 else None
            return SwitchEvent(pid, sig, faulting_pc=pc, fault_kind=FaultKind.TRAP_REFERENCE, regs=regs,
                               trap_id=ident)
        return SwitchEvent(pid, sig, regs=regs)
    if sig != signal.SIGSEGV:
        return SwitchEvent(pid, sig, faulting_pc=regs.rip, regs=regs)
    decoded = decode_fault_operand(_code_at(pid, regs.rip, 16))
    if decoded is None or decoded[0] is FaultKind.TRAP_REFERENCE:
        return SwitchEvent(pid, sig, faulting_pc=regs.rip, regs=regs)
    kind, reg, _ = decoded
    # #GP on a non-canonical address reports no address; recover it from the operand.
    address = regs.gpr(reg) if info.code == linux.SI_KERNEL or info.addr == 0 else info.addr
    return SwitchEvent(pid, sig, faulting_pc=regs.rip, fault_kind=kind, fault_address=address, regs=regs)


def _code_at(pid: int, addr: int, length: int) -> bytes:
    try:
        return linux.process_vm_read(pid, addr, length)
    except OSError:
        try:
            return RemoteMemory(pid, word_mode=True)._read_words(addr, length)
        except OSError:
            return b""


# -- actions ----------------------------------------------------------------------

def catcher_entry_regs(regs: RegisterSnapshot, loop_entry: int, pushed_words: int = 0) -> RegisterSnapshot:
    # The landing pad returns straight to whoever called the invocation site,
    # which then enters its own debugger loop. Only words the site itself
    # pushed (a trap identifier) are dropped first.
    return regs.replace(rip=loop_entry, rsp=(regs.rsp + 8 * pushed_words) & WORD_MASK)


def transition_to_catcher(state: DebuggerState, stopped_counterpart_regs: RegisterSnapshot,
                          pushed_words: int = 0) -> None:
    pid = state.counterpart_pid
    ctx = state.ctx
    remote = RemoteMemory(pid)
    try:
        mask = linux.get_sigmask(pid)
        theirs = SwitchHeader.from_buffer_copy(remote.read(ctx.addr, HEADER_SIZE))
        if theirs.magic != CTX_MAGIC:
            raise RegisterWriteFailed("counterpart switch context is corrupt")
        payload = remote.read(ctx.payload_addr, theirs.payload_len)
        remote.write(ctx.addr + THROWER_MASK_OFFSET, struct.pack("<Q", mask))
        h = ctx.header
        h.seq = theirs.seq
        h.site_pc = stopped_counterpart_regs.rip
        h.continuation = theirs.continuation
        h.result_word = theirs.result_word
        h.archived = linux.user_regs_struct.from_snapshot(stopped_counterpart_regs)
        h.result_regs = theirs.result_regs
        ctx.set_payload(payload)
        linux.set_sigmask(pid, linux.FULL_BLOCK_MASK)
        linux.set_regs(pid, catcher_entry_regs(stopped_counterpart_regs, state.loop_entry, pushed_words))
        linux.cont(pid, 0)
    except (OSError, ValueError) as e:
        raise RegisterWriteFailed(f"could not turn {pid} into the catcher: {e}") from e
    state.log.emit("transition", counterpart=pid, pc=hex(stopped_counterpart_regs.rip))


def block_all_when_catcher() -> int:
    return linux.set_blocked_mask(linux.FULL_BLOCK_MASK)


def unblock_on_throw(mask: int) -> None:
    linux.set_blocked_mask(mask)


def apply_result_and_resume(state: DebuggerState, result, continuation: int,
                            result_regs: RegisterSnapshot | None = None, result_word: int = 0) -> None:
    """Hand a fragment's result back and raise the paired return switch.

    Runs in the process that executed the fragment. Returns once the
    counterpart has made this process the catcher again.
    """
    ctx = state.ctx
    regs = result_regs or ctx.archived_regs()
    ctx.set_payload(pickle.dumps(result, protocol=pickle.HIGHEST_PROTOCOL))
    ctx.header.result_word = result_word & ((1 << 64) - 1)
    ctx.header.result_regs = linux.user_regs_struct.from_snapshot(regs.replace(rip=continuation))
    ctx.header.continuation = continuation
    pair = state.fragments.return_pair(continuation)
    raise_switch(state, pair.back_stub)


def raise_switch(state: DebuggerState, stub: int) -> None:
    state.log.emit("raise", stub=hex(stub))
    state.seq += 1
    token = fire_stub(stub, 0, state.seq)
    if token != CATCH_TOKEN:
        fail_closed(state, f"site stub returned {token:#x} without a switch")
    state.set_role(ProcessRole.CATCHER)


def fail_closed(state: DebuggerState | None, reason: str) -> None:
    if state is not None:
        state.log.emit("fail_closed", reason=reason)
        for pid in state.tracees | {state.counterpart_pid}:
            try:
                os.kill(pid, signal.SIGKILL)
            except OSError:
                pass
    try:
        sys.stderr.write(f"selfdbg: {reason}\n")
        sys.stderr.flush()
    except Exception:
        pass
    os._exit(FAIL_CLOSED_EXIT)


def detach_and_exit(state: DebuggerState, status: int | None) -> None:
    for tid in sorted(state.tracees):
        try:
            linux.detach(tid, 0)
        except OSError:
            pass
    code = linux.exit_code_for(status) if status is not None else 0
    state.log.emit("detach_exit", counterpart=state.counterpart_pid, code=code)
    os._exit(code)


def run_fragment(state: DebuggerState, desc: FragmentDescriptor) -> None:
    """Execute a fragment in this (now throwing) process and send the result back."""
    ctx = state.ctx
    continuation = ctx.header.continuation
    state.in_fragment = True
    try:
        if desc.native:
            value = ctypes.CFUNCTYPE(ctypes.c_long)(desc.entry)()
            outcome = ("ok", value)
            word = value
        else:
            args = pickle.loads(ctx.payload())
            fctx = FragmentContext(RemoteMemory(state.counterpart_pid), ctx.archived_regs(), state.counterpart_pid)
            try:
                outcome = ("ok", desc.func(fctx, *args))
            except BaseException as exc:  # noqa: BLE001 - shipped back to the invoker
                outcome = ("err", _portable_exception(exc))
            word = outcome[1] if isinstance(outcome[1], int) and outcome[0] == "ok" else 0
    finally:
        state.in_fragment = False
    apply_result_and_resume(state, outcome, continuation, result_word=word)


def _portable_exception(exc: BaseException) -> BaseException:
    try:
        pickle.loads(pickle.dumps(exc))
        return exc
    except Exception:
        return RuntimeError(f"{type(exc).__name__}: {exc}")


def make_runner(desc: FragmentDescriptor):
    """Python body behind a fragment's native entry thunk."""

    def runner() -> int:
        state = _active
        if state is None:
            os._exit(FAIL_CLOSED_EXIT)
        try:
            run_fragment(state, desc)
        except BaseException as exc:  # noqa: BLE001
            fail_closed(state, f"fragment {desc.fragment_id} runner failed: {exc!r}")
        return 0

    return runner


def _transfer(state: DebuggerState, target: int) -> int | None:
    # Flip first: anything pending is delivered the moment the mask drops.
    state.set_role(ProcessRole.THROWER)
    unblock_on_throw(state.ctx.header.thrower_mask)
    if state.fragments.is_continuation(target):
        return target
    desc = state.fragments.fragment_at(target)
    if desc is None:
        fail_closed(state, f"decoded target {target:#x} is not a fragment entry")
    state.log.emit("enter_fragment", fragment=desc.fragment_id)
    if desc.native:
        run_fragment(state, desc)
    else:
        ctypes.CFUNCTYPE(ctypes.c_long)(desc.entry)()
    return None


def debugger_loop(state: DebuggerState) -> int:
    """Serve the counterpart until a return switch lands on a continuation here.

    Returns that continuation. The self-debugger's root loop never sees one,
    so for it this only ends through process exit.
    """
    if state.role is not ProcessRole.CATCHER:
        raise ProtocolError("debugger_loop entered outside the catcher role")
    while True:
        wait_pid = state.counterpart_pid if len(state.tracees) <= 1 else -1
        try:
            st = linux.wait_any(wait_pid)
        except ChildProcessError:
            fail_closed(state, "counterpart vanished")
        if st.gone:
            if st.pid == state.counterpart_pid:
                state.log.emit("counterpart_gone", raw=st.raw)
                os._exit(linux.exit_code_for(st.raw))
            state.tracees.discard(st.pid)
            continue
        try:
            event = build_event(state, st)
        except OSError as e:
            if e.errno == errno.ESRCH:
                continue  # killed between the stop and our look at it
            raise
        cls = classify(event, state.whitelist, state.codec)
        if isinstance(cls, SwitchRequest) and event.pid != state.counterpart_pid:
            cls = GenuineFault(event.signal)
        plan = plan_for(cls, state.role)
        state.log.emit("stop", stopped=event.pid, signal=signal_name(event.signal),
                       classification=type(cls).__name__)
        for action in plan:
            if isinstance(action, TransitionCounterpartToCatcher):
                try:
                    pushed = 1 if event.fault_kind is FaultKind.TRAP_REFERENCE else 0
                    transition_to_catcher(state, event.regs, pushed)
                except RegisterWriteFailed as e:
                    fail_closed(state, str(e))
            elif isinstance(action, TransferControlTo):
                landed = _transfer(state, action.target)
                if landed is not None:
                    return landed
            elif isinstance(action, ForwardSignal):
                _resume(event.pid, action.signal)
            elif isinstance(action, SuppressAndContinue):
                _resume(event.pid, 0)
            elif isinstance(action, DetachAndExit):
                detach_and_exit(state, action.status)


def _resume(pid: int, sig: int) -> None:
    try:
        linux.cont(pid, sig)
    except OSError as e:
        if e.errno != errno.ESRCH:
            raise


__all__ = [
    "AttachDenied", "KernelTooOld", "RegisterWriteFailed", "RemoteFault", "ProtocolError",
    "SwitchContext", "RemoteMemory", "LocalMemory", "remote_read", "remote_write", "EventLog",
    "read_event_log", "FragmentContext", "DebuggerState", "attach_counterpart", "debugger_loop",
    "transition_to_catcher", "apply_result_and_resume", "block_all_when_catcher", "unblock_on_throw",
    "build_event", "CounterpartExit",
]
