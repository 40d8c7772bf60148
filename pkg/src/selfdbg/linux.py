"""ctypes bindings for the Linux debugging API and the few syscalls around it.

Only x86-64 is supported. Everything here is a thin wrapper that raises
``OSError`` with the libc errno on failure; policy lives in the runtime.
"""
from __future__ import annotations

import ctypes
import errno
import os
import re
import signal
import struct
from dataclasses import dataclass

from .domain import REGISTER_NAMES, RegisterSnapshot

libc = ctypes.CDLL(None, use_errno=True)

libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
libc.ptrace.restype = ctypes.c_long
libc.syscall.restype = ctypes.c_long
libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
libc.mmap.restype = ctypes.c_void_p
libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
libc.mprotect.restype = ctypes.c_int
libc.prctl.argtypes = [ctypes.c_int, ctypes.c_ulong, ctypes.c_ulong, ctypes.c_ulong, ctypes.c_ulong]
libc.prctl.restype = ctypes.c_int

PTRACE_PEEKDATA = 2
PTRACE_POKEDATA = 5
PTRACE_CONT = 7
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_DETACH = 17
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201
PTRACE_GETSIGINFO = 0x4202
PTRACE_SEIZE = 0x4206
PTRACE_INTERRUPT = 0x4207
PTRACE_LISTEN = 0x4208
PTRACE_GETSIGMASK = 0x420A
PTRACE_SETSIGMASK = 0x420B

PTRACE_O_TRACEEXIT = 0x40
PTRACE_O_EXITKILL = 0x100000

PTRACE_EVENT_EXIT = 6
PTRACE_EVENT_STOP = 128

WALL = 0x40000000

SI_KERNEL = 0x80

SYS_rt_sigprocmask = 14
SYS_process_vm_readv = 310
SYS_process_vm_writev = 311
SIG_SETMASK = 2

PR_SET_PTRACER = 0x59616D61
PR_SET_CHILD_SUBREAPER = 36

PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4
MAP_PRIVATE, MAP_ANONYMOUS = 0x02, 0x20
MAP_FAILED = ctypes.c_void_p(-1).value

SA_NOCLDSTOP = 1

# Every blockable signal: all 64 bits except SIGKILL and SIGSTOP.
UNBLOCKABLE = frozenset({signal.SIGKILL, signal.SIGSTOP})
FULL_BLOCK_MASK = ((1 << 64) - 1) & ~((1 << (signal.SIGKILL - 1)) | (1 << (signal.SIGSTOP - 1)))


class user_regs_struct(ctypes.Structure):
    _fields_ = [(name, ctypes.c_ulonglong) for name in REGISTER_NAMES]

    def snapshot(self) -> RegisterSnapshot:
        return RegisterSnapshot.from_words(getattr(self, n) for n in REGISTER_NAMES)

    @classmethod
    def from_snapshot(cls, regs: RegisterSnapshot) -> user_regs_struct:
        return cls(*regs.words())


class iovec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


class k_sigaction(ctypes.Structure):
    # glibc's struct sigaction layout on x86-64
    _fields_ = [
        ("sa_handler", ctypes.c_void_p),
        ("sa_mask", ctypes.c_ulong * 16),
        ("sa_flags", ctypes.c_int),
        ("sa_restorer", ctypes.c_void_p),
    ]


libc.sigaction.argtypes = [ctypes.c_int, ctypes.POINTER(k_sigaction), ctypes.POINTER(k_sigaction)]
libc.sigaction.restype = ctypes.c_int


def _check(result: int, what: str) -> int:
    if result == -1:
        err = ctypes.get_errno()
        raise OSError(err, f"{what}: {os.strerror(err)}")
    return result


def ptrace(request: int, pid: int, addr: int | None = 0, data: object = 0) -> int:
    ctypes.set_errno(0)
    result = libc.ptrace(request, pid, addr, data)
    if result == -1 and ctypes.get_errno():
        err = ctypes.get_errno()
        raise OSError(err, f"ptrace({request:#x}, {pid}): {os.strerror(err)}")
    return result


def seize(pid: int, options: int) -> None:
    ptrace(PTRACE_SEIZE, pid, 0, options)


def interrupt(pid: int) -> None:
    ptrace(PTRACE_INTERRUPT, pid)


def cont(pid: int, sig: int = 0) -> None:
    ptrace(PTRACE_CONT, pid, 0, sig)


def listen(pid: int) -> None:
    ptrace(PTRACE_LISTEN, pid)


def detach(pid: int, sig: int = 0) -> None:
    ptrace(PTRACE_DETACH, pid, 0, sig)


def get_regs(pid: int) -> RegisterSnapshot:
    regs = user_regs_struct()
    ptrace(PTRACE_GETREGS, pid, 0, ctypes.addressof(regs))
    return regs.snapshot()


def set_regs(pid: int, regs: RegisterSnapshot) -> None:
    raw = user_regs_struct.from_snapshot(regs)
    ptrace(PTRACE_SETREGS, pid, 0, ctypes.addressof(raw))


def get_sigmask(pid: int) -> int:
    mask = ctypes.c_uint64()
    ptrace(PTRACE_GETSIGMASK, pid, 8, ctypes.addressof(mask))
    return mask.value


def set_sigmask(pid: int, mask: int) -> None:
    raw = ctypes.c_uint64(mask)
    ptrace(PTRACE_SETSIGMASK, pid, 8, ctypes.addressof(raw))


def get_event_msg(pid: int) -> int:
    msg = ctypes.c_ulong()
    ptrace(PTRACE_GETEVENTMSG, pid, 0, ctypes.addressof(msg))
    return msg.value


@dataclass(frozen=True)
class SigInfo:
    signo: int
    code: int
    addr: int


def get_siginfo(pid: int) -> SigInfo:
    buf = (ctypes.c_ubyte * 128)()
    ptrace(PTRACE_GETSIGINFO, pid, 0, ctypes.addressof(buf))
    raw = bytes(buf)
    signo, _errno, code = struct.unpack_from("iii", raw)
    (addr,) = struct.unpack_from("Q", raw, 16)
    return SigInfo(signo, code, addr)


def peek(pid: int, addr: int) -> int:
    return ptrace(PTRACE_PEEKDATA, pid, addr, 0) & ((1 << 64) - 1)


def poke(pid: int, addr: int, word: int) -> None:
    ptrace(PTRACE_POKEDATA, pid, addr, ctypes.c_ulong(word & ((1 << 64) - 1)).value)


def process_vm_read(pid: int, addr: int, length: int) -> bytes:
    buf = ctypes.create_string_buffer(length)
    local = iovec(ctypes.addressof(buf), length)
    remote = iovec(addr, length)
    got = libc.syscall(SYS_process_vm_readv, ctypes.c_int(pid), ctypes.byref(local), ctypes.c_ulong(1),
                       ctypes.byref(remote), ctypes.c_ulong(1), ctypes.c_ulong(0))
    _check(got, "process_vm_readv")
    if got != length:
        raise OSError(errno.EFAULT, f"process_vm_readv: short read {got}/{length}")
    return buf.raw


def process_vm_write(pid: int, addr: int, data: bytes) -> None:
    buf = ctypes.create_string_buffer(bytes(data), len(data))
    local = iovec(ctypes.addressof(buf), len(data))
    remote = iovec(addr, len(data))
    got = libc.syscall(SYS_process_vm_writev, ctypes.c_int(pid), ctypes.byref(local), ctypes.c_ulong(1),
                       ctypes.byref(remote), ctypes.c_ulong(1), ctypes.c_ulong(0))
    _check(got, "process_vm_writev")
    if got != len(data):
        raise OSError(errno.EFAULT, f"process_vm_writev: short write {got}/{len(data)}")


def set_blocked_mask(mask: int) -> int:
    """Replace the calling thread's signal mask with a raw 64-bit set; returns the old one.

    Goes through the raw syscall because glibc silently drops its internal
    realtime signals from masks passed to ``sigprocmask``.
    """
    new = ctypes.c_uint64(mask)
    old = ctypes.c_uint64()
    _check(libc.syscall(SYS_rt_sigprocmask, ctypes.c_int(SIG_SETMASK), ctypes.byref(new), ctypes.byref(old),
                        ctypes.c_size_t(8)), "rt_sigprocmask")
    return old.value


def get_blocked_mask() -> int:
    old = ctypes.c_uint64()
    _check(libc.syscall(SYS_rt_sigprocmask, ctypes.c_int(SIG_SETMASK), None, ctypes.byref(old),
                        ctypes.c_size_t(8)), "rt_sigprocmask")
    return old.value


def mask_of(signals) -> int:
    mask = 0
    for s in signals:
        mask |= 1 << (int(s) - 1)
    return mask


def signals_in(mask: int) -> set[int]:
    return {bit + 1 for bit in range(64) if mask >> bit & 1}


def set_child_stop_notices(enabled: bool) -> None:
    """Keep SIGCHLD at its default action, toggling SA_NOCLDSTOP."""
    act = k_sigaction()
    act.sa_handler = 0  # SIG_DFL
    act.sa_flags = 0 if enabled else SA_NOCLDSTOP
    _check(libc.sigaction(signal.SIGCHLD, ctypes.byref(act), None), "sigaction(SIGCHLD)")


def child_stop_notices_enabled() -> bool:
    old = k_sigaction()
    _check(libc.sigaction(signal.SIGCHLD, None, ctypes.byref(old)), "sigaction(SIGCHLD)")
    return not (old.sa_flags & SA_NOCLDSTOP)


def prctl(option: int, arg2: int = 0) -> int:
    return _check(libc.prctl(option, arg2, 0, 0, 0), "prctl")


def map_pages(size: int, prot: int) -> int:
    addr = libc.mmap(None, size, prot, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0)
    if addr in (None, MAP_FAILED):
        err = ctypes.get_errno()
        raise OSError(err, f"mmap: {os.strerror(err)}")
    return addr


def protect_pages(addr: int, size: int, prot: int) -> None:
    _check(libc.mprotect(addr, size, prot), "mprotect")


# -- wait status decoding ---------------------------------------------------

@dataclass(frozen=True)
class WaitStatus:
    pid: int
    raw: int

    @property
    def exited(self) -> bool:
        return os.WIFEXITED(self.raw)

    @property
    def signaled(self) -> bool:
        return os.WIFSIGNALED(self.raw)

    @property
    def gone(self) -> bool:
        return self.exited or self.signaled

    @property
    def stopped(self) -> bool:
        return os.WIFSTOPPED(self.raw)

    @property
    def stop_signal(self) -> int:
        return os.WSTOPSIG(self.raw)

    @property
    def event(self) -> int:
        return (self.raw >> 16) & 0xFF

    @property
    def exit_code(self) -> int:
        return os.WEXITSTATUS(self.raw)

    @property
    def term_signal(self) -> int:
        return os.WTERMSIG(self.raw)


def wait_any(pid: int = -1, nohang: bool = False) -> WaitStatus | None:
    flags = WALL | (os.WNOHANG if nohang else 0)
    got, status = os.waitpid(pid, flags)
    if got == 0:
        return None
    return WaitStatus(got, status)


def exit_code_for(raw_status: int) -> int:
    """Shell-style exit code for a wait status: code, or 128+signal."""
    if os.WIFEXITED(raw_status):
        return os.WEXITSTATUS(raw_status)
    if os.WIFSIGNALED(raw_status):
        return 128 + os.WTERMSIG(raw_status)
    return 1


# -- procfs -----------------------------------------------------------------

def proc_status(pid: int) -> dict[str, str]:
    fields = {}
    with open(f"/proc/{pid}/status") as fh:
        for line in fh:
            key, _, value = line.partition(":")
            fields[key] = value.strip()
    return fields


def tracer_pid(pid: int) -> int:
    return int(proc_status(pid)["TracerPid"])


def proc_mask(pid: int, field: str) -> int:
    return int(proc_status(pid)[field], 16)


def proc_state(pid: int) -> str | None:
    """Single-letter scheduler state from /proc/<pid>/stat, or None if gone."""
    try:
        with open(f"/proc/{pid}/stat") as fh:
            raw = fh.read()
    except (FileNotFoundError, ProcessLookupError):
        return None
    return raw[raw.rindex(")") + 2]


def is_alive(pid: int) -> bool:
    state = proc_state(pid)
    return state is not None and state not in ("Z", "X")


def thread_ids(pid: int) -> list[int]:
    try:
        return sorted(int(t) for t in os.listdir(f"/proc/{pid}/task"))
    except FileNotFoundError:
        return []


def kernel_version() -> tuple[int, int]:
    match = re.match(r"(\d+)\.(\d+)", os.uname().release)
    if not match:
        return (0, 0)
    return int(match.group(1)), int(match.group(2))
