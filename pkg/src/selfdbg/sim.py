"""Model of Linux signal and debug-stop semantics for the reciprocal pair.

Two processes each trace the other. A state records, per process, whether it
runs, sits in a debug stop or has exited, its pending and blocked signals and
what it is executing. ``explore`` enumerates every interleaving of
application steps, kernel signal deliveries, mini-debugger steps and injected
external events breadth-first, and reports a reachable state in which both
processes wait on each other.

The mini-debugger steps call the real ``classify`` and ``plan_for``.
"""
from __future__ import annotations

import enum
import json
import signal
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Iterator, Mapping

from .codec import AddressRange, default_codec_config, encode_target
from .domain import FaultKind, InvocationSite, ProcessRole, RegisterSnapshot
from .protocol import (DetachAndExit, ForwardSignal, Notice, SuppressAndContinue, SwitchEvent,
                       TransferControlTo, TransitionCounterpartToCatcher, classify, plan_for, signal_name)

SIGKILL = int(signal.SIGKILL)
SIGSTOP = int(signal.SIGSTOP)
SIGTERM = int(signal.SIGTERM)
SIGUSR1 = int(signal.SIGUSR1)
SIGCHLD = int(signal.SIGCHLD)
SIGSEGV = int(signal.SIGSEGV)
SIGHUP = int(signal.SIGHUP)
SIGINT = int(signal.SIGINT)
SIGTSTP = int(signal.SIGTSTP)

MODELED_SIGNALS = frozenset({SIGHUP, SIGINT, SIGUSR1, SIGSEGV, SIGTERM, SIGCHLD, SIGTSTP, SIGKILL, SIGSTOP})
FULL_BLOCK = MODELED_SIGNALS - {SIGKILL, SIGSTOP}
ORIGINAL_MASK: frozenset[int] = frozenset()
DEFAULT_DEPTH = 24

APP, DBG = 1, 2


class RunState(enum.Enum):
    RUNNING = "running"
    DEBUG_STOPPED = "debug_stopped"
    EXITED = "exited"


class DepthExceeded(RuntimeError):
    pass


# -- model code layout: one fragment, one invocation site and its return site ----

_CODE = AddressRange(0x400000, 0x100000)
_CODEC = default_codec_config(_CODE)
FRAGMENT_ENTRY = 0x401000
CONTINUATION = 0x402000
INVOKE_PC = 0x403000
RETURN_PC = 0x403100
GENUINE_PC = 0x404000
_LS_SCHEME = _CODEC.scheme_for_kind(FaultKind.SEGV_LOAD_STORE)


class _ModelWhitelist:
    _sites = {
        INVOKE_PC: InvocationSite(INVOKE_PC, FaultKind.SEGV_LOAD_STORE, _LS_SCHEME.scheme_id, continuation=CONTINUATION),
        RETURN_PC: InvocationSite(RETURN_PC, FaultKind.SEGV_LOAD_STORE, _LS_SCHEME.scheme_id),
    }

    def lookup(self, pc: int):
        return self._sites.get(pc)


_WHITELIST = _ModelWhitelist()


# -- state ---------------------------------------------------------------------

@dataclass(frozen=True)
class SimProcess:
    pid: int
    name: str
    run_state: RunState
    role: ProcessRole
    activity: str  # app | fragment | loop | terminating | gone
    pending: frozenset = frozenset()
    blocked: frozenset = frozenset()
    child_notices_suppressed: bool = True
    stop: tuple | None = None  # (kind, detail)
    traced: bool = True  # the counterpart is still attached to this process
    exit_code: int | None = None


@dataclass(frozen=True)
class SimPolicy:
    suppress_child_notices: bool = True
    block_when_catcher: bool = True
    # what the self-debugger does with SIGTERM/SIGINT/SIGHUP: ignore, relay (to the app) or default (die)
    dbg_termination: str = "ignore"


@dataclass(frozen=True)
class Injection:
    """External event: ``target`` is app, dbg, catcher, thrower; ``what`` a signal number or 'fault'."""

    target: str
    what: int | str

    def label(self) -> str:
        what = self.what if isinstance(self.what, str) else signal_name(self.what)
        return f"inject {what} -> {self.target}"


@dataclass(frozen=True)
class SimEvent:
    step: int
    label: str


@dataclass(frozen=True)
class SimSystem:
    processes: tuple[SimProcess, SimProcess]
    exitkill: bool = True
    policy: SimPolicy = SimPolicy()
    budget: int = 1  # migrated calls the application still makes
    remaining: tuple[Injection, ...] = ()
    cleanup_runs: int = 0
    usr1_deliveries: tuple[tuple[str, str], ...] = ()
    app_asked_to_terminate: bool = False
    trace: tuple[SimEvent, ...] = field(default=(), compare=False, hash=False)

    def proc(self, pid: int) -> SimProcess:
        return self.processes[0] if pid == APP else self.processes[1]

    def other(self, pid: int) -> SimProcess:
        return self.proc(DBG if pid == APP else APP)

    def with_proc(self, p: SimProcess) -> SimSystem:
        procs = (p, self.processes[1]) if p.pid == APP else (self.processes[0], p)
        return replace(self, processes=procs)

    @property
    def both_exited(self) -> bool:
        return all(p.run_state is RunState.EXITED for p in self.processes)

    def summary(self) -> dict:
        return {
            p.name: {"run_state": p.run_state.value, "role": p.role.value, "activity": p.activity,
                     "pending": sorted(signal_name(s) for s in p.pending), "stop": _stop_text(p.stop),
                     "exit_code": p.exit_code}
            for p in self.processes
        } | {"cleanup_runs": self.cleanup_runs, "budget": self.budget,
             "usr1_deliveries": [list(d) for d in self.usr1_deliveries],
             "app_asked_to_terminate": self.app_asked_to_terminate}


def _stop_text(stop):
    if stop is None:
        return None
    kind, detail = stop
    return f"{kind}:{signal_name(detail)}" if kind in ("signal", "group") else f"{kind}:{detail}"


def initial_system(policy: SimPolicy = SimPolicy(), injections: Iterable[Injection] = (), budget: int = 1,
                   exitkill: bool = True) -> SimSystem:
    app = SimProcess(APP, "app", RunState.RUNNING, ProcessRole.THROWER, "app",
                     blocked=ORIGINAL_MASK, child_notices_suppressed=policy.suppress_child_notices)
    dbg = SimProcess(DBG, "dbg", RunState.RUNNING, ProcessRole.CATCHER, "loop",
                     blocked=FULL_BLOCK if policy.block_when_catcher else ORIGINAL_MASK,
                     child_notices_suppressed=policy.suppress_child_notices)
    return SimSystem((app, dbg), exitkill, policy, budget, tuple(injections))


# -- kernel primitives ------------------------------------------------------------

def _debug_stop(s: SimSystem, pid: int, reason: tuple) -> SimSystem:
    p = s.proc(pid)
    s = s.with_proc(replace(p, run_state=RunState.DEBUG_STOPPED, stop=reason))
    tracer = s.other(pid)
    if tracer.run_state is not RunState.EXITED and p.traced and not tracer.child_notices_suppressed:
        s = s.with_proc(replace(tracer, pending=tracer.pending | {SIGCHLD}))
    return s


def _exit(s: SimSystem, pid: int, code: int) -> SimSystem:
    p = s.proc(pid)
    if p.run_state is RunState.EXITED:
        return s
    s = s.with_proc(replace(p, run_state=RunState.EXITED, activity="gone", stop=None, pending=frozenset(),
                            exit_code=code))
    other = s.other(pid)
    if other.run_state is RunState.EXITED:
        return s
    if p.traced:
        # exit of a still-traced process always notifies its tracer
        other = replace(other, pending=other.pending | {SIGCHLD})
        s = s.with_proc(other)
    if s.exitkill and other.traced:
        s = _exit(s, other.pid, 128 + SIGKILL)
    return s


def sim_deliver(system: SimSystem, pid: int, sig: int) -> SimSystem:
    """A signal arrives at ``pid``: kill, stop, or pend (and stop at once if deliverable)."""
    p = system.proc(pid)
    if p.run_state is RunState.EXITED:
        raise ValueError(f"{p.name} has exited")
    if sig == SIGKILL:
        return _exit(system, pid, 128 + SIGKILL)
    if pid == APP and sig in (SIGTERM, SIGINT, SIGHUP) and (p.stop is None or p.stop[0] != "exit"):
        system = replace(system, app_asked_to_terminate=True)
    if sig == SIGSTOP and p.run_state is RunState.RUNNING:
        return _debug_stop(system, pid, ("signal", SIGSTOP))
    s = system.with_proc(replace(p, pending=p.pending | {sig}))
    p = s.proc(pid)
    if p.run_state is RunState.RUNNING and sig not in p.blocked:
        s = s.with_proc(replace(p, pending=p.pending - {sig}))
        s = _debug_stop(s, pid, ("signal", sig))
    return s


def _deliverable(p: SimProcess) -> list[int]:
    if p.run_state is not RunState.RUNNING:
        return []
    return sorted(sig for sig in p.pending if sig not in p.blocked or sig == SIGSTOP)


# -- the mini-debugger in the model --------------------------------------------------

def _event_for(q: SimProcess) -> SwitchEvent:
    kind, detail = q.stop
    if kind == "switch":
        pc, target = (INVOKE_PC, FRAGMENT_ENTRY) if detail == "invoke" else (RETURN_PC, CONTINUATION)
        encoded = encode_target(target, _LS_SCHEME, _CODEC.namespace, _CODE)
        return SwitchEvent(q.pid, SIGSEGV, pc, FaultKind.SEGV_LOAD_STORE, encoded, RegisterSnapshot(rip=pc))
    if kind == "fault":
        return SwitchEvent(q.pid, SIGSEGV, GENUINE_PC, FaultKind.SEGV_LOAD_STORE, 0, RegisterSnapshot(rip=GENUINE_PC))
    if kind == "exit":
        return SwitchEvent(q.pid, int(signal.SIGTRAP), notice=Notice.EXIT, exit_status=detail)
    if kind == "group":
        return SwitchEvent(q.pid, detail, notice=Notice.GROUP_STOP)
    return SwitchEvent(q.pid, detail)


def _apply_disposition(s: SimSystem, pid: int, sig: int) -> SimSystem:
    """What a resumed process does with a signal its debugger let through."""
    q = s.proc(pid)
    if sig == SIGSEGV:
        return _debug_stop(s, pid, ("exit", 128 + SIGSEGV))
    if sig == SIGSTOP:
        return _debug_stop(s, pid, ("group", SIGSTOP))
    if sig in (SIGTERM, SIGINT, SIGHUP):
        if pid == APP:
            s = replace(s, cleanup_runs=s.cleanup_runs + 1)
            return s.with_proc(replace(s.proc(pid), activity="terminating"))
        if s.policy.dbg_termination == "ignore":
            return s
        if s.policy.dbg_termination == "relay":
            app = s.proc(APP)
            return s if app.run_state is RunState.EXITED else sim_deliver(s, APP, sig)
        return _debug_stop(s, pid, ("exit", 128 + sig))
    if sig == SIGUSR1:
        return replace(s, usr1_deliveries=s.usr1_deliveries + ((q.name, q.role.value),))
    return s


def debugger_enabled(system: SimSystem, pid: int) -> bool:
    p = system.proc(pid)
    q = system.other(pid)
    return (p.run_state is RunState.RUNNING and p.role is ProcessRole.CATCHER and p.activity == "loop"
            and not _deliverable(p) and q.run_state is RunState.DEBUG_STOPPED and q.traced)


def sim_debugger_step(system: SimSystem, pid: int) -> SimSystem:
    """The catcher ``pid`` handles its stopped counterpart via classify/plan_for."""
    if not debugger_enabled(system, pid):
        raise ValueError(f"{system.proc(pid).name} cannot act as the active mini-debugger here")
    q = system.other(pid)
    event = _event_for(q)
    cls = classify(event, _WHITELIST, _CODEC)
    s = system
    for action in plan_for(cls, s.proc(pid).role):
        p, q = s.proc(pid), s.other(pid)
        if isinstance(action, TransitionCounterpartToCatcher):
            blocked = FULL_BLOCK if s.policy.block_when_catcher else ORIGINAL_MASK
            s = s.with_proc(replace(q, role=ProcessRole.CATCHER, activity="loop", blocked=blocked,
                                    run_state=RunState.RUNNING, stop=None))
        elif isinstance(action, TransferControlTo):
            activity = "fragment" if action.target == FRAGMENT_ENTRY else "app"
            s = s.with_proc(replace(p, role=ProcessRole.THROWER, activity=activity, blocked=ORIGINAL_MASK))
        elif isinstance(action, ForwardSignal):
            s = s.with_proc(replace(q, run_state=RunState.RUNNING, stop=None))
            s = _apply_disposition(s, q.pid, action.signal)
        elif isinstance(action, SuppressAndContinue):
            s = s.with_proc(replace(q, run_state=RunState.RUNNING, stop=None))
        elif isinstance(action, DetachAndExit):
            code = action.status if action.status is not None else 0
            s = s.with_proc(replace(q, traced=False))
            s = _exit(s, q.pid, code)
            s = _exit(s, pid, code)
    return s


# -- successor relation -------------------------------------------------------------

def _resolve_target(s: SimSystem, target: str) -> int | None:
    if target in ("app", "dbg"):
        return APP if target == "app" else DBG
    role = ProcessRole.CATCHER if target == "catcher" else ProcessRole.THROWER
    for p in s.processes:
        if p.role is role and p.run_state is not RunState.EXITED:
            return p.pid
    return None


def _inject(s: SimSystem, inj: Injection) -> SimSystem | None:
    pid = _resolve_target(s, inj.target)
    if pid is None or s.proc(pid).run_state is RunState.EXITED:
        return None
    if inj.what == "fault":
        # a genuine fault comes from execution, so only a running process can raise one
        if s.proc(pid).run_state is not RunState.RUNNING:
            return None
        return _debug_stop(s, pid, ("fault", SIGSEGV))
    return sim_deliver(s, pid, int(inj.what))


def _program_step(s: SimSystem) -> tuple[str, SimSystem] | None:
    for p in s.processes:
        if p.run_state is not RunState.RUNNING or p.role is not ProcessRole.THROWER:
            continue
        if _deliverable(p):
            continue  # the kernel delivers pending signals before user code runs again
        if p.activity == "app" and s.budget > 0:
            return f"{p.name} raises invoke switch", _debug_stop(replace(s, budget=s.budget - 1), p.pid,
                                                                 ("switch", "invoke"))
        if p.activity in ("app", "terminating"):
            return f"{p.name} exits", _debug_stop(s, p.pid, ("exit", 0))
        if p.activity == "fragment":
            return f"{p.name} raises return switch", _debug_stop(s, p.pid, ("switch", "return"))
    return None


def internal_steps(s: SimSystem) -> Iterator[tuple[str, SimSystem]]:
    step = _program_step(s)
    if step:
        yield step
    for p in s.processes:
        for sig in _deliverable(p)[:1]:
            after = s.with_proc(replace(p, pending=p.pending - {sig}))
            yield f"kernel stops {p.name} for {signal_name(sig)}", _debug_stop(after, p.pid, ("signal", sig))
    for p in s.processes:
        if debugger_enabled(s, p.pid):
            q = s.other(p.pid)
            yield f"{p.name} handles {q.name} stop {_stop_text(q.stop)}", sim_debugger_step(s, p.pid)


def successors(s: SimSystem) -> Iterator[tuple[str, SimSystem]]:
    yield from internal_steps(s)
    for i, inj in enumerate(s.remaining):
        nxt = _inject(replace(s, remaining=s.remaining[:i] + s.remaining[i + 1:]), inj)
        if nxt is not None:
            yield inj.label(), nxt


def is_deadlock(s: SimSystem) -> bool:
    stopped = all(p.run_state is RunState.DEBUG_STOPPED for p in s.processes)
    return stopped and next(internal_steps(s), None) is None


# -- exploration ---------------------------------------------------------------------

@dataclass(frozen=True)
class DeadlockVerdict:
    value: str  # DeadlockFree | Deadlock | DepthExceeded
    trace: tuple[SimEvent, ...] = ()
    final: dict | None = None
    states: int = 0
    terminals: tuple[SimSystem, ...] = field(default=(), repr=False, compare=False)

    @property
    def deadlock(self) -> bool:
        return self.value == "Deadlock"

    def to_json(self) -> str:
        return json.dumps({"verdict": self.value, "states": self.states,
                           "trace": [asdict(e) for e in self.trace], "final": self.final}, indent=2)


@dataclass(frozen=True)
class Scenario:
    name: str
    policy: SimPolicy = SimPolicy()
    injections: tuple[Injection, ...] = ()
    budget: int = 1
    exitkill: bool = True
    expected: str = "DeadlockFree"
    description: str = ""

    def initial(self) -> SimSystem:
        return initial_system(self.policy, self.injections, self.budget, self.exitkill)


def explore(scenario: Scenario | SimSystem, depth: int = DEFAULT_DEPTH, raise_on_depth: bool = False) -> DeadlockVerdict:
    """Breadth-first search of every interleaving up to ``depth`` steps."""
    start = scenario.initial() if isinstance(scenario, Scenario) else scenario
    seen = {start}
    frontier = deque([start])
    terminals = []
    for level in range(depth + 1):
        nxt = deque()
        for s in frontier:
            if is_deadlock(s):
                return DeadlockVerdict("Deadlock", s.trace, s.summary(), len(seen), tuple(terminals))
            moves = list(successors(s))
            if not moves:
                terminals.append(s)
                continue
            if level == depth:
                # states still have moves at the bound: nothing proven
                if raise_on_depth:
                    raise DepthExceeded(f"unexplored interleavings beyond depth {depth}")
                return DeadlockVerdict("DepthExceeded", s.trace, s.summary(), len(seen), tuple(terminals))
            for label, t in moves:
                if t not in seen:
                    seen.add(t)
                    nxt.append(replace(t, trace=s.trace + (SimEvent(len(s.trace) + 1, label),)))
        frontier = nxt
        if not frontier:
            break
    return DeadlockVerdict("DeadlockFree", (), None, len(seen), tuple(terminals))


# -- catalog ----------------------------------------------------------------------------

FULL_POLICY = SimPolicy()


def scenario_catalog() -> dict[str, Scenario]:
    return {
        "ChildNoticeDefault": Scenario(
            "ChildNoticeDefault", SimPolicy(suppress_child_notices=False, block_when_catcher=False),
            expected="Deadlock", description="stop notices reach an unblocked catcher"),
        "ChildNoticeSuppressed": Scenario(
            "ChildNoticeSuppressed", SimPolicy(suppress_child_notices=True, block_when_catcher=False),
            expected="DeadlockFree", description="stop notices disabled in both processes"),
        "SigtermBroadcast": Scenario(
            "SigtermBroadcast", FULL_POLICY, (Injection("app", SIGTERM), Injection("dbg", SIGTERM)),
            expected="DeadlockFree", description="shutdown sends SIGTERM to both"),
        "UserSignalToCatcher": Scenario(
            "UserSignalToCatcher", FULL_POLICY, (Injection("catcher", SIGUSR1),),
            expected="DeadlockFree", description="SIGUSR1 to whichever process is catching"),
        "GenuineFaultInThrower": Scenario(
            "GenuineFaultInThrower", FULL_POLICY, (Injection("thrower", "fault"),),
            expected="DeadlockFree", description="a real bug faults in the throwing process"),
        "GenuineFaultInCatcher": Scenario(
            "GenuineFaultInCatcher", FULL_POLICY, (Injection("catcher", "fault"),),
            expected="Deadlock", description="the mini-debugger itself faults"),
        "SigstopToCatcher": Scenario(
            "SigstopToCatcher", FULL_POLICY, (Injection("catcher", SIGSTOP),),
            expected="Deadlock", description="SIGSTOP cannot be blocked"),
        "SigkillEither": Scenario(
            "SigkillEither", FULL_POLICY, (Injection("app", SIGKILL), Injection("dbg", SIGKILL)),
            expected="DeadlockFree", description="SIGKILL to either process"),
    }


def scenario_from_mapping(name: str, raw: Mapping) -> Scenario:
    """Build a scenario from a config table (see the harness config format)."""
    names = {n: int(getattr(signal, n)) for n in dir(signal) if n.startswith("SIG") and not n.startswith("SIG_")
             and isinstance(getattr(signal, n), int)}
    injections = []
    for item in raw.get("inject", []):
        target, _, what = str(item).partition(":")
        injections.append(Injection(target, what if what == "fault" else names[what]))
    policy = SimPolicy(
        suppress_child_notices=bool(raw.get("suppress_child_notices", True)),
        block_when_catcher=bool(raw.get("block_when_catcher", True)),
        dbg_termination=str(raw.get("dbg_termination", "ignore")),
    )
    return Scenario(name, policy, tuple(injections), int(raw.get("budget", 1)), bool(raw.get("exitkill", True)),
                    str(raw.get("expected", "DeadlockFree")), str(raw.get("description", "")))


def terminal_checks(name: str, verdict: DeadlockVerdict) -> list[str]:
    """Extra outcome checks for catalog entries whose verdict alone says too little."""
    problems = []
    for t in verdict.terminals:
        if not t.both_exited:
            problems.append(f"terminal state with a live process: {t.summary()}")
    if name == "SigtermBroadcast":
        for t in verdict.terminals:
            if t.cleanup_runs > 1 or (t.app_asked_to_terminate and t.cleanup_runs != 1):
                problems.append(f"cleanup ran {t.cleanup_runs} times")
    if name == "UserSignalToCatcher":
        for t in verdict.terminals:
            for who, role in t.usr1_deliveries:
                if role != ProcessRole.THROWER.value:
                    problems.append(f"SIGUSR1 handled by {who} while {role}")
    return sorted(set(problems))
