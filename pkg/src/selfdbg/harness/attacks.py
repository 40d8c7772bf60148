"""Attack scenarios run against a live protected pair.

Each scenario starts the demo in serve mode, does one thing to it, classifies
what happened and then sweeps up every process it started.
"""
from __future__ import annotations

import enum
import errno
import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

from .. import linux
from ..debugger import read_event_log
from .config import HarnessConfig, load_config


class Outcome(enum.Enum):
    DENIED = "Denied"
    BOTH_DEAD = "BothDead"
    CLEAN_SHUTDOWN = "CleanShutdown"
    DEADLOCK_OBSERVED = "DeadlockObserved"
    NONE = "None"  # none of the above happened


class ScenarioTimeout(Exception):
    pass


@dataclass
class AttackOutcome:
    scenario: str
    expected: Outcome
    observed: Outcome
    elapsed: float
    detail: dict = field(default_factory=dict)
    orphans: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.expected is self.observed

    def to_json(self) -> dict:
        out = asdict(self)
        out["expected"] = self.expected.value
        out["observed"] = self.observed.value
        out["pass"] = self.passed
        return out


# -- the live pair ---------------------------------------------------------------

class LivePair:
    def __init__(self, cfg: HarnessConfig, workdir: str):
        self.cfg = cfg
        self.event_log = os.path.join(workdir, "events.jsonl")
        self.cleanup_file = os.path.join(workdir, "cleanup.txt")
        cmd = [sys.executable, "-m", "selfdbg.harness.demo", "--serve", "--no-probe",
               "--event-log", self.event_log, "--cleanup-file", self.cleanup_file,
               "--max-seconds", str(cfg.timeouts.scenario * 2)]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        self.app, self.dbg = self._wait_ready()

    def _wait_ready(self) -> tuple[int, int]:
        import selectors
        sel = selectors.DefaultSelector()
        sel.register(self.proc.stdout, selectors.EVENT_READ)
        if not sel.select(self.cfg.timeouts.scenario):
            self.proc.kill()
            raise ScenarioTimeout("protected demo did not come up")
        line = self.proc.stdout.readline().split()
        if len(line) != 3 or line[0] != "ready":
            err = self.proc.stderr.read() if self.proc.poll() is not None else ""
            raise RuntimeError(f"demo failed to start: {line!r} {err.strip()}")
        return int(line[1]), int(line[2])

    @property
    def pids(self) -> tuple[int, int]:
        return self.app, self.dbg

    def both_dead(self) -> bool:
        return not linux.is_alive(self.app) and not linux.is_alive(self.dbg)

    def wait_both_dead(self, timeout: float) -> float | None:
        start = time.monotonic()
        while time.monotonic() - start < timeout:
            if self.both_dead():
                return time.monotonic() - start
            time.sleep(0.005)
        return None

    def cleanup_lines(self) -> list[str]:
        try:
            with open(self.cleanup_file) as fh:
                return fh.read().splitlines()
        except FileNotFoundError:
            return []

    def current_catcher(self) -> int:
        """The pid whose most recent role record says it is catching."""
        latest = {}
        for rec in read_event_log(self.event_log):
            if rec["event"] in ("init", "role"):
                latest[rec["pid"]] = rec["detail"]["role"]
        for pid, role in latest.items():
            if role == "catcher" and pid in self.pids:
                return pid
        return self.dbg

    def sweep(self) -> list[int]:
        """SIGKILL and reap whatever is left; returns pids that were still around."""
        left = [p for p in self.pids if linux.is_alive(p)]
        for pid in self.pids:
            try:
                os.kill(pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass
        self.proc.stdout.close()
        self.proc.stderr.close()
        _reap_children()
        return left


def _reap_children() -> None:
    # Orphaned self-debuggers are reparented to us (we are a subreaper).
    deadline = time.monotonic() + 2.0
    while True:
        try:
            pid, _ = os.waitpid(-1, os.WNOHANG | linux.WALL)
        except ChildProcessError:
            return
        if pid == 0:
            if time.monotonic() > deadline:
                return
            time.sleep(0.01)


def _stray_processes(pids) -> list[int]:
    return [p for p in pids if linux.proc_state(p) is not None]


# -- scenarios -------------------------------------------------------------------

def _try_attach(pids: tuple[int, ...]) -> dict[int, str]:
    """Fork an outside attacker that tries to seize each pid."""
    rfd, wfd = os.pipe()
    child = os.fork()
    if child == 0:
        os.close(rfd)
        results = []
        for pid in pids:
            try:
                linux.seize(pid, 0)
                results.append(f"{pid}:attached")
                linux.detach(pid)
            except OSError as e:
                results.append(f"{pid}:{errno.errorcode.get(e.errno, e.errno)}")
        os.write(wfd, " ".join(results).encode())
        os._exit(0)
    os.close(wfd)
    with os.fdopen(rfd) as fh:
        raw = fh.read()
    os.waitpid(child, 0)
    return {int(p): r for p, r in (item.split(":") for item in raw.split())}


def external_attach(pair: LivePair, cfg: HarnessConfig) -> tuple[Outcome, dict]:
    results = _try_attach(pair.pids)
    tracers = {str(pid): linux.tracer_pid(pid) for pid in pair.pids}
    crossed = tracers[str(pair.app)] == pair.dbg and tracers[str(pair.dbg)] == pair.app
    denied = all(r != "attached" for r in results.values())
    observed = Outcome.DENIED if denied and crossed else Outcome.NONE
    return observed, {"attach": {str(k): v for k, v in results.items()}, "tracer_pids": tracers,
                      "seats_crossed": crossed}


def _kill_one(pair: LivePair, cfg: HarnessConfig, victim: int) -> tuple[Outcome, dict]:
    os.kill(victim, signal.SIGKILL)
    took = pair.wait_both_dead(cfg.timeouts.exit_kill)
    if took is not None:
        return Outcome.BOTH_DEAD, {"victim": victim, "both_dead_after": took}
    survivor = [p for p in pair.pids if linux.is_alive(p)]
    return Outcome.NONE, {"victim": victim, "survivors": survivor}


def kill_selfdebugger(pair: LivePair, cfg: HarnessConfig) -> tuple[Outcome, dict]:
    return _kill_one(pair, cfg, pair.dbg)


def kill_app(pair: LivePair, cfg: HarnessConfig) -> tuple[Outcome, dict]:
    return _kill_one(pair, cfg, pair.app)


def sigterm_broadcast(pair: LivePair, cfg: HarnessConfig) -> tuple[Outcome, dict]:
    for pid in pair.pids:
        os.kill(pid, signal.SIGTERM)
    took = pair.wait_both_dead(cfg.timeouts.scenario)
    if took is None:
        raise ScenarioTimeout("pair still alive after SIGTERM")
    code = pair.proc.wait(timeout=5)
    lines = pair.cleanup_lines()
    clean = code == 0 and len(lines) == 1 and lines[0].startswith(f"cleanup {pair.app} ")
    detail = {"app_exit": code, "cleanup_lines": lines, "both_dead_after": took}
    if not clean:
        detail["stderr"] = pair.proc.stderr.read()[-2000:]
    return Outcome.CLEAN_SHUTDOWN if clean else Outcome.NONE, detail


def _stopped(pid: int) -> bool:
    return linux.proc_state(pid) in ("t", "T")


def sigstop_catcher(pair: LivePair, cfg: HarnessConfig) -> tuple[Outcome, dict]:
    hold = cfg.timeouts.deadlock_hold
    deadline = time.monotonic() + cfg.timeouts.scenario
    targets = []
    while time.monotonic() < deadline:
        # Roles move on every switch, so re-aim if the first shot was stale.
        catcher = pair.current_catcher()
        os.kill(catcher, signal.SIGSTOP)
        targets.append(catcher)
        retry_at = time.monotonic() + 2.0
        since = None
        while time.monotonic() < min(retry_at, deadline):
            if _stopped(pair.app) and _stopped(pair.dbg):
                since = since or time.monotonic()
                if time.monotonic() - since >= hold:
                    states = {str(p): linux.proc_state(p) for p in pair.pids}
                    return Outcome.DEADLOCK_OBSERVED, {"stopped": targets, "states": states, "held": hold}
            else:
                since = None
            if pair.both_dead():
                return Outcome.BOTH_DEAD, {"stopped": targets}
            time.sleep(0.01)
    raise ScenarioTimeout("no deadlock observed after SIGSTOP to the catcher")


SCENARIOS = {
    "external-attach": (external_attach, Outcome.DENIED),
    "kill-selfdebugger": (kill_selfdebugger, Outcome.BOTH_DEAD),
    "kill-app": (kill_app, Outcome.BOTH_DEAD),
    "sigterm-broadcast": (sigterm_broadcast, Outcome.CLEAN_SHUTDOWN),
    "sigstop-catcher": (sigstop_catcher, Outcome.DEADLOCK_OBSERVED),
}


def become_subreaper() -> None:
    linux.prctl(linux.PR_SET_CHILD_SUBREAPER, 1)


def run_attack(name: str, cfg: HarnessConfig | None = None) -> AttackOutcome:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    cfg = cfg or load_config()
    fn, expected = SCENARIOS[name]
    become_subreaper()
    with tempfile.TemporaryDirectory(prefix="selfdbg-attack-") as workdir:
        pair = LivePair(cfg, workdir)
        start = time.monotonic()
        try:
            observed, detail = fn(pair, cfg)
        finally:
            leftover = pair.sweep()
        elapsed = time.monotonic() - start
        detail["pids"] = {"app": pair.app, "dbg": pair.dbg}
        if leftover:
            detail["killed_in_sweep"] = leftover
        orphans = _stray_processes(pair.pids)
    return AttackOutcome(name, expected, observed, elapsed, detail, orphans)
