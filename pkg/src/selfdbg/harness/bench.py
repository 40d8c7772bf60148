"""Micro-benchmarks, one per self-debugging aspect.

Each aspect is timed with a monotonic nanosecond clock around just that
aspect, after discarding warm-up iterations. Distributions are reported as
median and 10th/90th percentiles.
"""
from __future__ import annotations

import enum
import json
import platform
import statistics
import subprocess
import sys
from dataclasses import dataclass

from .config import BenchOptions


class Aspect(enum.Enum):
    INIT = "Init"
    REMOTE_READ = "RemoteRead"
    REMOTE_WRITE = "RemoteWrite"
    SWITCH_TRAP = "SwitchTrap"
    SWITCH_SEGV_RW = "SwitchSegvRW"
    SWITCH_SEGV_X = "SwitchSegvX"


MIN_SAMPLES = {Aspect.INIT: 30}
DEFAULT_MIN = 100

_WORKER_KEYS = {
    "init": Aspect.INIT, "read": Aspect.REMOTE_READ, "write": Aspect.REMOTE_WRITE,
    "trap": Aspect.SWITCH_TRAP, "segv-rw": Aspect.SWITCH_SEGV_RW, "segv-x": Aspect.SWITCH_SEGV_X,
}


class InsufficientSamples(ValueError):
    pass


class WorkerFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchResult:
    aspect: Aspect
    samples: int
    median: float  # seconds
    p10: float
    p90: float

    def to_json(self) -> dict:
        return {"aspect": self.aspect.value, "samples": self.samples,
                "median": self.median, "p10": self.p10, "p90": self.p90}


def summarize(aspect: Aspect, durations_ns: list[int]) -> BenchResult:
    need = MIN_SAMPLES.get(aspect, DEFAULT_MIN)
    if len(durations_ns) < need:
        raise InsufficientSamples(f"{aspect.value}: {len(durations_ns)} samples, need at least {need}")
    secs = [d / 1e9 for d in durations_ns]
    if min(secs) <= 0:
        raise ValueError(f"{aspect.value}: non-positive duration measured")
    deciles = statistics.quantiles(secs, n=10, method="inclusive")
    return BenchResult(aspect, len(secs), statistics.median(secs), deciles[0], deciles[8])


def _run_worker(args: list[str], timeout: float) -> dict:
    cmd = [sys.executable, "-m", "selfdbg.harness.worker", *args]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0 or not proc.stdout.strip():
        raise WorkerFailed(f"{' '.join(args)} exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
    return json.loads(proc.stdout.strip().splitlines()[-1])


def run_bench(opts: BenchOptions, method: str = "segv-rw", timeout: float = 300.0) -> list[BenchResult]:
    for aspect, n in ((Aspect.INIT, opts.init_samples), (Aspect.SWITCH_TRAP, opts.switch_samples),
                      (Aspect.REMOTE_READ, opts.remote_samples)):
        need = MIN_SAMPLES.get(aspect, DEFAULT_MIN)
        if n < need:
            raise InsufficientSamples(f"{aspect.value}: {n} samples requested, need at least {need}")
    raw = {}
    raw.update(_run_worker(["init", "--samples", str(opts.init_samples), "--warmup", str(min(opts.warmup, 3))],
                           timeout))
    samples = max(opts.switch_samples, opts.remote_samples)
    raw.update(_run_worker(["runtime", "--samples", str(samples), "--warmup", str(opts.warmup),
                            "--method", method], timeout))
    rows = {_WORKER_KEYS[k]: summarize(_WORKER_KEYS[k], v) for k, v in raw.items()}
    return [rows[a] for a in Aspect]


def ratios(rows: list[BenchResult]) -> dict[str, float]:
    by = {r.aspect: r.median for r in rows}
    return {
        "trap_over_segv_rw": by[Aspect.SWITCH_TRAP] / by[Aspect.SWITCH_SEGV_RW],
        "trap_over_segv_x": by[Aspect.SWITCH_TRAP] / by[Aspect.SWITCH_SEGV_X],
        "segv_rw_over_segv_x": by[Aspect.SWITCH_SEGV_RW] / by[Aspect.SWITCH_SEGV_X],
        "write_over_read": by[Aspect.REMOTE_WRITE] / by[Aspect.REMOTE_READ],
    }


def report_json(rows: list[BenchResult], method: str) -> dict:
    return {
        "host": {"machine": platform.machine(), "kernel": platform.release(), "python": platform.python_version()},
        "method": method,
        "unit": "seconds",
        "rows": [r.to_json() for r in rows],
        "ratios": ratios(rows),
    }


def _fmt(seconds: float) -> str:
    if seconds >= 1e-3:
        return f"{seconds * 1e3:9.3f} ms"
    return f"{seconds * 1e6:9.2f} us"


def report_text(rows: list[BenchResult]) -> str:
    lines = [f"{'aspect':<14}{'samples':>8}{'median':>14}{'p10':>14}{'p90':>14}"]
    for r in rows:
        lines.append(f"{r.aspect.value:<14}{r.samples:>8}{_fmt(r.median):>14}{_fmt(r.p10):>14}{_fmt(r.p90):>14}")
    for name, value in ratios(rows).items():
        lines.append(f"ratio {name} = {value:.3f}")
    return "\n".join(lines)
