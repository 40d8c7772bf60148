"""Measurement worker. Runs in its own process because protection can only
start once per process; prints one JSON object with raw durations (ns)."""
from __future__ import annotations

import argparse
import ctypes
import json
import os
import sys
import time

from .. import linux
from ..bootstrap import ProtectionConfig, invoke_migrated, protect_fini, protect_init, register_fragment
from ..domain import FaultKind
from ..fragments import SiteSpec

METHOD_SPECS = {
    "trap": SiteSpec(FaultKind.TRAP_REFERENCE),
    "segv-rw": SiteSpec(FaultKind.SEGV_LOAD_STORE),
    "segv-x": SiteSpec(FaultKind.SEGV_EXEC),
}


def _identity(ctx, value):
    return value


def _remote_timings(ctx, addr, count, op):
    out = []
    mem = ctx.remote
    clock = time.perf_counter_ns
    if op == "read":
        for _ in range(count):
            t0 = clock()
            mem.read(addr, 8)
            out.append(clock() - t0)
    else:
        word = b"\x5a" * 8
        for _ in range(count):
            t0 = clock()
            mem.write(addr, word)
            out.append(clock() - t0)
    return out


def measure_init(samples: int, warmup: int) -> list[int]:
    """Time protect_init in fresh forks; the namespace probe is left out."""
    linux.prctl(linux.PR_SET_CHILD_SUBREAPER, 1)
    out = []
    for i in range(samples + warmup):
        rfd, wfd = os.pipe()
        pid = os.fork()
        if pid == 0:
            os.close(rfd)
            register_fragment(_identity, 1)
            t0 = time.perf_counter_ns()
            protect_init(ProtectionConfig(probe=False))
            elapsed = time.perf_counter_ns() - t0
            os.write(wfd, str(elapsed).encode())
            protect_fini(0)
        os.close(wfd)
        with os.fdopen(rfd) as fh:
            raw = fh.read()
        os.waitpid(pid, 0)
        _reap()
        if not raw:
            raise RuntimeError("init sample produced no timing")
        if i >= warmup:
            out.append(int(raw))
    return out


def _reap() -> None:
    while True:
        try:
            pid, _ = os.waitpid(-1, os.WNOHANG | linux.WALL)
        except ChildProcessError:
            return
        if pid == 0:
            return


def measure_runtime(samples: int, warmup: int, method: str) -> dict[str, list[int]]:
    switch_frags = {m: register_fragment(_identity, [spec], name=f"switch-{m}") for m, spec in METHOD_SPECS.items()}
    remote = register_fragment(_remote_timings, [METHOD_SPECS[method]], name="remote")
    protect_init(ProtectionConfig(probe=False))
    buf = ctypes.create_string_buffer(64)
    addr = ctypes.addressof(buf)
    result = {}
    clock = time.perf_counter_ns
    for _ in range(warmup):
        for frag in switch_frags.values():
            invoke_migrated(frag, 0)
    # Round-robin over the methods so drift hits them all alike.
    rounds = {m: [] for m in switch_frags}
    for i in range(samples):
        for m, frag in switch_frags.items():
            t0 = clock()
            invoke_migrated(frag, i)
            rounds[m].append(clock() - t0)
    for m, rs in rounds.items():
        result[m] = [r // 2 for r in rs]  # a round trip is two switches
    for op in ("read", "write"):
        timings = invoke_migrated(remote, addr, samples + warmup, op)
        result[op] = timings[warmup:]
    return result


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="selfdbg-bench-worker")
    p.add_argument("what", choices=("init", "runtime"))
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--method", choices=tuple(METHOD_SPECS), default="segv-rw")
    args = p.parse_args(argv)
    if args.what == "init":
        out = {"init": measure_init(args.samples, args.warmup)}
        print(json.dumps(out), flush=True)
        return 0
    out = measure_runtime(args.samples, args.warmup, args.method)
    print(json.dumps(out), flush=True)
    sys.stdout.flush()
    protect_fini(0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
