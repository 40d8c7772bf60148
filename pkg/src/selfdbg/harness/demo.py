"""Demo protectee: a checksum/compression-style pipeline of twelve stages.

Each stage reads (and some rewrite) a buffer that lives in the application,
always through the ``ctx.remote`` memory interface, so the same code runs
locally or migrated into the self-debugger. The first N stages are migrated.
"""
from __future__ import annotations

import argparse
import ctypes
import json
import os
import random
import resource
import signal
import sys
import time
import zlib

from .. import bootstrap, linux
from ..bootstrap import ProtectionConfig, invoke_migrated, protect_fini, protect_init, register_fragment
from ..debugger import FragmentContext, LocalMemory
from ..domain import FaultKind, SiteFlavor
from ..fragments import SiteSpec

MASK32 = 0xFFFFFFFF
MAX_INPUT = 512


# -- stages --------------------------------------------------------------------
# Signature: (ctx, addr, length, acc) -> acc. All stay within 32 bits.

def stage_sum(ctx, addr, n, acc):
    return (acc + sum(ctx.remote.read(addr, n))) & MASK32


def stage_adler(ctx, addr, n, acc):
    return zlib.adler32(ctx.remote.read(addr, n), acc | 1) & MASK32


def stage_crc(ctx, addr, n, acc):
    return zlib.crc32(ctx.remote.read(addr, n), acc) & MASK32


def stage_xor_fold(ctx, addr, n, acc):
    data = ctx.remote.read(addr, n) + b"\0" * (-n % 4)
    for i in range(0, len(data), 4):
        acc ^= int.from_bytes(data[i:i + 4], "little")
    return acc & MASK32


def stage_runs(ctx, addr, n, acc):
    data = ctx.remote.read(addr, n)
    runs = 1 + sum(1 for a, b in zip(data, data[1:]) if a != b)
    return (acc * 31 + runs) & MASK32


def stage_delta(ctx, addr, n, acc):
    data = ctx.remote.read(addr, n)
    out = bytes([data[0]]) + bytes((b - a) & 0xFF for a, b in zip(data, data[1:]))
    ctx.remote.write(addr, out)
    return (acc ^ out[-1] << 8) & MASK32


def stage_rotate(ctx, addr, n, acc):
    data = ctx.remote.read(addr, n)
    ctx.remote.write(addr, bytes(((b << 3) | (b >> 5)) & 0xFF for b in data))
    return (acc + n) & MASK32


def stage_fnv(ctx, addr, n, acc):
    h = 0x811C9DC5 ^ acc
    for b in ctx.remote.read(addr, n):
        h = ((h ^ b) * 0x01000193) & MASK32
    return h


def stage_peak(ctx, addr, n, acc):
    counts = [0] * 256
    for b in ctx.remote.read(addr, n):
        counts[b] += 1
    peak = max(range(256), key=lambda i: (counts[i], -i))
    return (acc ^ (peak << 16 | counts[peak])) & MASK32


def stage_reverse(ctx, addr, n, acc):
    ctx.remote.write(addr, ctx.remote.read(addr, n)[::-1])
    return ((acc << 1) | (acc >> 31)) & MASK32


def stage_popcount(ctx, addr, n, acc):
    return (acc + sum(bin(b).count("1") for b in ctx.remote.read(addr, n))) & MASK32


def stage_repeats(ctx, addr, n, acc):
    # How much a 3-byte window dictionary would save.
    data = ctx.remote.read(addr, n)
    seen, hits = set(), 0
    for i in range(len(data) - 2):
        gram = data[i:i + 3]
        hits += gram in seen
        seen.add(gram)
    return (acc * 17 + hits) & MASK32


STAGES = (stage_sum, stage_adler, stage_crc, stage_xor_fold, stage_runs, stage_delta,
          stage_rotate, stage_fnv, stage_peak, stage_reverse, stage_popcount, stage_repeats)

SITE_CHOICES = ("segv-rw", "segv-x", "trap", "reused", "mixed")

# "trap" is the conspicuous breakpoint-style reference; every other choice
# produces stealthy fault sites only.
_MIXED = (
    SiteSpec(FaultKind.SEGV_LOAD_STORE, access="load"),
    SiteSpec(FaultKind.SEGV_EXEC, access="jump"),
    SiteSpec(FaultKind.SEGV_LOAD_STORE, SiteFlavor.REUSED_CODE),
    SiteSpec(FaultKind.SEGV_LOAD_STORE, access="store"),
    SiteSpec(FaultKind.SEGV_EXEC, SiteFlavor.REUSED_CODE),
    SiteSpec(FaultKind.SEGV_EXEC, access="call"),
)


def site_specs(choice: str, index: int) -> list[SiteSpec]:
    """Two invocation sites for fragment ``index``."""
    if choice == "segv-rw":
        return [SiteSpec(FaultKind.SEGV_LOAD_STORE, access="load"), SiteSpec(FaultKind.SEGV_LOAD_STORE, access="store")]
    if choice == "segv-x":
        return [SiteSpec(FaultKind.SEGV_EXEC, access="jump"), SiteSpec(FaultKind.SEGV_EXEC, access="call")]
    if choice == "trap":
        return [SiteSpec(FaultKind.TRAP_REFERENCE), SiteSpec(FaultKind.TRAP_REFERENCE)]
    if choice == "reused":
        return [SiteSpec(FaultKind.SEGV_LOAD_STORE, SiteFlavor.REUSED_CODE),
                SiteSpec(FaultKind.SEGV_EXEC, SiteFlavor.REUSED_CODE)]
    if choice == "mixed":
        return [_MIXED[(2 * index) % len(_MIXED)], _MIXED[(2 * index + 1) % len(_MIXED)]]
    raise ValueError(f"unknown site choice {choice!r}")


def random_inputs(seed: int, count: int) -> list[bytes]:
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        n = rng.randint(1, MAX_INPUT)
        alphabet = rng.randint(2, 256)  # small alphabets give runs and repeats
        out.append(bytes(rng.randrange(alphabet) for _ in range(n)))
    return out


class Pipeline:
    def __init__(self, fragments: int, sites: str = "segv-rw"):
        if not 0 <= fragments <= len(STAGES):
            raise ValueError(f"fragments must be between 0 and {len(STAGES)}")
        self.migrated = [register_fragment(fn, site_specs(sites, i), name=fn.__name__)
                         for i, fn in enumerate(STAGES[:fragments])]
        self.buf = ctypes.create_string_buffer(MAX_INPUT)
        self._local = FragmentContext(LocalMemory(), None, os.getpid())

    def run_stage(self, i: int, n: int, acc: int) -> int:
        addr = ctypes.addressof(self.buf)
        if i < len(self.migrated):
            return invoke_migrated(self.migrated[i], addr, n, acc)
        return STAGES[i](self._local, addr, n, acc)

    def process(self, data: bytes) -> tuple[int, int]:
        ctypes.memmove(self.buf, data, len(data))
        acc = len(data)
        for i in range(len(STAGES)):
            acc = self.run_stage(i, len(data), acc)
        return acc, zlib.crc32(self.buf.raw[:len(data)])


# -- modes -----------------------------------------------------------------------

def _protect(args) -> None:
    if args.unprotected:
        return
    protect_init(ProtectionConfig(event_log=args.event_log, probe=not args.no_probe,
                                  probe_timeout=getattr(args, "probe_timeout", 2.0),
                                  handshake_timeout=getattr(args, "handshake_timeout", 5.0)))


def _finish(code: int = 0) -> None:
    sys.stdout.flush()
    protect_fini(code)


def run_workload(args) -> int:
    pipe = Pipeline(args.fragments, args.sites)
    _protect(args)
    for i, data in enumerate(random_inputs(args.seed, args.inputs)):
        acc, crc = pipe.process(data)
        print(f"{i:04d} {len(data):3d} {acc:08x} {crc:08x}")
    if args.crash:
        sys.stdout.flush()
        ctypes.string_at(0x10)  # a genuine bug: read from the null page
    _finish(0)
    return 0


def serve(args) -> int:
    """Keep the pair alive for attack scenarios until signaled or timed out."""
    pipe = Pipeline(max(args.fragments, 1), args.sites)
    cleanup_file = args.cleanup_file

    def on_term(signo, frame):
        if cleanup_file:
            with open(cleanup_file, "a") as fh:
                fh.write(f"cleanup {os.getpid()} {signal.Signals(signo).name}\n")
        # may interrupt a write to stdout, so no unguarded flush here
        protect_fini(0)

    for signo in (signal.SIGTERM, signal.SIGHUP):
        signal.signal(signo, on_term)
    _protect(args)
    state = bootstrap.current_state()
    dbg = state.counterpart_pid if state else 0
    print(f"ready {os.getpid()} {dbg}", flush=True)
    deadline = time.monotonic() + args.max_seconds
    data = random_inputs(args.seed, 1)[0]
    while time.monotonic() < deadline:
        pipe.process(data)
        time.sleep(0.02)
    _finish(0)
    return 0


def signal_probe(args) -> int:
    """Send SIGUSR1 to the application while it is the catcher and report when it lands."""
    seen = []

    def on_usr1(signo, frame):
        state = bootstrap.current_state()
        seen.append(state.role.value if state else "unprotected")

    def poke_catcher(ctx):
        os.kill(ctx.invoker_pid, signal.SIGUSR1)
        time.sleep(0.05)
        status = linux.proc_status(ctx.invoker_pid)
        pending = int(status["SigPnd"], 16) | int(status["ShdPnd"], 16)
        blocked = int(status["SigBlk"], 16)
        bit = 1 << (signal.SIGUSR1 - 1)
        return bool(pending & bit), bool(blocked & bit)

    signal.signal(signal.SIGUSR1, on_usr1)
    frag = register_fragment(poke_catcher, 1, name="poke_catcher")
    _protect(args)
    pending, blocked = invoke_migrated(frag)
    handled_at_return = len(seen)
    time.sleep(0.05)
    print(json.dumps({"pending_while_catching": pending, "blocked_while_catching": blocked,
                      "handled_before_return": handled_at_return, "handler_roles": seen}), flush=True)
    _finish(0)
    return 0


def emit_image(args) -> int:
    Pipeline(args.fragments, args.sites)
    registry = bootstrap.default_registry()
    registry.freeze()
    registry.emit_image(args.emit_image)
    print(args.emit_image)
    return 0


def build_parser(parser: argparse.ArgumentParser | None = None) -> argparse.ArgumentParser:
    p = parser or argparse.ArgumentParser(prog="selfdbg-demo", description=__doc__.splitlines()[0])
    p.add_argument("--fragments", type=int, default=3, help="number of leading stages to migrate (0-12)")
    p.add_argument("--unprotected", action="store_true", help="run without the self-debugger")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--inputs", type=int, default=100, help="number of random inputs")
    p.add_argument("--sites", choices=SITE_CHOICES, default="segv-rw", help="invocation site kind")
    p.add_argument("--event-log", help="append runtime events (JSON lines) here")
    p.add_argument("--no-probe", action="store_true", help="skip probing the fault namespace at init")
    p.add_argument("--crash", action="store_true", help="fault on the null page after the workload")
    p.add_argument("--serve", action="store_true", help="stay up for attack scenarios")
    p.add_argument("--max-seconds", type=float, default=30.0, help="serve mode lifetime")
    p.add_argument("--cleanup-file", help="serve mode: the SIGTERM handler appends a line here")
    p.add_argument("--signal-probe", action="store_true", help="report when SIGUSR1 sent to the catcher lands")
    p.add_argument("--emit-image", metavar="PATH", help="write the code image as ELF plus a sites sidecar, then exit")
    return p


def run(args) -> int:
    if args.crash:
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
    if args.emit_image:
        return emit_image(args)
    if args.serve:
        return serve(args)
    if args.signal_probe:
        return signal_probe(args)
    return run_workload(args)


def main(argv: list[str] | None = None) -> int:
    return run(build_parser().parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
