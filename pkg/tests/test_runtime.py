"""End-to-end behavior of a protected process. Every case runs in a fresh interpreter."""
import time

import pytest

from helpers import last_json, run_demo, run_py
from selfdbg import linux

pytestmark = pytest.mark.runtime

PRELUDE = """
import ctypes, json, os, signal, sys, threading, time, zlib
from selfdbg import bootstrap, linux
from selfdbg.bootstrap import (ProtectionConfig, invoke_migrated, protect_fini, protect_init,
                               register_fragment)

def children():
    with open(f"/proc/{os.getpid()}/task/{os.getpid()}/children") as fh:
        return [int(x) for x in fh.read().split()]

def out(**kw):
    print(json.dumps(kw), flush=True)
"""


def script(body: str) -> str:
    import textwrap
    return PRELUDE + textwrap.dedent(body)


def ok(proc):
    assert proc.returncode == 0, f"exit {proc.returncode}\n{proc.stdout}\n{proc.stderr}"
    return last_json(proc)


# -- bootstrap ------------------------------------------------------------------------

def test_tracers_are_crossed():
    r = ok(run_py(script("""
        register_fragment(lambda ctx: 1, name="one")
        protect_init(ProtectionConfig())
        dbg = bootstrap.current_state().counterpart_pid
        out(app=os.getpid(), dbg=dbg, app_tracer=linux.tracer_pid(os.getpid()),
            dbg_tracer=linux.tracer_pid(dbg), children=children(), result=invoke_migrated("one"))
        protect_fini(0)
    """)))
    assert r["app_tracer"] == r["dbg"]
    assert r["dbg_tracer"] == r["app"]
    assert r["children"] == [r["dbg"]]
    assert r["result"] == 1


def test_already_debugged_process_refuses_to_start():
    proc = run_py(script("""
        r, w = os.pipe()
        pid = os.fork()
        if pid == 0:
            os.read(r, 1)
            try:
                protect_init(ProtectionConfig(probe=False))
            except bootstrap.AttachDenied as e:
                print("denied", children(), flush=True)
                os._exit(7)
            os._exit(0)
        linux.seize(pid, 0)
        os.write(w, b"x")
        while True:
            st = linux.wait_any(pid)
            if st.gone:
                break
            linux.cont(pid, 0 if st.event else st.stop_signal)
        print("child", linux.exit_code_for(st.raw), flush=True)
    """))
    assert "denied []" in proc.stdout, proc.stdout + proc.stderr
    assert "child 7" in proc.stdout


def test_second_init_is_refused_without_forking():
    r = ok(run_py(script("""
        protect_init(ProtectionConfig(probe=False))
        before = children()
        try:
            protect_init(ProtectionConfig(probe=False))
            err = None
        except bootstrap.AlreadyInitialized as e:
            err = type(e).__name__
        out(err=err, before=before, after=children())
        protect_fini(0)
    """)))
    assert r["err"] == "AlreadyInitialized"
    assert len(r["before"]) == 1 and r["after"] == r["before"]


def test_exit_code_propagates_and_the_self_debugger_follows():
    proc = run_py(script("""
        protect_init(ProtectionConfig(probe=False))
        print(bootstrap.current_state().counterpart_pid, flush=True)
        protect_fini(7)
    """))
    assert proc.returncode == 7, proc.stderr
    dbg = int(proc.stdout.split()[0])
    deadline = time.monotonic() + 1.0
    while linux.is_alive(dbg) and time.monotonic() < deadline:
        time.sleep(0.01)
    assert not linux.is_alive(dbg)


def test_disable_switch_runs_everything_in_process():
    r = ok(run_py(script("""
        register_fragment(lambda ctx, x: x * 2, name="dbl")
        role = protect_init(ProtectionConfig())
        out(role=role.value, state=bootstrap.current_state() is not None, children=children(),
            tracer=linux.tracer_pid(os.getpid()), result=invoke_migrated("dbl", 21))
    """), env={"SELFDBG_DISABLE": "1"}))
    assert r == {"role": "thrower", "state": False, "children": [], "tracer": 0, "result": 42}


# -- remote memory ----------------------------------------------------------------------

def test_remote_read_write_and_fault():
    r = ok(run_py(script("""
        from selfdbg.debugger import RemoteFault
        buf = ctypes.create_string_buffer(b"\\xa5" * 64, 64)
        out_buf = ctypes.create_string_buffer(256)

        def read(ctx, addr, n):
            return ctx.remote.read(addr, n)

        def write(ctx, addr):
            ctx.remote.write(addr, bytes(range(256)))
            return zlib.crc32(ctx.remote.read(addr, 256))

        def bad(ctx):
            try:
                ctx.remote.read(0x10, 8)
            except RemoteFault as e:
                return "RemoteFault", hex(e.addr)
            return "no fault", None

        for f in (read, write, bad):
            register_fragment(f, name=f.__name__)
        protect_init(ProtectionConfig(probe=False))
        data = invoke_migrated("read", ctypes.addressof(buf), 64)
        crc = invoke_migrated("write", ctypes.addressof(out_buf))
        out(data=data.hex(), crc=crc, local_crc=zlib.crc32(out_buf.raw), bad=invoke_migrated("bad"))
        protect_fini(0)
    """)))
    assert r["data"] == "a5" * 64
    assert r["crc"] == r["local_crc"] == __import__("zlib").crc32(bytes(range(256)))
    assert r["bad"] == ["RemoteFault", "0x10"]


def test_word_fallback_reads_through_a_stopped_counterpart():
    r = ok(run_py(script("""
        from selfdbg.debugger import RemoteMemory
        buf = ctypes.create_string_buffer(bytes(range(40)), 40)
        def read(ctx, addr):
            mem = RemoteMemory(ctx.invoker_pid, word_mode=True)
            mem.write(addr + 3, b"xyz")
            return mem.read(addr + 1, 13)
        register_fragment(read, name="read")
        protect_init(ProtectionConfig(probe=False))
        got = invoke_migrated("read", ctypes.addressof(buf))
        out(got=got.hex(), local=buf.raw[:16].hex())
        protect_fini(0)
    """)))
    expected = bytearray(range(40))
    expected[3:6] = b"xyz"
    assert r["got"] == bytes(expected[1:14]).hex()
    assert r["local"] == bytes(expected[:16]).hex()


# -- switch mechanics ---------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["segv-rw", "segv-x", "trap", "reused"])
def test_archived_registers_describe_the_invocation(kind):
    r = ok(run_py(script(f"""
        from dataclasses import asdict
        from selfdbg.harness.demo import site_specs
        def identity(ctx):
            return asdict(ctx.archived_regs)
        desc = register_fragment(identity, site_specs({kind!r}, 0)[:1], name="identity")
        protect_init(ProtectionConfig(probe=False))
        state = bootstrap.current_state()
        rows = []
        for _ in range(3):
            archived = invoke_migrated("identity")
            result = asdict(state.ctx.result_regs())
            rows.append(dict(rsi=archived["rsi"], seq=state.seq, rip=archived["rip"],
                             diff=sorted(k for k in result if result[k] != archived[k]),
                             cont=result["rip"]))
        site = desc.pairs[0].invoke
        out(rows=rows, pc=site.pc, cont=site.continuation)
        protect_fini(0)
    """)))
    for row in r["rows"]:
        assert row["rsi"] == row["seq"]  # the per-switch nonce the stub was called with
        # a breakpoint stop reports the address just past the trap opcode
        assert row["rip"] == r["pc"] + (1 if kind == "trap" else 0)
        # only the resume point differs, and for a trap site it already is the continuation
        assert row["diff"] == ([] if kind == "trap" else ["rip"])
        assert row["cont"] == r["cont"]
    assert [row["seq"] for row in r["rows"]] == sorted({row["seq"] for row in r["rows"]})


def test_nested_invocation_is_rejected():
    r = ok(run_py(script("""
        register_fragment(lambda ctx: 1, name="inner")
        register_fragment(lambda ctx: invoke_migrated("inner"), name="outer")
        protect_init(ProtectionConfig(probe=False))
        try:
            invoke_migrated("outer")
            err = None
        except bootstrap.NestedInvocation as e:
            err = type(e).__name__
        out(err=err, after=invoke_migrated("inner"))
        protect_fini(0)
    """)))
    assert r == {"err": "NestedInvocation", "after": 1}


def test_fragment_exceptions_reach_the_caller():
    r = ok(run_py(script("""
        def boom(ctx, n):
            raise ValueError(f"bad {n}")
        register_fragment(boom, name="boom")
        protect_init(ProtectionConfig(probe=False))
        try:
            invoke_migrated("boom", 3)
        except ValueError as e:
            out(err=str(e))
        protect_fini(0)
    """)))
    assert r["err"] == "bad 3"


def test_only_the_initializing_thread_may_switch():
    r = ok(run_py(script("""
        register_fragment(lambda ctx: 1, name="one")
        protect_init(ProtectionConfig(probe=False))
        seen = []
        def other():
            try:
                invoke_migrated("one")
            except bootstrap.WrongThread as e:
                seen.append(type(e).__name__)
        t = threading.Thread(target=other); t.start(); t.join()
        out(seen=seen, main=invoke_migrated("one"))
        protect_fini(0)
    """)))
    assert r == {"seen": ["WrongThread"], "main": 1}


def test_signal_sent_to_the_catcher_waits_for_the_throw():
    r = ok(run_demo("--signal-probe", "--no-probe"))
    assert r["pending_while_catching"] is True
    assert r["blocked_while_catching"] is True
    assert r["handled_before_return"] == 1
    assert r["handler_roles"] == ["thrower"]


def test_signal_masks_follow_the_role():
    r = ok(run_py(script("""
        signal.pthread_sigmask(signal.SIG_BLOCK, {signal.SIGUSR2})
        def masks(ctx):
            inv = int(linux.proc_status(ctx.invoker_pid)["SigBlk"], 16)
            own = int(linux.proc_status(os.getpid())["SigBlk"], 16)
            return inv, own
        register_fragment(masks, name="masks")
        protect_init(ProtectionConfig(probe=False))
        before = int(linux.proc_status(os.getpid())["SigBlk"], 16)
        dbg = bootstrap.current_state().counterpart_pid
        dbg_idle = int(linux.proc_status(dbg)["SigBlk"], 16)
        inv, own = invoke_migrated("masks")
        after = int(linux.proc_status(os.getpid())["SigBlk"], 16)
        out(before=before, inv=inv, own=own, after=after, dbg_idle=dbg_idle)
        protect_fini(0)
    """)))
    usr2 = 1 << (12 - 1)
    assert r["before"] == r["after"] == usr2
    assert r["inv"] == r["dbg_idle"] == linux.FULL_BLOCK_MASK
    # the self-debugger throws with the application's own mask
    assert r["own"] == usr2


def _role_counts(records):
    counts = {}
    for rec in records:
        if rec["event"] == "role":
            key = (rec["pid"], rec["detail"]["role"])
            counts[key] = counts.get(key, 0) + 1
    return counts


def test_every_switch_is_a_complete_round_trip(tmp_path):
    from selfdbg.debugger import read_event_log
    log = tmp_path / "events.jsonl"
    proc = run_demo("--fragments", "3", "--inputs", "10", "--sites", "mixed", "--event-log", str(log), "--no-probe")
    assert proc.returncode == 0, proc.stderr
    records = read_event_log(str(log))
    init = {rec["detail"]["role"]: rec["pid"] for rec in records if rec["event"] == "init"}
    app, dbg = init["thrower"], init["catcher"]
    calls = 3 * 10
    transitions = {}
    for rec in records:
        if rec["event"] == "transition":
            transitions[rec["pid"]] = transitions.get(rec["pid"], 0) + 1
    # each side turns the other into the catcher once per call, before the other runs again
    assert transitions == {app: calls, dbg: calls}
    roles = _role_counts(records)
    assert roles[(app, "catcher")] == roles[(app, "thrower")] == roles[(dbg, "thrower")] == calls
    # the self-debugger logs its last flip back to catcher after the application was
    # released, so exit-kill may take it down first
    assert roles.get((dbg, "catcher"), 0) in (calls - 1, calls)
    stops = [rec["detail"]["classification"] for rec in records if rec["event"] == "stop"]
    assert stops.count("SwitchRequest") == 2 * calls
    assert "GenuineFault" not in stops
    assert not [rec for rec in records if rec["event"] == "fail_closed"]


# -- threads ------------------------------------------------------------------------------

@pytest.mark.parametrize("threads", [1, 4])
def test_all_threads_are_attached(threads):
    r = ok(run_py(script(f"""
        stop = threading.Event()
        workers = [threading.Thread(target=stop.wait) for _ in range({threads} - 1)]
        for t in workers: t.start()
        register_fragment(lambda ctx, x: x + 1, name="inc")
        protect_init(ProtectionConfig(probe=False, attach_threads=True))
        dbg = bootstrap.current_state().counterpart_pid
        tracers = [linux.tracer_pid(t) for t in linux.thread_ids(os.getpid())]
        results = [invoke_migrated("inc", i) for i in range(20)]
        out(dbg=dbg, tracers=tracers, results=results)
        protect_fini(0)
    """)))
    assert r["tracers"] == [r["dbg"]] * threads
    assert r["results"] == list(range(1, 21))


def test_thread_churn_during_attach():
    r = ok(run_py(script("""
        stop = threading.Event()
        def churn():
            while not stop.is_set():
                t = threading.Thread(target=lambda: None); t.start(); t.join()
        spinners = [threading.Thread(target=churn) for _ in range(3)]
        for t in spinners: t.start()
        register_fragment(lambda ctx, x: x * 3, name="triple")
        protect_init(ProtectionConfig(probe=False, attach_threads=True))
        results = [invoke_migrated("triple", i) for i in range(50)]
        stop.set()
        for t in spinners: t.join()
        out(results=results)
        protect_fini(0)
    """), timeout=60))
    assert r["results"] == [3 * i for i in range(50)]


# -- transparency --------------------------------------------------------------------------

@pytest.mark.parametrize("args", [("--fragments", "0"), ("--fragments", "5", "--sites", "trap"),
                                  ("--fragments", "12", "--sites", "reused")])
def test_demo_output_is_unchanged_by_protection(args):
    base = run_demo(*args, "--inputs", "30", "--unprotected")
    prot = run_demo(*args, "--inputs", "30")
    off = run_demo(*args, "--inputs", "30", env={"SELFDBG_DISABLE": "1"})
    assert base.returncode == prot.returncode == off.returncode == 0, prot.stderr
    assert base.stdout == prot.stdout == off.stdout


def test_randomized_calls_match_local_execution():
    r = ok(run_py(script("""
        import random
        def mix(ctx, a, b, s):
            return ((a * 2654435761) ^ b) & 0xFFFFFFFF, s[::-1], {"n": len(s)}
        desc = register_fragment(mix, 4, name="mix")
        rng = random.Random(1234)
        calls = [(rng.getrandbits(40), rng.getrandbits(16), bytes(rng.getrandbits(8) for _ in range(rng.randrange(64))))
                 for _ in range(200)]
        local = [list(map(repr, mix(None, *c))) for c in calls]
        protect_init(ProtectionConfig(probe=False))
        remote = [list(map(repr, invoke_migrated(desc, *c))) for c in calls]
        out(same=local == remote, n=len(remote))
        protect_fini(0)
    """)))
    assert r == {"same": True, "n": 200}


def test_genuine_crash_ends_with_the_same_signal():
    base = run_demo("--crash", "--inputs", "3", "--unprotected")
    prot = run_demo("--crash", "--inputs", "3", "--no-probe")
    assert base.returncode == prot.returncode == -11
    assert base.stdout == prot.stdout


def test_no_stray_processes_after_a_run():
    proc = run_py(script("""
        protect_init(ProtectionConfig(probe=False))
        print(bootstrap.current_state().counterpart_pid, flush=True)
        protect_fini(0)
    """))
    dbg = int(proc.stdout.split()[0])
    time.sleep(0.2)
    assert not linux.is_alive(dbg)
