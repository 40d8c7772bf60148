import signal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfdbg import sim
from selfdbg.domain import ProcessRole
from selfdbg.sim import (APP, DBG, FULL_POLICY, Injection, RunState, Scenario, SimPolicy, explore, initial_system,
                         scenario_from_mapping, sim_debugger_step, sim_deliver, terminal_checks)

TERM, USR1, KILL, STOP = (int(s) for s in (signal.SIGTERM, signal.SIGUSR1, signal.SIGKILL, signal.SIGSTOP))


def test_kill_takes_the_counterpart_down():
    s = sim_deliver(initial_system(), DBG, KILL)
    assert s.both_exited
    assert s.proc(APP).exit_code == 128 + KILL


def test_blocked_signal_stays_pending_in_the_catcher():
    s = sim_deliver(initial_system(), DBG, TERM)
    dbg = s.proc(DBG)
    assert dbg.run_state is RunState.RUNNING and TERM in dbg.pending


def test_unblocked_signal_stops_the_thrower():
    s = sim_deliver(initial_system(), APP, USR1)
    assert s.proc(APP).run_state is RunState.DEBUG_STOPPED
    assert s.proc(APP).stop == ("signal", USR1)


def test_stop_cannot_be_blocked():
    s = sim_deliver(initial_system(), DBG, STOP)
    assert s.proc(DBG).run_state is RunState.DEBUG_STOPPED


def test_delivery_to_an_exited_process_is_an_error():
    s = sim_deliver(initial_system(), APP, KILL)
    with pytest.raises(ValueError):
        sim_deliver(s, APP, TERM)


def test_debugger_step_swaps_roles_on_a_switch():
    s = initial_system()
    label, s = next(sim.internal_steps(s))
    assert label == "app raises invoke switch"
    s = sim_debugger_step(s, DBG)
    app, dbg = s.proc(APP), s.proc(DBG)
    assert (app.role, app.activity, app.run_state) == (ProcessRole.CATCHER, "loop", RunState.RUNNING)
    assert (dbg.role, dbg.activity) == (ProcessRole.THROWER, "fragment")
    assert app.blocked == sim.FULL_BLOCK and not dbg.blocked


def test_debugger_step_needs_a_stopped_counterpart():
    with pytest.raises(ValueError):
        sim_debugger_step(initial_system(), DBG)


def test_debugger_forwards_a_genuine_signal():
    s = sim_deliver(initial_system(), APP, USR1)
    s = sim_debugger_step(s, DBG)
    assert s.usr1_deliveries == (("app", "thrower"),)
    assert s.proc(APP).run_state is RunState.RUNNING


@pytest.mark.parametrize("name", list(sim.scenario_catalog()))
def test_catalog_verdicts(name):
    scenario = sim.scenario_catalog()[name]
    verdict = explore(scenario)
    assert verdict.value == scenario.expected
    assert terminal_checks(name, verdict) == []
    if verdict.deadlock:
        assert verdict.trace and verdict.final
        assert all(v["run_state"] == "debug_stopped" for k, v in verdict.final.items() if k in ("app", "dbg"))


def test_exploration_is_deterministic():
    for scenario in sim.scenario_catalog().values():
        a, b = explore(scenario), explore(scenario)
        assert (a.value, a.trace, a.states, a.final) == (b.value, b.trace, b.states, b.final)


def test_depth_bound():
    s = Scenario("deep", FULL_POLICY, budget=3)
    assert explore(s, depth=2).value == "DepthExceeded"
    with pytest.raises(sim.DepthExceeded):
        explore(s, depth=2, raise_on_depth=True)
    assert explore(s, depth=40).value == "DeadlockFree"


def test_relayed_termination_runs_cleanup_twice():
    s = Scenario("relay", SimPolicy(dbg_termination="relay"), (Injection("app", TERM), Injection("dbg", TERM)))
    verdict = explore(s)
    assert verdict.value == "DeadlockFree"
    assert max(t.cleanup_runs for t in verdict.terminals) == 2
    assert terminal_checks("SigtermBroadcast", verdict)


def test_scenario_from_mapping():
    sc = scenario_from_mapping("x", {"inject": ["app:SIGTERM", "catcher:fault"], "budget": 2,
                                     "dbg_termination": "relay", "expected": "Deadlock"})
    assert sc.injections == (Injection("app", TERM), Injection("catcher", "fault"))
    assert sc.policy.dbg_termination == "relay" and sc.budget == 2 and sc.expected == "Deadlock"


injections = st.lists(st.builds(Injection, st.sampled_from(["app", "dbg", "catcher", "thrower"]),
                                st.sampled_from([TERM, USR1, KILL])), max_size=3)


@settings(max_examples=40, deadline=None)
@given(injections, st.integers(1, 2))
def test_full_policy_never_deadlocks_on_catchable_signals(injs, budget):
    verdict = explore(Scenario("p", FULL_POLICY, tuple(injs), budget), depth=48)
    assert verdict.value == "DeadlockFree"
    assert all(t.both_exited for t in verdict.terminals)
