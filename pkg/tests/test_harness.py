import json

import pytest

from helpers import run_cli
from selfdbg.harness.bench import Aspect, InsufficientSamples, summarize
from selfdbg.harness.cli import validate_report

pytestmark = pytest.mark.runtime


def test_all_attacks_twice_leave_nothing_behind(tmp_path):
    out = tmp_path / "attack.json"
    proc = run_cli("attack", "all", "--repeat", "2", "--json", str(out))
    assert proc.returncode == 0, proc.stdout + proc.stderr
    report = json.loads(out.read_text())
    validate_report("attack", report)
    outcomes = report["outcomes"]
    assert len(outcomes) == 10
    assert all(o["pass"] and not o["orphans"] for o in outcomes)
    first, second = outcomes[:5], outcomes[5:]
    assert [o["observed"] for o in first] == [o["observed"] for o in second]


def test_external_attach_is_refused_on_both_processes(tmp_path):
    out = tmp_path / "attack.json"
    proc = run_cli("attack", "external-attach", "--json", str(out))
    assert proc.returncode == 0, proc.stdout
    detail = json.loads(out.read_text())["outcomes"][0]["detail"]
    assert detail, "attack detail should record the per-process attach errors"


@pytest.mark.parametrize("method", ["segv-rw", "trap"])
def test_bench_report_is_valid_and_consistent(tmp_path, method):
    out = tmp_path / "bench.json"
    proc = run_cli("bench", "--method", method, "--samples", "150", "--json", str(out))
    assert proc.returncode == 0, proc.stderr
    report = json.loads(out.read_text())
    validate_report("bench", report)
    rows = {r["aspect"]: r for r in report["rows"]}
    assert set(rows) == {a.value for a in Aspect}
    for r in rows.values():
        assert 0 < r["p10"] <= r["median"] <= r["p90"]
    assert rows["Init"]["samples"] >= 30 and rows["SwitchTrap"]["samples"] >= 100
    ratios = report["ratios"]
    assert 0.5 <= ratios["segv_rw_over_segv_x"] <= 2.0
    assert 0.5 <= ratios["write_over_read"] <= 2.0
    # a switch is two stops and a context copy; a remote transfer is one syscall
    assert rows["SwitchSegvRW"]["median"] > rows["RemoteRead"]["median"]


def test_summarize_percentiles():
    data = list(range(1, 101))
    r = summarize(Aspect.REMOTE_READ, data)
    assert r.median == pytest.approx(50.5e-9)
    assert r.p10 == pytest.approx(10.9e-9) and r.p90 == pytest.approx(90.1e-9)
    with pytest.raises(InsufficientSamples):
        summarize(Aspect.REMOTE_READ, data[:99])
    with pytest.raises(InsufficientSamples):
        summarize(Aspect.INIT, data[:29])
