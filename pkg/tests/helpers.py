"""Subprocess helpers. Protection forks and ptraces, so it never starts inside pytest itself."""
from __future__ import annotations

import os
import subprocess
import sys
import textwrap


def _env(extra: dict | None) -> dict:
    env = dict(os.environ)
    env.pop("SELFDBG_DISABLE", None)
    env.update(extra or {})
    return env


def run_py(code: str, timeout: float = 60, env: dict | None = None) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-c", textwrap.dedent(code)], capture_output=True, text=True,
                          timeout=timeout, env=_env(env))


def run_demo(*args: str, timeout: float = 60, env: dict | None = None) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "selfdbg.harness.demo", *args], capture_output=True, text=True,
                          timeout=timeout, env=_env(env))


def run_cli(*args: str, timeout: float = 300, env: dict | None = None) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "selfdbg.harness.cli", *args], capture_output=True, text=True,
                          timeout=timeout, env=_env(env))


def last_json(proc: subprocess.CompletedProcess):
    import json
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith("{")]
    assert lines, f"no JSON in output: {proc.stdout!r} {proc.stderr!r}"
    return json.loads(lines[-1])
