from __future__ import annotations

import pytest

from ctrlmine.pipeline import run_pipeline, synth_trace_set
from ctrlmine.signal_space import unpack_set
from ctrlmine.synthcpu import load_builtin

X86_PROFILES = ("osA", "osB", "osC", "baremetal")
X86_SEED = 7
X86_LENGTH = 2000

# acceptance outcomes, printed once more at the end of the session
CRITERIA: dict[int, tuple[str, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    CRITERIA[number] = (status, detail)
    print(f"CRITERION {number:>2} {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:>2} {status}: {detail}")


@pytest.fixture(scope="session")
def x86_isa():
    return load_builtin("default")


@pytest.fixture(scope="session")
def gating_isa():
    return load_builtin("gating")


@pytest.fixture(scope="session")
def x86_traces(x86_isa):
    """Extended (not yet unpacked) traces: three OS profiles plus bare metal."""
    return synth_trace_set(x86_isa, X86_PROFILES, X86_SEED, X86_LENGTH)


@pytest.fixture(scope="session")
def x86_unpacked(x86_traces):
    return unpack_set(x86_traces)


@pytest.fixture(scope="session")
def x86_result(x86_unpacked):
    return run_pipeline(x86_unpacked, unpacked=True)


@pytest.fixture(scope="session")
def gating_result(gating_isa):
    ts = synth_trace_set(gating_isa, ["lab"], 1, 20000)
    return run_pipeline(ts)
