"""Shared circuit fixtures for the test suite."""

from pathlib import Path

import pytest

from pssuq import parse_netlist
from pssuq.shooting import PhaseCondition, estimate_period, solve_autonomous

CIRCUITS_DIR = Path(__file__).resolve().parents[1] / "src" / "pssuq" / "circuits"

RC_FORCED = """
.param r = uniform(800, 1200)
V1 in 0 SIN(0 1 1k)
R1 in out {r}
C1 out 0 1u
"""

RECTIFIER = """
.param rload = uniform(900, 1100)
.param cload = gauss(1u, 0.05u)
V1 in 0 SIN(0 1 1k)
RS in drive 100
D1 drive out IS=1e-12
R1 out 0 {rload}
C1 out 0 {cload}
"""

VDP_FIXED = """
C1 1 0 1
L1 1 0 1
NVDP 1 0 MU=0.1
"""

VDP_RANDOM = """
.param mu = uniform(0.07, 0.13)
C1 1 0 1
L1 1 0 1
NVDP 1 0 MU={mu}
"""

COLPITTS = (CIRCUITS_DIR / "colpitts.cir").read_text()


@pytest.fixture(scope="session")
def rc_circuit():
    return parse_netlist(RC_FORCED)


@pytest.fixture(scope="session")
def rectifier():
    return parse_netlist(RECTIFIER)


@pytest.fixture(scope="session")
def vdp_circuit():
    return parse_netlist(VDP_FIXED)


@pytest.fixture(scope="session")
def vdp_random():
    return parse_netlist(VDP_RANDOM)


@pytest.fixture(scope="session")
def colpitts():
    return parse_netlist(COLPITTS)


@pytest.fixture(scope="session")
def vdp_nominal(vdp_circuit):
    """Estimated and refined nominal limit cycle of the relaxation oscillator."""
    inst = vdp_circuit.realize_nominal()
    est = estimate_period(inst, 0)
    phase = PhaseCondition(0, est.level)
    sol = solve_autonomous(inst, phase, est.period, est.y0, n_steps=400)
    return est, phase, sol


@pytest.fixture(scope="session")
def colpitts_nominal(colpitts):
    inst = colpitts.realize_nominal()
    idx = colpitts.node_state("coll")
    est = estimate_period(inst, idx, n_periods=60)
    phase = PhaseCondition(idx, est.level)
    sol = solve_autonomous(inst, phase, est.period, est.y0, n_steps=300)
    return est, phase, sol


# acceptance-criterion results, emitted after the run regardless of capture
criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if criterion_lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in criterion_lines:
            terminalreporter.write_line(line)
