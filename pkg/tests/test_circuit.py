"""Device evaluation: stamps, Jacobians, parameter maps, conservation."""

import numpy as np
import pytest

from pssuq import parse_netlist
from pssuq.circuit import DistributionSpec, dc_operating_point, thermal_voltage

# one of everything, with both distribution kinds in play
ALL_DEVICES = """
.param rr = uniform(900, 1100)
.param cc = gauss(1u, 0.05u)
.param vt = gauss(0.4238, 0.01)
.param isat = const(1e-13)
V1 1 0 SIN(0.2 1 1k 30)
R1 1 2 {rr}
C1 2 0 {cc}
L1 2 3 10m
I1 0 3 DC 1m
D1 3 4 IS={isat} N=1.5 CJ=2p
R2 4 0 2k
M1 5 2 0 KP=2m VT0={vt} LAMBDA=0.05 CGS=1p CGD=2p
R3 5 1 1k
M2 0 6 5 KP=1m VT0=0.5 PMOS
R5 6 2 5k
Q1 7 6 0 ALPHA=0.98 IS=1e-13
R4 7 1 3k
NVDP 4 0 MU=0.2
"""


@pytest.fixture(scope="module")
def devices():
    return parse_netlist(ALL_DEVICES)


def test_realize_affine_maps():
    gauss = DistributionSpec.gaussian(0.4238, 0.01)
    assert gauss.to_physical(0.0) == pytest.approx(0.4238)
    uni = DistributionSpec.uniform(900, 1100)
    assert uni.to_physical(1.0) == pytest.approx(1100.0)
    nh = DistributionSpec.uniform(0.8e-9, 2.0e-9)
    assert nh.to_physical(-1.0) == pytest.approx(0.8e-9)
    assert nh.to_physical(0.0) == pytest.approx(1.4e-9)


def test_realize_dimension_mismatch(devices):
    with pytest.raises(Exception, match="coordinates"):
        devices.realize([0.0])  # circuit has three random parameters


def test_zero_state_current_source():
    c = parse_netlist("R1 1 0 1\nC1 1 0 1\nI1 0 1 DC 1\n")
    ev = c.realize_nominal().eval_dae(np.zeros(1), 0.0)
    assert np.allclose(ev.q, 0) and np.allclose(ev.f, 0)
    assert ev.bu[0] == pytest.approx(1.0)


def test_diode_small_signal_conductance():
    c = parse_netlist("D1 1 0 IS=1e-14\nI1 0 1 DC 0\n")
    ev = c.realize_nominal().eval_dae(np.zeros(1), 0.0)
    g = 1e-14 / thermal_voltage()
    assert ev.f[0] == pytest.approx(0.0, abs=1e-30)
    assert ev.df_dx[0, 0] == pytest.approx(g, rel=1e-12)
    assert g == pytest.approx(3.868e-13, rel=1e-3)


def test_junction_limiting_is_tangent_and_finite():
    c = parse_netlist("D1 1 0 IS=1e-14\nI1 0 1 DC 0\n")
    inst = c.realize_nominal()
    vt = thermal_voltage()
    vc = vt * np.log(1e10)
    below = inst.eval_dae(np.array([vc - 1e-9]), 0.0)
    above = inst.eval_dae(np.array([vc + 1e-9]), 0.0)
    # C1 continuation: value and slope agree across the cutoff
    assert above.f[0] - below.f[0] == pytest.approx(2e-9 * below.df_dx[0, 0], rel=1e-4)
    huge = inst.eval_dae(np.array([100.0]), 0.0)
    assert np.isfinite(huge.f).all() and np.isfinite(huge.df_dx).all()


def _rel_err(a, b):
    scale = np.max(np.abs(a)) + np.max(np.abs(b)) + 1e-30
    return np.max(np.abs(a - b)) / scale


def test_jacobians_match_finite_differences(devices):
    rng = np.random.default_rng(42)
    n = devices.n
    worst = 0.0
    for _ in range(100):
        xi = rng.normal(size=devices.dim) * 0.5
        inst = devices.realize(xi)
        x = rng.normal(size=n) * 0.3
        t = rng.uniform(0, 1e-3)
        ev = inst.eval_dae(x, t)
        fd_q = np.empty((n, n))
        fd_f = np.empty((n, n))
        for i in range(n):
            h = 1e-7 * (1.0 + abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            evp, evm = inst.eval_dae(xp, t), inst.eval_dae(xm, t)
            fd_q[:, i] = (evp.q - evm.q) / (2 * h)
            fd_f[:, i] = (evp.f - evm.f) / (2 * h)
        worst = max(worst, _rel_err(ev.dq_dx, fd_q), _rel_err(ev.df_dx, fd_f))
    assert worst < 1e-6


def test_param_derivatives_match_finite_differences(devices):
    rng = np.random.default_rng(7)
    slopes = np.array(
        [s.b if s.kind == "gaussian" else 0.5 * (s.b - s.a) for _, s in devices.random_params]
    )
    worst = 0.0
    for _ in range(20):
        xi = rng.normal(size=devices.dim) * 0.5
        x = rng.normal(size=devices.n) * 0.3
        t = rng.uniform(0, 1e-3)
        pd = devices.realize(xi).eval_param_derivatives(x, t)
        for j in range(devices.dim):
            h = 1e-6
            xp, xm = xi.copy(), xi.copy()
            xp[j] += h
            xm[j] -= h
            evp = devices.realize(xp).eval_dae(x, t)
            evm = devices.realize(xm).eval_dae(x, t)
            for fd_pair, an in (
                ((evp.f, evm.f), pd.df_dtheta[:, j]),
                ((evp.q, evm.q), pd.dq_dtheta[:, j]),
                ((evp.bu, evm.bu), pd.dbu_dtheta[:, j]),
            ):
                fd = (fd_pair[0] - fd_pair[1]) / (2 * h * slopes[j])
                worst = max(worst, _rel_err(an, fd))
    assert worst < 1e-6


def test_simple_param_derivatives():
    c = parse_netlist(".param r = uniform(500, 1500)\nR1 1 0 {r}\nI1 0 1 DC 1\n")
    pd = c.realize([0.0]).eval_param_derivatives(np.array([2.0]), 0.0)
    assert pd.df_dtheta[0, 0] == pytest.approx(-2.0 / 1000.0**2)
    c2 = parse_netlist(".param c = gauss(1u, 0.1u)\nC1 1 0 {c}\nI1 0 1 DC 1\n")
    pd2 = c2.realize([0.0]).eval_param_derivatives(np.array([3.0]), 0.0)
    assert pd2.dq_dtheta[0, 0] == pytest.approx(3.0)


@pytest.mark.parametrize(
    "net, rows",
    [
        ("D1 1 2 IS=1e-14\nR1 1 0 1k\nR2 2 0 1k\n", ("1", "2")),
        ("NVDP 1 2 MU=0.3\nR1 1 0 1k\nR2 2 0 1k\n", ("1", "2")),
        ("M1 1 2 3 KP=2m VT0=0.4\nR1 1 0 1k\nR2 2 0 1k\nR3 3 0 1k\n", ("1", "2", "3")),
        ("Q1 1 2 3 ALPHA=0.99 IS=1e-14\nR1 1 0 1k\nR2 2 0 1k\nR3 3 0 1k\n", ("1", "2", "3")),
        ("C1 1 2 1u\nR1 1 0 1k\nR2 2 0 1k\n", ("1", "2")),
    ],
)
def test_charge_and_current_conservation(net, rows):
    """Each device's terminal contributions sum to zero (KCL stamping)."""
    c = parse_netlist(net)
    inst = c.realize_nominal()
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.normal(size=c.n) * 0.4
        ev = inst.eval_dae(x, 0.0)
        idx = [c.node_state(r) for r in rows]
        # subtract the grounded test resistors, which close KCL to ground
        resist = np.array([x[c.node_state(r)] / 1e3 for r in rows])
        assert np.sum(ev.f[idx] - resist) == pytest.approx(0.0, abs=1e-12)
        assert np.sum(ev.q[idx]) == pytest.approx(0.0, abs=1e-18)


def test_linear_elements_are_exactly_linear():
    c = parse_netlist("V1 1 0 DC 1\nR1 1 2 1k\nC1 2 0 1u\nL1 2 3 10m\nR2 3 0 50\n")
    inst = c.realize_nominal()
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=c.n)
        ev = inst.eval_dae(x, 0.0)
        assert np.allclose(ev.q, ev.dq_dx @ x, rtol=1e-14, atol=1e-18)
        assert np.allclose(ev.f, ev.df_dx @ x, rtol=1e-14, atol=1e-15)


def test_realize_at_zero_is_nominal(devices):
    nominal_text = (
        ALL_DEVICES.replace("{rr}", "1000").replace("{cc}", "1u")
        .replace("{vt}", "0.4238").replace("{isat}", "1e-13")
    )
    nominal_text = "\n".join(
        ln for ln in nominal_text.splitlines() if not ln.startswith(".param")
    )
    lit = parse_netlist(nominal_text)
    rng = np.random.default_rng(5)
    x = rng.normal(size=devices.n) * 0.2
    a = devices.realize(np.zeros(devices.dim)).eval_dae(x, 2e-4)
    b = lit.realize_nominal().eval_dae(x, 2e-4)
    assert np.allclose(a.q, b.q) and np.allclose(a.f, b.f) and np.allclose(a.bu, b.bu)
    assert np.allclose(a.dq_dx, b.dq_dx) and np.allclose(a.df_dx, b.df_dx)


def test_batched_evaluation_matches_loop(devices):
    rng = np.random.default_rng(9)
    xi = rng.normal(size=(8, devices.dim)) * 0.5
    x = rng.normal(size=(8, devices.n)) * 0.3
    batch = devices.realize(xi).eval_dae(x, 1e-4)
    for b in range(8):
        one = devices.realize(xi[b]).eval_dae(x[b], 1e-4)
        assert np.allclose(batch.q[b], one.q)
        assert np.allclose(batch.f[b], one.f)
        assert np.allclose(batch.df_dx[b], one.df_dx)


def test_dc_operating_point_resistive():
    c = parse_netlist("R1 1 0 1k\nV1 1 0 DC 1\n")
    x = dc_operating_point(c.realize_nominal())
    assert x[0] == pytest.approx(1.0)
    assert x[1] == pytest.approx(-1e-3)


def test_pmos_conducts_with_negative_vgs():
    # source at 1.5 V, gate at 0: |vgs| = 1.5 > VT0 -> current s -> d
    c = parse_netlist("V1 s 0 DC 1.5\nM1 d g s KP=1m VT0=0.5 PMOS\nR1 d 0 1k\nR2 g 0 1k\n")
    inst = c.realize_nominal()
    x = dc_operating_point(inst)
    vd = x[c.node_state("d")]
    assert vd > 0.1  # pulled up by the PMOS
    ev = inst.eval_dae(x, 0.0)
    assert np.isfinite(ev.df_dx).all()
