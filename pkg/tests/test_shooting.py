"""Deterministic shooting: transition maps, monodromy, forced/autonomous."""

import numpy as np
import pytest

from pssuq import parse_netlist
from pssuq.circuit import dc_operating_point
from pssuq.shooting import (
    CircuitDae,
    OscillationError,
    estimate_period,
    monodromy,
    solve_forced,
    state_transition,
)
from pssuq.transient import TRAPEZOIDAL, integrate

RC_FIXED = "V1 in 0 SIN(0 1 1k)\nR1 in out 1k\nC1 out 0 1u\n"


def rc_phasor_initial_state():
    """Analytic periodic initial state of the driven RC low-pass."""
    w = 2 * np.pi * 1e3
    H = 1.0 / (1.0 + 1j * w * 1e3 * 1e-6)
    v_in0 = 0.0
    v_out0 = H.imag  # amplitude 1, sin drive
    i_v0 = -(1.0 - H).imag / 1e3
    return np.array([v_in0, v_out0, i_v0])


def test_transition_identity():
    c = parse_netlist(RC_FIXED)
    y = np.array([0.3, -0.2, 1e-4])
    end, traj = state_transition(c.realize_nominal(), y, 0.0, 0.0)
    assert np.array_equal(end, y)
    assert traj.n_points == 1


def test_transition_returns_to_phasor_start():
    c = parse_netlist(RC_FIXED)
    y = rc_phasor_initial_state()
    end, _ = state_transition(c.realize_nominal(), y, 0.0, 1e-3, n_steps=30000)
    assert np.abs(end - y).max() < 1e-8


def test_scaled_transition_equals_time_change():
    c = parse_netlist("I1 0 1 DC 0\nR1 1 0 1k\nC1 1 0 1u\n")
    inst = c.realize_nominal()
    y = np.array([1.0])
    scaled, _ = state_transition(inst, y, 0.0, 1e-3, scale=2.0, n_steps=400)
    plain, _ = state_transition(inst, y, 0.0, 2e-3, n_steps=400)
    assert np.abs(scaled - plain).max() < 1e-8


def test_monodromy_scalar_decay_circuit():
    c = parse_netlist("I1 0 1 DC 0\nR1 1 0 1k\nC1 1 0 1u\n")  # tau = 1 ms
    sys = CircuitDae(c.realize_nominal())
    traj = integrate(sys, np.array([1.0]), 0.0, 1e-3, TRAPEZOIDAL, n_steps=500)
    M = monodromy(sys, traj)
    assert M[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-5)


def test_monodromy_matches_finite_differences_on_rectifier(rectifier):
    inst = rectifier.realize_nominal()
    sys = CircuitDae(inst)
    sol = solve_forced(inst, 1e-3, n_steps=200)
    M = monodromy(sys, sol.trajectory)

    def endpoint(y):
        traj = integrate(sys, y, 0.0, 1e-3, n_steps=200, stabilized_start=True)
        return traj.end

    n = rectifier.n
    fd = np.empty((n, n))
    for i in range(n):
        h = 1e-6 * (1.0 + abs(sol.y[i]))
        yp, ym = sol.y.copy(), sol.y.copy()
        yp[i] += h
        ym[i] -= h
        fd[:, i] = (endpoint(yp) - endpoint(ym)) / (2 * h)
    assert np.abs(M - fd).max() / (np.abs(fd).max() + 1e-30) < 1e-4


def test_forced_linear_converges_in_one_iteration():
    c = parse_netlist(RC_FIXED)
    rng = np.random.default_rng(0)
    for _ in range(3):
        y0 = rng.normal(size=c.n)
        sol = solve_forced(c.realize_nominal(), 1e-3, y0=y0, n_steps=200)
        assert sol.iterations == 1
        assert float(sol.residual_norm) < 1e-10


def test_forced_dc_only_equals_operating_point():
    c = parse_netlist("V1 1 0 DC 2\nR1 1 2 1k\nC1 2 0 1u\nR2 2 0 1k\n")
    inst = c.realize_nominal()
    sol = solve_forced(inst, 1e-3, n_steps=64)
    assert float(sol.residual_norm) < 1e-10
    assert np.abs(sol.y - dc_operating_point(inst)).max() < 1e-9


def test_forced_rectifier_matches_brute_force(rectifier):
    inst = rectifier.realize_nominal()
    sol = solve_forced(inst, 1e-3, n_steps=200)
    # brute-force oracle: iterate the same one-period map from rest until
    # the transient has died out (load time constant ~ one period)
    y = np.zeros(rectifier.n)
    sys = CircuitDae(inst)
    for _ in range(50):
        y = integrate(sys, y, 0.0, 1e-3, n_steps=200, stabilized_start=True).end
    assert np.abs(sol.y - y).max() < 1e-4
    traj_bf = integrate(sys, y, 0.0, 1e-3, n_steps=200, stabilized_start=True)
    assert np.abs(sol.trajectory.states - traj_bf.states).max() < 1e-4


def test_forced_solution_survives_grid_refinement(rectifier):
    inst = rectifier.realize_nominal()
    tol = 1e-5
    sol = solve_forced(inst, 1e-3, tol=tol, n_steps=200)
    sys = CircuitDae(inst)
    fine = integrate(sys, sol.y, 0.0, 1e-3, n_steps=400, stabilized_start=True)
    assert np.abs(fine.end - sol.y).max() < 10 * tol


def test_forced_linear_monodromy_is_stable():
    c = parse_netlist(RC_FIXED)
    sol = solve_forced(c.realize_nominal(), 1e-3, n_steps=200)
    rho = np.max(np.abs(np.linalg.eigvals(sol.monodromy)))
    assert rho < 1.0


def test_batched_forced_matches_individual(rc_circuit):
    xi = np.array([[-0.7], [0.2], [1.0]])
    batch = solve_forced(rc_circuit.realize(xi), 1e-3, n_steps=100)
    assert np.all(batch.converged)
    for k in range(3):
        one = solve_forced(rc_circuit.realize(xi[k]), 1e-3, n_steps=100)
        assert np.abs(batch.y[k] - one.y).max() < 1e-9


# -- autonomous ---------------------------------------------------------------

VDP_ANALYTIC_PERIOD = 2 * np.pi * (1 + 0.1**2 / 16)  # 6.28711...


def test_estimate_period_van_der_pol(vdp_circuit):
    est = estimate_period(vdp_circuit.realize_nominal(), 0)
    assert abs(est.period - VDP_ANALYTIC_PERIOD) / VDP_ANALYTIC_PERIOD < 0.01


def test_estimate_period_rejects_rc():
    c = parse_netlist("V1 1 0 DC 1\nR1 1 2 1k\nC1 2 0 1u\n")
    with pytest.raises(OscillationError):
        estimate_period(c.realize_nominal(), c.node_state("2"))


def test_estimate_period_colpitts_sanity(colpitts_nominal):
    est, _, _ = colpitts_nominal
    t_lc = 2 * np.pi * np.sqrt(150e-9 * 50e-12)  # L1 with C1 in series with C2
    assert t_lc / 3 < est.period < 3 * t_lc


def test_autonomous_van_der_pol_period(vdp_nominal):
    _, _, sol = vdp_nominal
    assert abs(sol.period - VDP_ANALYTIC_PERIOD) / VDP_ANALYTIC_PERIOD < 1e-3
    assert float(sol.residual_norm) <= 1e-5


def test_autonomous_dual_residual(vdp_circuit, vdp_nominal):
    est, phase, sol = vdp_nominal
    inst = vdp_circuit.realize_nominal()
    end, _ = state_transition(
        inst, sol.y, 0.0, float(sol.period) / float(sol.period_scale),
        scale=float(sol.period_scale), n_steps=400,
    )
    # stabilized-start grid is what the solver used; re-run to match
    sys = CircuitDae(inst, scale=float(sol.period_scale))
    traj = integrate(
        sys, sol.y, 0.0, float(sol.period) / float(sol.period_scale),
        n_steps=400, stabilized_start=True,
    )
    assert np.abs(traj.end - sol.y).max() <= 1e-5
    assert abs(sol.y[phase.index] - phase.value) <= 1e-5


def test_autonomous_colpitts(colpitts_nominal):
    est, phase, sol = colpitts_nominal
    assert bool(sol.converged)
    # long-transient crossing oracle agrees with the solved period
    assert abs(float(sol.period) - est.period) / est.period < 1e-3
