"""Deterministic periodic steady state by shooting Newton.

Forced circuits solve phi(y, 0, T) - y = 0 for the initial state y, with
the period T fixed by the excitation. Autonomous circuits integrate the
time-scaled equations d q/d tau + a * (f - B u) = 0 over a fixed nominal
interval [0, T0] and solve for (y, a) with one phase row pinning a chosen
state at tau = 0, so the oscillation period is T0 * a. The Newton
Jacobians are the one-period monodromy matrix (and, for oscillators, the
sensitivity of the endpoint to the time scaling) accumulated step by step
along the integration grid, hence exact for the discretized map.

All solvers accept batched instances: a (B, d) parameter batch advances in
lockstep through the same grids, which is how the Monte Carlo driver
amortizes its sampling loop. Per-sample Newton failures are flagged, not
raised, in batched runs.
"""

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .circuit import dc_operating_point
from .transient import (
    BACKWARD_EULER,
    ConvergenceError,
    NewtonOptions,
    TRAPEZOIDAL,
    Trajectory,
    integrate,
    transition_chain,
)


class OscillationError(RuntimeError):
    """No oscillation detected, or the phase anchor is unusable."""


@dataclass(frozen=True)
class PhaseCondition:
    """Pin state ``index`` to ``value`` at t = 0 (removes the time shift)."""

    index: int
    value: float


@dataclass
class PssSolution:
    """Converged periodic steady state of one circuit (or batch)."""

    y: np.ndarray
    period: np.ndarray | float
    trajectory: Trajectory
    monodromy: np.ndarray
    iterations: int
    residual_norm: np.ndarray | float
    converged: np.ndarray | bool
    period_scale: np.ndarray | float | None = None  # autonomous solves only

    def summary(self):
        return {
            "period": np.asarray(self.period).tolist(),
            "iterations": int(self.iterations),
            "residual_norm": np.asarray(self.residual_norm).tolist(),
            "converged": np.asarray(self.converged).tolist(),
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2)


class CircuitDae:
    """Adapts a CircuitInstance to the integrator interface.

    ``F = f - B u(t)``; with a period scaling attached the right-hand side
    becomes ``a * (f - B u)`` and ``dF_dscale`` exposes its derivative with
    respect to ``a`` (one column).
    """

    def __init__(self, instance, scale=None):
        self.instance = instance
        self.scale = scale

    @property
    def ndim(self):
        return self.instance.n

    def _factor(self):
        a = np.asarray(self.scale, dtype=float)
        return a[..., None]

    def eval(self, w, t):
        ev = self.instance.eval_dae(w, t)
        F = ev.f - ev.bu
        if self.scale is not None:
            F = self._factor() * F
        return ev.q, F

    def eval_with_jac(self, w, t):
        ev = self.instance.eval_dae(w, t)
        F = ev.f - ev.bu
        dF = ev.df_dx
        if self.scale is not None:
            a = self._factor()
            F = a * F
            dF = a[..., None] * dF
        return ev.q, F, ev.dq_dx, dF

    def dF_dscale(self, w, t):
        ev = self.instance.eval_dae(w, t)
        return (ev.f - ev.bu)[..., None]

    def locate_nonfinite(self, w, t):
        return self.instance.find_nonfinite_element(w, t)


def state_transition(
    instance,
    y,
    t0,
    t1,
    scale=None,
    scheme=TRAPEZOIDAL,
    n_steps=200,
    newton=NewtonOptions(),
):
    """Integrate the circuit from state y; returns (endpoint, trajectory).

    With ``scale`` given, the time-scaled autonomous equations are
    integrated over the scaled interval instead.
    """
    sys = CircuitDae(instance, scale=scale)
    traj = integrate(sys, y, t0, t1, scheme=scheme, n_steps=n_steps, newton=newton)
    return traj.end, traj


def monodromy(system, trajectory, scheme=None):
    """One-period state-transition Jacobian along a recorded trajectory."""
    M, _ = transition_chain(system, trajectory, scheme)
    return M


def _norm_inf(g):
    return np.max(np.abs(g), axis=-1)


def _solve_linear(J, rhs):
    """Batched dense solve with per-sample fallback; NaN rows on failure."""
    try:
        return np.linalg.solve(J, rhs)
    except np.linalg.LinAlgError:
        if J.ndim == 2:
            return np.full_like(rhs, np.nan)
        out = np.empty_like(rhs)
        flat_J = J.reshape(-1, *J.shape[-2:])
        flat_r = rhs.reshape(-1, *rhs.shape[-2:])
        for i in range(flat_J.shape[0]):
            try:
                out.reshape(flat_r.shape)[i] = np.linalg.solve(flat_J[i], flat_r[i])
            except np.linalg.LinAlgError:
                out.reshape(flat_r.shape)[i] = np.nan
        return out


def _damped_newton(unknown0, run, solve_update, tol, max_iter, max_halvings=8):
    """Shared damped-Newton driver for the shooting solvers.

    ``run(u)`` evaluates the residual, returning (g, norm, aux);
    ``solve_update(u, g, aux)`` returns the Newton step. Works on batched
    unknowns: each sample halves its own step until its residual norm
    decreases. Returns (u, g, norm, aux, iterations, converged_mask).
    """
    u = np.array(unknown0, dtype=float, copy=True)
    g, gn, aux = run(u)
    stalled = np.zeros(np.shape(gn), dtype=bool)
    iterations = 0
    while iterations < max_iter and not np.all((gn <= tol) | stalled):
        delta = solve_update(u, g, aux)
        delta = np.where(np.isfinite(delta), delta, 0.0)
        alpha = np.ones(np.shape(gn))
        accepted = (gn <= tol) | stalled
        u_next = u
        uniform = False  # whole batch accepted the full step in one trial
        for trial in range(max_halvings + 1):
            u_t = u - (alpha[..., None] if delta.ndim > 1 else alpha) * delta
            g_t, gn_t, aux_t = run(u_t)
            better = np.where(np.isfinite(gn_t), gn_t < gn, False) & ~accepted
            if trial == max_halvings:
                better = ~accepted & np.isfinite(gn_t)
            if trial == 0 and np.all(better | accepted) and not np.any(accepted):
                u, g, gn, aux = u_t, g_t, gn_t, aux_t
                uniform = True
                accepted = accepted | better
                break
            if np.any(better):
                if np.ndim(gn) == 0:
                    u_next = u_t
                else:
                    u_next = np.where(better[..., None], u_t, u_next)
            accepted = accepted | better
            if np.all(accepted):
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        stalled = stalled | ~accepted
        if not uniform:
            if np.ndim(gn) == 0 and not bool(accepted):
                break
            u = u_next if np.ndim(gn) == 0 else np.where(stalled[..., None], u, u_next)
            # re-evaluate so the residual and trajectory match the update
            g, gn, aux = run(u)
        iterations += 1
    converged = gn <= tol
    return u, g, gn, aux, iterations, converged


def solve_forced(
    instance,
    period,
    y0=None,
    tol=1e-5,
    scheme=TRAPEZOIDAL,
    n_steps=200,
    max_iter=50,
    newton=NewtonOptions(),
):
    """Shooting Newton for the periodic steady state of a driven circuit."""
    if not period > 0:
        raise ValueError("period must be positive")
    sys = CircuitDae(instance)
    if y0 is None:
        y0 = dc_operating_point(instance)
    y0 = np.asarray(y0, dtype=float)
    if instance.batch_size > 1 and y0.ndim == 1:
        y0 = np.broadcast_to(y0, (instance.batch_size, y0.size)).copy()

    def run(y):
        traj = integrate(
            sys, y, 0.0, period, scheme=scheme, n_steps=n_steps, newton=newton,
            stabilized_start=True,
        )
        g = traj.end - y
        gn = _norm_inf(g)
        if traj.failed is not None:
            gn = np.where(traj.failed, np.inf, gn)
        return g, gn, traj

    def solve_update(y, g, traj):
        M, _ = transition_chain(sys, traj, scheme)
        n = y.shape[-1]
        J = M - np.eye(n)
        return _solve_linear(J, g[..., None])[..., 0]

    y, g, gn, traj, iterations, converged = _damped_newton(
        y0, run, solve_update, tol, max_iter
    )
    if not np.any(converged):
        raise ConvergenceError(
            f"forced shooting did not converge (residual {np.min(gn):.3e})"
        )
    M, _ = transition_chain(sys, traj, scheme)
    return PssSolution(y, period, traj, M, iterations, gn, converged)


def solve_autonomous(
    instance,
    phase,
    period_guess,
    y0,
    tol=1e-5,
    scheme=TRAPEZOIDAL,
    n_steps=200,
    max_iter=50,
    newton=NewtonOptions(),
    scale_floor=1e-6,
):
    """Shooting Newton for an oscillator: unknowns are (y, period scale).

    ``phase`` pins one state at t = 0; ``period_guess`` sets the scaled
    integration horizon, and the converged period is period_guess * a.

    Exactly conservative circuits (a lossless LC tank, say) are out of
    scope: every neighboring orbit there is periodic, so the bordered
    Jacobian is singular by construction and any period near the linear
    resonance satisfies the residual test.
    """
    if not period_guess > 0:
        raise ValueError("period guess must be positive")
    if not instance.circuit.is_autonomous:
        raise ValueError("circuit has a time-varying source; use solve_forced")
    n = instance.n
    j = phase.index
    y0 = np.asarray(y0, dtype=float)
    batch = (instance.batch_size,) if instance.batch_size > 1 else y0.shape[:-1]
    if batch and y0.ndim == 1:
        y0 = np.broadcast_to(y0, batch + (n,)).copy()
    u0 = np.concatenate([y0, np.ones(batch + (1,))], axis=-1)
    sys = CircuitDae(instance, scale=1.0)

    def run(u):
        y, a = u[..., :n], u[..., n]
        bad_scale = a <= scale_floor  # period scaling must stay positive
        sys.scale = np.maximum(a, scale_floor)
        traj = integrate(
            sys, y, 0.0, period_guess, scheme=scheme, n_steps=n_steps, newton=newton,
            stabilized_start=True,
        )
        psi = traj.end - y
        chi = y[..., j] - phase.value
        g = np.concatenate([psi, chi[..., None]], axis=-1)
        gn = _norm_inf(g)
        gn = np.where(bad_scale, np.inf, gn)
        if traj.failed is not None:
            gn = np.where(traj.failed, np.inf, gn)
        return g, gn, traj

    def solve_update(u, g, traj):
        M, S = transition_chain(sys, traj, scheme, with_scale_columns=True)
        J = np.zeros(M.shape[:-2] + (n + 1, n + 1))
        J[..., :n, :n] = M - np.eye(n)
        J[..., :n, n:] = S
        J[..., n, j] = 1.0
        delta = _solve_linear(J, g[..., None])[..., 0]
        if np.all(~np.isfinite(delta)):
            raise ConvergenceError(
                "singular bordered shooting Jacobian; the phase pick may be "
                f"degenerate (state {j} stationary at t=0): choose another "
                "state index or level"
            )
        return delta

    u, g, gn, traj, iterations, converged = _damped_newton(
        u0, run, solve_update, tol, max_iter
    )
    if not np.any(converged):
        raise ConvergenceError(
            f"autonomous shooting did not converge (residual {np.min(gn):.3e})"
        )
    y, a = u[..., :n], u[..., n]
    sys.scale = a
    M, _ = transition_chain(sys, traj, scheme)
    return PssSolution(
        y, period_guess * a, traj, M, iterations, gn, converged, period_scale=a
    )


# ---------------------------------------------------------------------------
# nominal-period estimation


@dataclass
class EstimatedPeriod:
    period: float
    level: float
    y0: np.ndarray
    state_index: int
    angular_frequency: float


def _oscillation_frequency(instance, x_dc):
    """Angular frequency of the least-damped oscillatory mode at the DC point.

    Generalized eigenvalues of the linearized pencil; infinite modes from
    the singular charge Jacobian are discarded.
    """
    ev = instance.eval_dae(x_dc, 0.0)
    lam = scipy.linalg.eig(-ev.df_dx, ev.dq_dx, right=False)
    lam = lam[np.isfinite(lam)]
    osc = lam[np.abs(lam.imag) > 1e-9 * (1.0 + np.abs(lam.real))]
    if osc.size == 0:
        raise OscillationError("no oscillatory mode at the DC operating point")
    best = osc[np.argmax(osc.real / np.maximum(np.abs(osc), 1e-300))]
    return float(abs(best.imag)), float(best.real)


def estimate_period(
    instance,
    state_index,
    n_periods=40,
    settle_fraction=0.5,
    ltol=1e-5,
    kick=0.01,
    scheme=TRAPEZOIDAL,
    min_swing=1e-9,
):
    """Estimate an oscillator's period, phase level, and on-cycle state.

    Runs a transient from the perturbed DC point, discards the settling
    span, sets the level to the waveform mid-range and measures the mean
    spacing of its rising crossings (linearly interpolated). The returned
    state is the trajectory interpolated at the last crossing, a
    convenient shooting initial guess.
    """
    x_dc = dc_operating_point(instance)
    omega, growth = _oscillation_frequency(instance, x_dc)
    t_lin = 2.0 * np.pi / omega
    t_end = n_periods * t_lin
    # perturb only states that carry charge/flux: kicking algebraic states
    # gives an inconsistent DAE initial condition
    ev = instance.eval_dae(x_dc, 0.0)
    differential = np.any(np.abs(ev.dq_dx) > 0.0, axis=0)
    x_start = x_dc + differential * kick * (1.0 + np.max(np.abs(x_dc)))
    sys = CircuitDae(instance)
    # a few backward-Euler steps damp the leftover constraint mismatch
    # before the (non L-stable) trapezoidal rule takes over
    pre = integrate(sys, x_start, 0.0, t_lin / 100.0, scheme=BACKWARD_EULER, n_steps=4)
    traj = integrate(
        sys, pre.end, pre.times[-1], t_end, scheme=scheme, ltol=ltol, h0=t_lin / 200.0
    )
    keep = traj.times >= settle_fraction * t_end
    t = traj.times[keep]
    wave = traj.states[keep, state_index]
    lo, hi = wave.min(), wave.max()
    if hi - lo < min_swing * (1.0 + np.abs(x_dc[state_index])):
        raise OscillationError(
            f"no oscillation detected on state {state_index} "
            f"(peak-to-peak {hi - lo:.3e})"
        )
    level = 0.5 * (lo + hi)
    below = wave[:-1] < level
    above = wave[1:] >= level
    idx = np.nonzero(below & above)[0]
    if idx.size < 3:
        raise OscillationError("too few level crossings to measure a period")
    frac = (level - wave[idx]) / (wave[idx + 1] - wave[idx])
    t_cross = t[idx] + frac * (t[idx + 1] - t[idx])
    period = float(np.mean(np.diff(t_cross)))
    k_last = idx[-1]
    states = traj.states[keep]
    y0 = states[k_last] + frac[-1] * (states[k_last + 1] - states[k_last])
    return EstimatedPeriod(period, float(level), y0, state_index, omega)
