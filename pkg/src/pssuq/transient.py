"""Implicit time integration for DAE systems d Q(w)/dt + F(w, t) = 0.

Any object with ``ndim``, ``eval(w, t) -> (Q, F)`` and
``eval_with_jac(w, t) -> (Q, F, dQ/dw, dF/dw)`` can be integrated; circuit
instances and the stacked collocation systems both provide this
interface. ``F`` includes the source term, so the one-step residual of
the two-point schemes here is

    Q(w_k) - Q(w_{k-1}) + h_k * (g1 * F(w_k, t_k) + g2 * F(w_{k-1}, t_{k-1})) = 0

with (g1, g2) = (1, 0) for backward Euler and (0.5, 0.5) for the
trapezoidal rule. Each step is solved by an inner Newton iteration with
the exact step Jacobian dQ/dw + g1*h*dF/dw.

States may carry a leading batch axis; batched runs share one time grid
and flag (rather than raise on) per-sample Newton failures, which is what
the Monte Carlo driver needs. Unbatched runs on a fixed grid recover from
a failed step by inserting midpoints, so the recorded trajectory always
reflects the steps actually taken and the one-period linearization chain
stays exact.
"""

from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    """Newton iteration failed to converge."""


@dataclass(frozen=True)
class IntegrationScheme:
    kind: str
    gamma1: float
    gamma2: float
    order: int


BACKWARD_EULER = IntegrationScheme("backward_euler", 1.0, 0.0, 1)
TRAPEZOIDAL = IntegrationScheme("trapezoidal", 0.5, 0.5, 2)

_SCHEMES = {s.kind: s for s in (BACKWARD_EULER, TRAPEZOIDAL)}


def scheme_by_name(name):
    try:
        return _SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown integration scheme {name!r}") from None


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-9  # used as both absolute and relative threshold
    max_iter: int = 50
    h_min: float = 1e-15


@dataclass
class Trajectory:
    """Time grid and states of one integration run.

    ``states[k]`` is the state at ``times[k]``; shape (P, N) or (P, B, N)
    for batched runs. ``gammas[k]`` holds the (gamma1, gamma2) weights the
    k-th step was taken with, so derivative chains can replay mixed-scheme
    runs (an L-stable first step, say) exactly. Step factors (the
    Jacobians at each grid point) are re-evaluated on demand by the chain
    routines, so trajectories stay small.
    """

    times: np.ndarray
    states: np.ndarray
    scheme: IntegrationScheme
    failed: np.ndarray | None = None  # per-sample failure mask (batched runs)
    gammas: np.ndarray | None = None  # (P-1, 2); scheme weights if omitted

    @property
    def end(self):
        return self.states[-1]

    @property
    def n_points(self):
        return self.times.size

    def to_csv(self, path, names=None):
        width = self.states.shape[-1]
        if self.states.ndim != 2:
            raise ValueError("CSV export is for unbatched trajectories")
        names = names or [f"w{i}" for i in range(width)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["time"] + list(names)) + "\n")
            for t, row in zip(self.times, self.states):
                fh.write(",".join(f"{v:.17g}" for v in [t, *row]) + "\n")


def _solve(J, r):
    """Solve J x = r for vector/stacked right-hand sides, NaN on failure."""
    try:
        return np.linalg.solve(J, r[..., None])[..., 0], None
    except np.linalg.LinAlgError:
        if J.ndim == 2:
            return np.full_like(r, np.nan), np.array(True)
        flat_J = J.reshape(-1, *J.shape[-2:])
        flat_r = r.reshape(-1, r.shape[-1])
        out = np.empty_like(flat_r)
        bad = np.zeros(flat_J.shape[0], dtype=bool)
        for i in range(flat_J.shape[0]):
            try:
                out[i] = np.linalg.solve(flat_J[i], flat_r[i])
            except np.linalg.LinAlgError:
                out[i] = np.nan
                bad[i] = True
        return out.reshape(r.shape), bad.reshape(r.shape[:-1])


def _newton_step(system, w_prev, t_prev, h, scheme, opts, qf_prev=None, ignore=None):
    """Solve one implicit step; returns (w, (q, f) at w, converged_mask).

    Samples flagged in ``ignore`` are treated as already converged (used to
    skip work on batch members that failed earlier in the run).
    """
    g1, g2 = scheme.gamma1, scheme.gamma2
    if qf_prev is None:
        qf_prev = system.eval(w_prev, t_prev)
    q_prev, f_prev = qf_prev
    t_new = t_prev + h
    ref = np.max(np.abs(q_prev), axis=-1) + abs(h) * np.max(np.abs(f_prev), axis=-1)
    w = np.array(w_prev, copy=True)
    converged = np.zeros(w.shape[:-1], dtype=bool)
    if ignore is not None:
        converged = converged | ignore
    for _ in range(opts.max_iter):
        q, f, dq, df = system.eval_with_jac(w, t_new)
        r = q - q_prev + h * (g1 * f + g2 * f_prev)
        r = np.where(np.isfinite(r), r, 1e300)
        rnorm = np.max(np.abs(r), axis=-1)
        J = dq + (g1 * h) * df
        delta, bad = _solve(J, r)
        delta = np.where(np.isfinite(delta), delta, 0.0)
        w = w - np.where(converged[..., None], 0.0, delta)
        unorm = np.max(np.abs(delta), axis=-1)
        wnorm = np.max(np.abs(w), axis=-1)
        converged = converged | (
            (rnorm <= opts.tol * (1.0 + ref)) & (unorm <= opts.tol * (1.0 + wnorm))
        )
        if bad is not None:
            converged = converged & ~bad
        if np.all(converged):
            break
    q, f = system.eval(w, t_new)
    return w, (q, f), converged


def step(system, w_prev, t_prev, h, scheme=TRAPEZOIDAL, newton=NewtonOptions()):
    """Advance one implicit step; raises on Newton failure (unbatched)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    w, _, conv = _newton_step(system, np.asarray(w_prev, dtype=float), t_prev, h, scheme, newton)
    if not np.all(conv):
        _raise_step_failure(system, w_prev, t_prev, h)
    return w


def _raise_step_failure(system, w, t, h):
    name = None
    locate = getattr(system, "locate_nonfinite", None)
    if locate is not None:
        name = locate(w, t)
    extra = f" (non-finite contribution from element {name})" if name else ""
    raise ConvergenceError(f"implicit step at t={t:.6g}, h={h:.3g} did not converge{extra}")


def integrate(
    system,
    w0,
    t0,
    t1,
    scheme=TRAPEZOIDAL,
    n_steps=None,
    ltol=None,
    newton=NewtonOptions(),
    h0=None,
    max_points=2_000_000,
    stabilized_start=False,
):
    """Integrate from t0 to t1 on a uniform or error-controlled grid.

    Exactly one of ``n_steps`` (uniform grid) or ``ltol`` (adaptive grid
    with local-truncation-error control by step doubling) must be given.
    Batched initial states integrate in lockstep on a shared grid;
    per-sample Newton failures freeze the failing sample and are reported
    through ``Trajectory.failed``.

    ``stabilized_start`` takes the first step with backward Euler
    regardless of ``scheme``. This damps inconsistent algebraic components
    of the initial state, which the trapezoidal rule would otherwise carry
    forever; the shooting solvers rely on it to keep the one-period map
    contractive on the full MNA state.
    """
    w0 = np.asarray(w0, dtype=float)
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    if t1 == t0:
        return Trajectory(np.array([t0]), w0[None], scheme, None, np.zeros((0, 2)))
    if (n_steps is None) == (ltol is None):
        raise ValueError("specify exactly one of n_steps or ltol")
    batched = w0.ndim > 1
    failed = np.zeros(w0.shape[:-1], dtype=bool) if batched else None

    times = [float(t0)]
    states = [w0]
    gammas = []
    qf = system.eval(w0, t0)

    def advance(w, t, h, qf_prev, sch, depth=0):
        """One accepted step of size h, bisecting on failure (unbatched)."""
        nonlocal failed
        w_new, qf_new, conv = _newton_step(
            system, w, t, h, sch, newton, qf_prev, ignore=failed
        )
        if np.all(conv | (failed if batched else False)):
            times.append(t + h)
            states.append(w_new)
            gammas.append((sch.gamma1, sch.gamma2))
            return w_new, qf_new
        if batched:
            # freeze failing samples at their previous state
            bad = ~conv & ~failed
            failed = failed | bad
            w_new = np.where(bad[..., None], w, w_new)
            times.append(t + h)
            states.append(w_new)
            gammas.append((sch.gamma1, sch.gamma2))
            return w_new, system.eval(w_new, t + h)
        if h * 0.5 < newton.h_min or depth > 40:
            _raise_step_failure(system, w, t, h)
        w_mid, qf_mid = advance(w, t, 0.5 * h, qf_prev, sch, depth + 1)
        return advance(w_mid, t + 0.5 * h, 0.5 * h, qf_mid, sch, depth + 1)

    if n_steps is not None:
        grid = np.linspace(t0, t1, n_steps + 1)
        w = w0
        for k in range(n_steps):
            sch = BACKWARD_EULER if (k == 0 and stabilized_start) else scheme
            w, qf = advance(w, grid[k], grid[k + 1] - grid[k], qf, sch)
    else:
        # adaptive: compare one h-step against two h/2-steps; both half-step
        # endpoints are recorded so linearization chains stay consistent.
        # The error is measured per component relative to its running peak,
        # which keeps mixed-unit states (volts vs amps) on equal footing.
        w, t = w0, float(t0)
        h = h0 if h0 is not None else (t1 - t0) / 100.0
        err_exp = 1.0 / (scheme.order + 1.0)
        gain = 2.0**scheme.order - 1.0
        peaks = np.maximum(np.abs(w0), 1e-9)
        first = stabilized_start
        while t < t1 - 1e-15 * (t1 - t0):
            sch = BACKWARD_EULER if first else scheme
            h = min(h, t1 - t)
            w_full, _, conv_f = _newton_step(system, w, t, h, sch, newton, qf)
            w_h1, qf_h1, conv_1 = _newton_step(system, w, t, 0.5 * h, sch, newton, qf)
            w_h2, qf_h2, conv_2 = _newton_step(
                system, w_h1, t + 0.5 * h, 0.5 * h, sch, newton, qf_h1
            )
            ok = np.all(conv_f) and np.all(conv_1) and np.all(conv_2)
            err = np.max(np.abs(w_full - w_h2) / peaks) / gain if ok else np.inf
            if err <= ltol:
                times.extend([t + 0.5 * h, t + h])
                states.extend([w_h1, w_h2])
                gammas.extend([(sch.gamma1, sch.gamma2)] * 2)
                w, qf = w_h2, qf_h2
                t += h
                peaks = np.maximum(peaks, np.abs(w))
                h *= min(4.0, max(0.5, 0.9 * (ltol / max(err, 1e-300)) ** err_exp))
                first = False
            else:
                h *= max(0.05, 0.9 * (ltol / err) ** err_exp) if ok else 0.25
                if h < newton.h_min:
                    _raise_step_failure(system, w, t, h)
            if len(times) > max_points:
                raise ConvergenceError("adaptive grid exceeded the point budget")

    return Trajectory(np.asarray(times), np.stack(states), scheme, failed, np.asarray(gammas))


def _solve_matrix(J, R):
    """Batched multi-RHS solve with per-sample fallback; NaN on failure."""
    try:
        return np.linalg.solve(J, R)
    except np.linalg.LinAlgError:
        if J.ndim == 2:
            return np.full_like(R, np.nan)
        out = np.empty_like(R)
        fJ = J.reshape(-1, *J.shape[-2:])
        fR = R.reshape(-1, *R.shape[-2:])
        fo = out.reshape(fR.shape)
        for i in range(fJ.shape[0]):
            try:
                fo[i] = np.linalg.solve(fJ[i], fR[i])
            except np.linalg.LinAlgError:
                fo[i] = np.nan
        return out


def transition_chain(system, trajectory, scheme=None, with_scale_columns=False):
    """Accumulate d(end state)/d(initial state) along a trajectory.

    Walks the recorded steps and chains the exact derivatives of each
    implicit step equation (using each step's own scheme weights). With
    ``with_scale_columns`` the derivative of the end state with respect to
    the system's auxiliary scaling coefficients (columns of
    ``system.dF_dscale``) is accumulated as well, starting from zero.
    Returns (M, S) where S is None unless requested.
    """
    sch = scheme or trajectory.scheme
    times, states = trajectory.times, trajectory.states
    gam = trajectory.gammas
    if gam is None or len(gam) != times.size - 1:
        gam = np.tile([sch.gamma1, sch.gamma2], (times.size - 1, 1))
    w0 = states[0]
    n = w0.shape[-1]
    batch = w0.shape[:-1]
    M = np.broadcast_to(np.eye(n), batch + (n, n)).copy()
    S = None
    _, _, E_prev, A_prev = system.eval_with_jac(w0, times[0])
    P_prev = None
    if with_scale_columns:
        P_prev = system.dF_dscale(w0, times[0])
        S = np.zeros(batch + (n, P_prev.shape[-1]))
    for k in range(1, times.size):
        h = times[k] - times[k - 1]
        g1, g2 = gam[k - 1]
        _, _, E_k, A_k = system.eval_with_jac(states[k], times[k])
        lhs = E_k + (g1 * h) * A_k
        rhs_m = (E_prev - (g2 * h) * A_prev) @ M
        if with_scale_columns:
            P_k = system.dF_dscale(states[k], times[k])
            rhs_s = (E_prev - (g2 * h) * A_prev) @ S - h * (g1 * P_k + g2 * P_prev)
            stacked = np.concatenate([rhs_m, rhs_s], axis=-1)
            sol = _solve_matrix(lhs, stacked)
            M, S = sol[..., :n], sol[..., n:]
            P_prev = P_k
        else:
            M = _solve_matrix(lhs, rhs_m)
        E_prev, A_prev = E_k, A_k
    return M, S
