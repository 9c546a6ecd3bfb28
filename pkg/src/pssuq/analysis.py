"""Monte Carlo baseline and statistical post-processing.

The Monte Carlo driver draws standardized coordinates from a counter-based
stream keyed by (seed, sample index), so results are reproducible bit for
bit regardless of execution order, and runs the deterministic shooting
solvers over the whole sample batch in lockstep. Post-processing turns
converged chaos solutions into mean/std waveforms, metric distributions
(period, harmonic distortion, average power) sampled cheaply from the
surrogate, and quantitative ST-vs-MC comparisons.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .shooting import PhaseCondition, estimate_period, solve_autonomous, solve_forced
from .transient import NewtonOptions, TRAPEZOIDAL


# ---------------------------------------------------------------------------
# reproducible sampling


def draw_standardized(dists, seed, count, offset=0):
    """Standardized coordinate draws for each sample index.

    Sample i consumes its own fixed block of a counter-based (Philox)
    uniform stream keyed by the seed, so the draw depends only on
    (seed, offset + i): splitting a run into batches, reordering samples,
    or parallel scheduling cannot change any sample's coordinates
    (draw(seed, n, offset=k) equals rows k:k+n of draw(seed, k+n)).
    Gaussian coordinates come from the Box-Muller transform of the block's
    uniforms, uniform coordinates map to 2u - 1.
    """
    d = len(dists)
    need = max(sum(2 if s.kind == "gaussian" else 1 for s in dists), 1)
    # one counter block yields four doubles; pad so blocks stay aligned
    block = -(-need // 4) * 4
    bitgen = np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF)
    if offset:
        bitgen.advance(offset * (block // 4))
    u = np.random.Generator(bitgen).random((count, block))
    out = np.empty((count, d))
    c = 0
    for j, spec in enumerate(dists):
        if spec.kind == "gaussian":
            u1, u2 = u[:, c], u[:, c + 1]
            c += 2
            out[:, j] = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)
        else:
            out[:, j] = 2.0 * u[:, c] - 1.0
            c += 1
    return out


# ---------------------------------------------------------------------------
# Monte Carlo driver


@dataclass
class McRun:
    """Per-sample periodic steady states of a parameter sample batch."""

    seed: int
    xi: np.ndarray  # (N, d)
    times: np.ndarray  # (P,)
    waveforms: np.ndarray  # (N, P, n)
    y: np.ndarray  # (N, n)
    failed: np.ndarray  # (N,)
    period: np.ndarray | float  # (N,) for oscillators, scalar otherwise
    iterations: int

    @property
    def n_samples(self):
        return self.xi.shape[0]

    @property
    def failure_fraction(self):
        return float(np.mean(self.failed))

    def ok(self):
        return ~self.failed

    def waveform_mean_std(self):
        """Unbiased per-time-point statistics over the converged samples."""
        w = self.waveforms[self.ok()]
        return w.mean(axis=0), w.std(axis=0, ddof=1)

    def scalar_stats(self, values):
        v = np.asarray(values)[self.ok()]
        return float(v.mean()), float(v.std(ddof=1))


def monte_carlo(
    circuit,
    kind,
    n_samples,
    seed,
    period=None,
    phase_index=None,
    tol=1e-5,
    scheme=TRAPEZOIDAL,
    n_steps=200,
    newton=NewtonOptions(),
    max_failure_fraction=0.01,
):
    """Reference uncertainty propagation by repeated deterministic solves.

    ``kind`` is "forced" (period from the excitation unless given) or
    "autonomous" (phase state index required; every sample is warm-started
    from the nominal solution). Failing samples are recorded, not fatal,
    unless their fraction exceeds ``max_failure_fraction``.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    dists = [s for _, s in circuit.random_params]
    xi = draw_standardized(dists, seed, n_samples)
    batch = circuit.realize(xi)

    if kind == "forced":
        if period is None:
            period = circuit.fundamental_period()
        nominal = circuit.realize_nominal()
        det = solve_forced(
            nominal, period, tol=tol, scheme=scheme, n_steps=n_steps, newton=newton
        )
        sol = solve_forced(
            batch, period, y0=det.y, tol=tol, scheme=scheme, n_steps=n_steps, newton=newton
        )
        periods = float(period)
    elif kind == "autonomous":
        if phase_index is None:
            raise ValueError("autonomous Monte Carlo needs a phase state index")
        nominal = circuit.realize_nominal()
        est = estimate_period(nominal, phase_index)
        phase = PhaseCondition(phase_index, est.level)
        det = solve_autonomous(
            nominal, phase, est.period, est.y0, tol=tol, scheme=scheme,
            n_steps=n_steps, newton=newton,
        )
        T0 = float(det.period)
        sol = solve_autonomous(
            batch, phase, T0, det.y, tol=tol, scheme=scheme, n_steps=n_steps,
            newton=newton,
        )
        periods = np.asarray(sol.period)
    else:
        raise ValueError(f"unknown analysis kind {kind!r}")

    failed = ~np.asarray(sol.converged)
    if failed.ndim == 0:
        failed = np.broadcast_to(failed, (n_samples,)).copy()
    run = McRun(
        seed=seed,
        xi=xi,
        times=sol.trajectory.times.copy(),
        waveforms=np.moveaxis(sol.trajectory.states, 0, 1).copy(),
        y=np.atleast_2d(sol.y).copy(),
        failed=failed,
        period=periods,
        iterations=sol.iterations,
    )
    if run.failure_fraction > max_failure_fraction:
        raise RuntimeError(
            f"{run.failure_fraction:.1%} of Monte Carlo samples failed to converge"
        )
    return run


# ---------------------------------------------------------------------------
# chaos-solution statistics


@dataclass
class WaveformStats:
    times: np.ndarray
    mean: np.ndarray  # (P, n)
    std: np.ndarray  # (P, n)


def waveform_stats(solution):
    """Mean/std waveforms of a converged stochastic PSS solution."""
    K = solution.coeffs.basis.size
    P = solution.trajectory.times.size
    coeff = solution.trajectory.states.reshape(P, K, -1)
    mean = coeff[:, 0, :].copy()
    std = np.sqrt(np.sum(coeff[:, 1:, :] ** 2, axis=1))
    return WaveformStats(solution.trajectory.times.copy(), mean, std)


def surrogate_waveforms(solution, xi, state):
    """Waveform realizations of one state from the chaos surrogate.

    Returns (S, P): one row per row of ``xi``; no circuit solves involved.
    """
    K = solution.coeffs.basis.size
    P = solution.trajectory.times.size
    coeff = solution.trajectory.states.reshape(P, K, -1)[:, :, state]
    H = solution.coeffs.basis.eval(np.atleast_2d(xi))  # (S, K)
    return H @ coeff.T


def sample_periods(solution, xi):
    """Period realizations T0 * a(xi) from an autonomous solution."""
    if solution.kind != "autonomous":
        raise ValueError("period sampling needs an autonomous solution")
    H = solution.coeffs.basis.eval(np.atleast_2d(xi))
    return solution.nominal_period * (H @ solution.scale_coeffs.blocks)


# ---------------------------------------------------------------------------
# scalar metrics


def thd(values, closed=True):
    """Total harmonic distortion of one uniformly sampled period.

    ``values`` spans exactly one period; with ``closed`` the final sample
    repeats the first (trajectory convention) and is dropped. The DC bin
    is excluded; the result is the RMS of harmonics 2.. relative to the
    fundamental magnitude.
    """
    v = np.asarray(values, dtype=float)
    if closed:
        v = v[..., :-1]
    spec = np.fft.rfft(v, axis=-1)
    fund = np.abs(spec[..., 1])
    rest = np.sqrt(np.sum(np.abs(spec[..., 2:]) ** 2, axis=-1))
    norm = np.sqrt(np.mean(v**2, axis=-1)) * v.shape[-1]
    bad = fund < 1e-12 * np.maximum(norm, 1e-300)
    if np.any(bad):
        raise ValueError("fundamental amplitude is numerically zero")
    return rest / fund


def avg_power(v, i, times):
    """Mean of v*i over the spanned interval (trapezoidal quadrature).

    Positive values mean power flowing in the direction of the current
    convention used by the caller; pass the source branch current negated
    to report power delivered by a source as positive.
    """
    v = np.asarray(v, dtype=float)
    i = np.asarray(i, dtype=float)
    times = np.asarray(times, dtype=float)
    span = times[-1] - times[0]
    return np.trapezoid(v * i, times, axis=-1) / span


def ks_statistic(a, b):
    """Two-sample Kolmogorov-Smirnov statistic (empirical CDF distance)."""
    return float(scipy.stats.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


# ---------------------------------------------------------------------------
# metric distributions


@dataclass
class MetricDistribution:
    name: str
    samples: np.ndarray
    bin_edges: np.ndarray
    density: np.ndarray
    kde_grid: np.ndarray | None
    kde_density: np.ndarray | None
    mean: float
    std: float

    def histogram_mass(self):
        return float(np.sum(self.density * np.diff(self.bin_edges)))


def _freedman_diaconis_edges(samples):
    s = np.sort(samples)
    iqr = s[int(0.75 * (s.size - 1))] - s[int(0.25 * (s.size - 1))]
    if iqr <= 0:
        n_bins = max(int(np.ceil(np.log2(s.size) + 1)), 1)
    else:
        width = 2.0 * iqr / s.size ** (1.0 / 3.0)
        n_bins = max(int(np.ceil((s[-1] - s[0]) / width)), 1)
    return np.histogram_bin_edges(samples, bins=min(n_bins, 512))


def distribution_from_samples(name, samples):
    """Freedman-Diaconis histogram plus Gaussian-kernel density estimate."""
    samples = np.asarray(samples, dtype=float)
    mean = float(samples.mean())
    std = float(samples.std(ddof=1)) if samples.size > 1 else 0.0
    if samples.max() - samples.min() <= 0:
        edges = np.array([samples[0] - 0.5, samples[0] + 0.5])
        return MetricDistribution(
            name, samples, edges, np.array([1.0]), None, None, mean, 0.0
        )
    edges = _freedman_diaconis_edges(samples)
    density, _ = np.histogram(samples, bins=edges, density=True)
    kde = scipy.stats.gaussian_kde(samples)
    bw = kde.covariance_factor() * samples.std(ddof=1)
    grid = np.linspace(samples.min() - 6 * bw, samples.max() + 6 * bw, 512)
    return MetricDistribution(
        name, samples, edges, density, grid, kde(grid), mean, std
    )


def metric_distribution(
    solution,
    metric,
    n_samples,
    seed,
    state=None,
    v_state=None,
    i_state=None,
    power_sign=1.0,
):
    """Distribution of a scalar metric sampled from the chaos surrogate.

    ``metric`` is "period", "thd", "power", or a callable mapping a
    waveform matrix (P, n) and the time grid to a scalar. Sampling costs
    no circuit solves; parameters are drawn with the same counter-based
    stream as the Monte Carlo driver.
    """
    if n_samples < 1000:
        raise ValueError("metric distributions need at least 1000 samples")
    basis = solution.coeffs.basis
    # distribution kinds are encoded in the basis families
    dists = [_FamilyDist(f) for f in basis.families]
    xi = draw_standardized(dists, seed, n_samples)
    if metric == "period":
        vals = sample_periods(solution, xi)
        return distribution_from_samples("period", vals)
    if metric == "thd":
        if state is None:
            raise ValueError("thd metric needs a state index")
        waves = surrogate_waveforms(solution, xi, state)
        return distribution_from_samples("thd", thd(waves, closed=True))
    if metric == "power":
        if v_state is None or i_state is None:
            raise ValueError("power metric needs v_state and i_state")
        v = surrogate_waveforms(solution, xi, v_state)
        i = surrogate_waveforms(solution, xi, i_state)
        vals = power_sign * avg_power(v, i, solution.trajectory.times)
        return distribution_from_samples("power", vals)
    if callable(metric):
        K = basis.size
        P = solution.trajectory.times.size
        coeff = solution.trajectory.states.reshape(P, K, -1)
        H = basis.eval(xi)  # (S, K)
        vals = np.array(
            [metric(np.einsum("k,pkn->pn", H[s], coeff), solution.trajectory.times)
             for s in range(n_samples)]
        )
        return distribution_from_samples(getattr(metric, "__name__", "custom"), vals)
    raise ValueError(f"unknown metric {metric!r}")


class _FamilyDist:
    """Adapter giving draw_standardized the distribution kind of a family."""

    def __init__(self, family):
        self.kind = "gaussian" if family == "hermite" else "uniform"


# ---------------------------------------------------------------------------
# chaos vs Monte Carlo comparison


@dataclass
class UqReport:
    """Side-by-side statistics of a chaos solution and its MC baseline.

    Waveform deltas are infinity norms over the shared grid, normalized by
    each state's peak mean magnitude. ``period`` carries the oscillator
    period statistics and their relative deltas (None for forced runs);
    ``metric_distributions`` maps metric names to their sampled
    distributions.
    """

    kind: str
    times: np.ndarray
    chaos_mean: np.ndarray
    chaos_std: np.ndarray
    mc_mean: np.ndarray
    mc_std: np.ndarray
    max_rel_mean_delta: float
    max_rel_std_delta: float
    mc_samples: int
    period: dict | None = None
    metric_distributions: dict = None

    normalization = "per-state peak of the Monte Carlo mean waveform"

    def summary(self):
        out = {
            "kind": self.kind,
            "max_rel_mean_delta": self.max_rel_mean_delta,
            "max_rel_std_delta": self.max_rel_std_delta,
            "normalization": self.normalization,
            "mc_samples": self.mc_samples,
        }
        if self.period is not None:
            out.update({f"period_{k}": v for k, v in self.period.items()})
        return out


def build_uq_report(solution, mc_run, surrogate_periods=None):
    """Compare a converged chaos solution against a Monte Carlo run.

    Both must come from the same circuit on the same grid. For oscillator
    runs, pass an independent surrogate period sample of the same size as
    the MC run to get the distribution (KS) comparison.
    """
    ws = waveform_stats(solution)
    mc_mean, mc_std = mc_run.waveform_mean_std()
    if ws.mean.shape != mc_mean.shape:
        raise ValueError("chaos and Monte Carlo runs use different grids")
    peak = np.max(np.abs(mc_mean), axis=0)
    peak = np.where(peak > 0, peak, 1.0)
    period = None
    if solution.kind == "autonomous":
        pm, ps = mc_run.scalar_stats(mc_run.period)
        sm, ss = solution.period_moments()
        period = {
            "mean_chaos": float(sm),
            "mean_mc": pm,
            "std_chaos": float(ss),
            "std_mc": ps,
            "mean_rel_delta": abs(sm - pm) / pm,
            "std_rel_delta": abs(ss - ps) / ps,
        }
        if surrogate_periods is not None:
            period["ks_statistic"] = ks_statistic(
                surrogate_periods, np.asarray(mc_run.period)[mc_run.ok()]
            )
    return UqReport(
        kind=solution.kind,
        times=ws.times,
        chaos_mean=ws.mean,
        chaos_std=ws.std,
        mc_mean=mc_mean,
        mc_std=mc_std,
        max_rel_mean_delta=float(np.max(np.abs(ws.mean - mc_mean) / peak)),
        max_rel_std_delta=float(np.max(np.abs(ws.std - mc_std) / peak)),
        mc_samples=mc_run.n_samples,
        period=period,
        metric_distributions={},
    )
