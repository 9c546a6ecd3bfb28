"""Command-line driver: batch analyses with reproducible report files.

Usage::

    pssuq <command> --netlist <path> --config <path> --out <dir>
          [--seed N] [--order p] [--mode coupled|decoupled]

Commands: ``pss-forced``, ``pss-osc`` (deterministic solves), ``st-forced``,
``st-osc`` (intrusive chaos solves), ``mc`` (Monte Carlo baseline),
``compare`` (chaos vs Monte Carlo deltas), ``convergence`` (error vs chaos
order), ``speedup`` (coupled vs decoupled linear-solve timing). The config
file is JSON; see the README for the schema. Every run writes
``manifest.json`` (inputs, versions, seeds, wall-clock per phase, output
hashes) and ``summary.txt`` next to the analysis-specific CSV/JSON files.

Exit codes: 0 success, 2 config/netlist problems, 3 solver
non-convergence, 4 internal errors.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    build_uq_report,
    draw_standardized,
    metric_distribution,
    monte_carlo,
    sample_periods,
    waveform_stats,
)
from .circuit import CircuitError
from .gpc import build_basis, select_testing_nodes, tensor_rule
from .netlist import NetlistError, parse_netlist
from .shooting import (
    OscillationError,
    PhaseCondition,
    estimate_period,
    solve_autonomous,
    solve_forced,
)
from .stpss import (
    assemble_autonomous,
    assemble_forced,
    shoot_autonomous,
    shoot_forced,
)
from .transient import (
    ConvergenceError,
    NewtonOptions,
    integrate,
    scheme_by_name,
    transition_chain,
)

COMMANDS = (
    "pss-forced",
    "pss-osc",
    "st-forced",
    "st-osc",
    "mc",
    "compare",
    "convergence",
    "speedup",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INTERNAL = 4


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "gpc_order": 3,
    "scheme": "trapezoidal",
    "steps_per_period": 200,
    "shooting_tol": 1e-5,
    "newton_tol": 1e-9,
    "mode": "decoupled",
    "seed": 0,
    "mc_samples": 1000,
    "metric_samples": 100_000,
    "metrics": [],
}


def load_config(path, overrides=None):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = dict(_DEFAULTS)
    cfg.update(raw)
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if cfg["gpc_order"] < 0:
        raise ConfigError("gpc_order must be >= 0")
    if cfg["steps_per_period"] < 16:
        raise ConfigError("steps_per_period must be >= 16")
    if cfg["mode"] not in ("coupled", "decoupled"):
        raise ConfigError("mode must be 'coupled' or 'decoupled'")
    try:
        scheme_by_name(cfg["scheme"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _require(cfg, key, command):
    if cfg.get(key) is None:
        raise ConfigError(f"{command} needs config field {key!r}")
    return cfg[key]


class Reporter:
    """Collects output files, hashes, phase timings, and summary lines."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = {}
        self.timings = {}
        self.lines = []

    def say(self, text):
        self.lines.append(text)

    def phase(self, name):
        reporter = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                reporter.timings[name] = time.perf_counter() - self.t0

        return _Timer()

    def write_text(self, name, text):
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self.files[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def write_json(self, name, obj):
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name, header, rows):
        out = [",".join(header)]
        for row in rows:
            out.append(",".join(_fmt(v) for v in row))
        return self.write_text(name, "\n".join(out) + "\n")

    def finish(self, command, netlist_path, config):
        summary = "\n".join(self.lines) + "\n"
        self.write_text("summary.txt", summary)
        manifest = {
            "command": command,
            "netlist": str(netlist_path) if netlist_path else None,
            "netlist_sha256": _file_hash(netlist_path) if netlist_path else None,
            "config": config,
            "versions": {
                "pssuq": __version__,
                "python": sys.version.split()[0],
                "numpy": np.__version__,
            },
            "seed": config.get("seed"),
            "timings_s": self.timings,
            "outputs": self.files,
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return manifest


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# shared pieces


def _load_circuit(netlist_path):
    p = Path(netlist_path)
    if not p.exists():
        raise ConfigError(f"netlist file not found: {netlist_path}")
    return parse_netlist(p.read_text(encoding="utf-8"))


def _newton(cfg):
    return NewtonOptions(tol=cfg["newton_tol"])


def _basis_and_testing(circuit, order):
    dists = [s for _, s in circuit.random_params]
    if not dists:
        raise ConfigError("circuit declares no random parameters")
    basis = build_basis(dists, order)
    testing = select_testing_nodes(basis, tensor_rule(basis, order + 1))
    return basis, testing


def _phase_setup(circuit, cfg):
    idx = circuit.state_index(str(_require(cfg, "phase_state", "oscillator analysis")))
    nominal = circuit.realize_nominal()
    est = estimate_period(nominal, idx)
    value = cfg.get("phase_value")
    phase = PhaseCondition(idx, est.level if value is None else float(value))
    return nominal, est, phase


def _waveform_stats_rows(times, mean, std, names):
    header = ["time"] + [f"mean[{u}]" for u in names] + [f"std[{u}]" for u in names]
    rows = [[t, *mean[k], *std[k]] for k, t in enumerate(times)]
    return header, rows


def _write_distribution(rep, name, dist):
    rep.write_csv(
        f"metric_{name}_hist.csv",
        ["bin_lo", "bin_hi", "density"],
        [
            [dist.bin_edges[i], dist.bin_edges[i + 1], dist.density[i]]
            for i in range(dist.density.size)
        ],
    )
    if dist.kde_grid is not None:
        rep.write_csv(
            f"metric_{name}_kde.csv",
            ["value", "density"],
            list(zip(dist.kde_grid, dist.kde_density)),
        )
    rep.say(f"metric {name}: mean {dist.mean:.6g}, std {dist.std:.6g}")


def _st_metrics(rep, circuit, cfg, sol):
    for metric in cfg["metrics"]:
        kw = {}
        if metric == "thd":
            kw["state"] = circuit.state_index(str(_require(cfg, "output_state", "thd metric")))
        elif metric == "power":
            kw["v_state"] = circuit.state_index(str(_require(cfg, "v_state", "power metric")))
            kw["i_state"] = circuit.state_index(str(_require(cfg, "i_state", "power metric")))
            kw["power_sign"] = float(cfg.get("power_sign", 1.0))
        dist = metric_distribution(
            sol, metric, cfg["metric_samples"], cfg["seed"] + 1, **kw
        )
        _write_distribution(rep, metric, dist)


# ---------------------------------------------------------------------------
# commands


def _cmd_pss_forced(rep, circuit, cfg):
    period = cfg.get("period") or circuit.fundamental_period()
    with rep.phase("solve"):
        sol = solve_forced(
            circuit.realize_nominal(),
            period,
            tol=cfg["shooting_tol"],
            scheme=scheme_by_name(cfg["scheme"]),
            n_steps=cfg["steps_per_period"],
            newton=_newton(cfg),
        )
    rep.write_json("solution.json", sol.summary())
    sol.trajectory.to_csv(rep.out / "trajectory.csv", circuit.state_names)
    rep.files["trajectory.csv"] = _file_hash(rep.out / "trajectory.csv")
    rep.say(
        f"forced PSS: period {period:.6g} s, {sol.iterations} iterations, "
        f"residual {float(sol.residual_norm):.3e}"
    )


def _cmd_pss_osc(rep, circuit, cfg):
    nominal, est, phase = _phase_setup(circuit, cfg)
    with rep.phase("solve"):
        sol = solve_autonomous(
            nominal,
            phase,
            est.period,
            est.y0,
            tol=cfg["shooting_tol"],
            scheme=scheme_by_name(cfg["scheme"]),
            n_steps=cfg["steps_per_period"],
            newton=_newton(cfg),
        )
    rep.write_json("solution.json", sol.summary())
    sol.trajectory.to_csv(rep.out / "trajectory.csv", circuit.state_names)
    rep.files["trajectory.csv"] = _file_hash(rep.out / "trajectory.csv")
    rep.say(
        f"oscillator PSS: period {float(sol.period):.6g} s "
        f"(estimate {est.period:.6g} s), {sol.iterations} iterations"
    )


def _solve_st_forced(circuit, cfg):
    basis, testing = _basis_and_testing(circuit, cfg["gpc_order"])
    system = assemble_forced(circuit, basis, testing, period=cfg.get("period"))
    sol = shoot_forced(
        system,
        tol=cfg["shooting_tol"],
        mode=cfg["mode"],
        scheme=scheme_by_name(cfg["scheme"]),
        n_steps=cfg["steps_per_period"],
        newton=_newton(cfg),
    )
    return system, sol


def _cmd_st_forced(rep, circuit, cfg):
    with rep.phase("solve"):
        system, sol = _solve_st_forced(circuit, cfg)
    _write_st_outputs(rep, circuit, cfg, system, sol)
    rep.say(
        f"chaos forced PSS: order {cfg['gpc_order']} ({system.K} basis functions), "
        f"{sol.iterations} iterations, residual {sol.residual_norm:.3e}, mode {sol.mode}"
    )
    _st_metrics(rep, circuit, cfg, sol)


def _solve_st_osc(circuit, cfg):
    nominal, est, phase = _phase_setup(circuit, cfg)
    basis, testing = _basis_and_testing(circuit, cfg["gpc_order"])
    det = solve_autonomous(
        nominal, phase, est.period, est.y0,
        tol=cfg["shooting_tol"], scheme=scheme_by_name(cfg["scheme"]),
        n_steps=cfg["steps_per_period"], newton=_newton(cfg),
    )
    system = assemble_autonomous(circuit, basis, testing, float(det.period))
    guess = np.zeros((system.K, system.n))
    guess[0] = det.y
    scale = np.zeros(system.K)
    scale[0] = 1.0
    sol = shoot_autonomous(
        system, phase, guess, scale,
        tol=cfg["shooting_tol"], mode=cfg["mode"],
        scheme=scheme_by_name(cfg["scheme"]), n_steps=cfg["steps_per_period"],
        newton=_newton(cfg),
    )
    return system, sol, phase


def _cmd_st_osc(rep, circuit, cfg):
    with rep.phase("solve"):
        system, sol, phase = _solve_st_osc(circuit, cfg)
    _write_st_outputs(rep, circuit, cfg, system, sol)
    mean, std = sol.period_moments()
    rep.say(
        f"chaos oscillator PSS: period mean {mean:.6g} s, std {std:.6g} s, "
        f"{sol.iterations} iterations, mode {sol.mode}"
    )
    dist = metric_distribution(sol, "period", cfg["metric_samples"], cfg["seed"] + 1)
    _write_distribution(rep, "period", dist)
    _st_metrics(rep, circuit, cfg, sol)


def _write_st_outputs(rep, circuit, cfg, system, sol):
    rep.write_json("solution.json", sol.summary())
    rep.write_text("testing_nodes.json", system.testing.to_json() + "\n")
    sol.waveform_csv(rep.out / "coefficients.csv", circuit.state_names)
    rep.files["coefficients.csv"] = _file_hash(rep.out / "coefficients.csv")
    ws = waveform_stats(sol)
    header, rows = _waveform_stats_rows(ws.times, ws.mean, ws.std, circuit.state_names)
    rep.write_csv("waveform_stats.csv", header, rows)


def _cmd_mc(rep, circuit, cfg):
    kind = cfg.get("analysis_kind") or ("autonomous" if circuit.is_autonomous else "forced")
    with rep.phase("monte_carlo"):
        run = monte_carlo(
            circuit,
            kind,
            cfg["mc_samples"],
            cfg["seed"],
            period=cfg.get("period"),
            phase_index=(
                circuit.state_index(str(cfg["phase_state"]))
                if cfg.get("phase_state") is not None
                else None
            ),
            tol=cfg["shooting_tol"],
            scheme=scheme_by_name(cfg["scheme"]),
            n_steps=cfg["steps_per_period"],
            newton=_newton(cfg),
        )
    mean, std = run.waveform_mean_std()
    header, rows = _waveform_stats_rows(run.times, mean, std, circuit.state_names)
    rep.write_csv("mc_waveform_stats.csv", header, rows)
    info = {
        "samples": run.n_samples,
        "seed": run.seed,
        "failures": int(np.sum(run.failed)),
        "kind": kind,
    }
    if kind == "autonomous":
        pm, ps = run.scalar_stats(run.period)
        info["period_mean"] = pm
        info["period_std"] = ps
        rep.write_csv(
            "mc_periods.csv", ["sample", "period"],
            [[i, p] for i, p in enumerate(np.asarray(run.period))],
        )
        rep.say(f"Monte Carlo ({kind}): period mean {pm:.6g} s, std {ps:.6g} s")
    else:
        rep.say(f"Monte Carlo ({kind}): {run.n_samples} samples, {info['failures']} failures")
    rep.write_json("mc.json", info)
    return run


def _cmd_compare(rep, circuit, cfg):
    kind = cfg.get("analysis_kind") or ("autonomous" if circuit.is_autonomous else "forced")
    if kind == "forced":
        with rep.phase("chaos_solve"):
            system, sol = _solve_st_forced(circuit, cfg)
    else:
        with rep.phase("chaos_solve"):
            system, sol, _ = _solve_st_osc(circuit, cfg)
    _write_st_outputs(rep, circuit, cfg, system, sol)
    run = _cmd_mc(rep, circuit, cfg)

    surrogate = None
    if kind == "autonomous":
        # independent equal-size surrogate sample for the CDF comparison
        dists = [s for _, s in circuit.random_params]
        xi_s = draw_standardized(dists, cfg["seed"] + 2, int(np.sum(run.ok())))
        surrogate = sample_periods(sol, xi_s)
    report = build_uq_report(sol, run, surrogate_periods=surrogate)
    rep.say(
        f"chaos vs Monte Carlo: max relative mean delta "
        f"{report.max_rel_mean_delta:.3e}, std delta {report.max_rel_std_delta:.3e}"
    )
    if report.period is not None:
        p = report.period
        rep.say(
            f"period: chaos {p['mean_chaos']:.6g} +- {p['std_chaos']:.3g} s, "
            f"MC {p['mean_mc']:.6g} +- {p['std_mc']:.3g} s, "
            f"KS {p.get('ks_statistic', float('nan')):.4f}"
        )
    rep.write_json("compare.json", report.summary())


def _cmd_convergence(rep, circuit, cfg):
    orders = cfg.get("orders") or list(range(1, 7))
    if max(orders) > 6:
        raise ConfigError("convergence sweep caps at order 6")
    with rep.phase("sweep"):
        rows = convergence_sweep(circuit, cfg, orders)
    rep.write_csv("convergence.csv", ["order", "n_basis", "rel_error"], rows)
    for p, K, err in rows:
        rep.say(f"order {p} (K={K}): relative error vs reference {err:.3e}")


def convergence_sweep(circuit, cfg, orders):
    """Coefficient error against the highest requested order.

    Solves the forced chaos problem at each order on a shared grid; the
    error is the relative infinity norm over the coefficient entries the
    two index sets share (lower orders prefix the reference ordering).
    """
    solutions = {}
    for p in sorted(set(orders)):
        c2 = dict(cfg)
        c2["gpc_order"] = p
        _, sol = _solve_st_forced(circuit, c2)
        solutions[p] = sol.coeffs.blocks
    p_ref = max(solutions)
    ref = solutions[p_ref]
    scale = np.max(np.abs(ref))
    rows = []
    for p in sorted(solutions):
        blocks = solutions[p]
        padded = np.zeros_like(ref)
        padded[: blocks.shape[0]] = blocks
        err = np.max(np.abs(padded - ref)) / scale
        rows.append([p, blocks.shape[0], err])
    return rows


def _cmd_speedup(rep, circuit, cfg):
    opts = cfg.get("speedup") or {}
    with rep.phase("sweep"):
        rows = speedup_sweep(
            n_nodes=int(opts.get("n", 100)),
            orders=opts.get("orders") or [1, 2, 3, 4],
            dim=int(opts.get("dim", 4)),
            n_steps=int(opts.get("steps", 40)),
            repeats=int(opts.get("repeats", 3)),
            seed=cfg["seed"],
        )
    rep.write_csv(
        "speedup.csv", ["order", "n_basis", "t_coupled_s", "t_decoupled_s", "ratio"], rows
    )
    for p, K, tc, td, ratio in rows:
        rep.say(f"order {p} (K={K}): coupled {tc:.4g} s, decoupled {td:.4g} s, ratio {ratio:.1f}")
    ratios = [r[4] for r in rows]
    if len(ratios) > 1 and all(b > a for a, b in zip(ratios, ratios[1:])):
        rep.say("decoupling speedup grows with the basis size")


def synthetic_ladder(n_nodes, dim):
    """Linear RC ladder with ``dim`` randomized resistors (n_nodes states)."""
    lines = ["* synthetic linear ladder network"]
    for j in range(dim):
        kind = "uniform(900, 1100)" if j % 2 else "gauss(1000, 50)"
        lines.append(f".param p{j} = {kind}")
    slots = np.linspace(1, n_nodes - 1, dim).astype(int)
    lines.append("I1 0 n1 DC 1m")
    for k in range(1, n_nodes):
        value = "{p%d}" % np.where(slots == k)[0][0] if k in slots else "1k"
        lines.append(f"R{k} n{k} n{k + 1} {value}")
        lines.append(f"C{k} n{k} 0 1u")
    lines.append(f"C{n_nodes} n{n_nodes} 0 1u")
    lines.append(f"R{n_nodes} n{n_nodes} 0 1k")
    return parse_netlist("\n".join(lines))


def speedup_sweep(n_nodes=100, orders=(1, 2, 3, 4), dim=4, n_steps=40, repeats=3, seed=0):
    """Per-iteration linear-solve times, coupled vs decoupled, vs basis size.

    Builds the per-node shooting Jacobians of a synthetic linear network
    once per order (outside the timed region), then times (a) one dense
    solve of the coupled system assembled by the congruence transform and
    (b) the K independent node solves plus the two V transforms. BLAS
    threading is pinned to one thread when threadpoolctl is available so
    the scaling is not distorted by the larger solve parallelizing better.
    """
    circuit = synthetic_ladder(n_nodes, dim)
    n = circuit.n_states
    rng = np.random.default_rng(seed)
    rows = []
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - present in the supported env
        import contextlib

        threadpool_limits = lambda limits: contextlib.nullcontext()
    for p in orders:
        basis, testing = _basis_and_testing(circuit, p)
        K = basis.size
        system = assemble_forced(circuit, basis, testing, period=1e-3)
        # the network is linear, so the node systems integrate independently
        node_sys = system.node_dae()
        traj = integrate(
            node_sys, np.zeros((K, n)), 0.0, 1e-3, n_steps=n_steps, stabilized_start=True
        )
        M_nodes, _ = transition_chain(node_sys, traj)
        J_nodes = M_nodes - np.eye(n)
        g = rng.standard_normal(n * K)

        # coupled Jacobian via the congruence transform (not timed); filled
        # block-row-wise to avoid a second (nK)^2 temporary
        V, Vi = testing.vandermonde, testing.v_inv
        weights = np.einsum("ik,kj->ijk", Vi, V)  # (K, K, K)
        J_big = np.empty((n * K, n * K))
        flat_nodes = J_nodes.reshape(K, n * n)
        for i in range(K):
            row = (weights[i] @ flat_nodes).reshape(K, n, n)  # (K, n, n)
            J_big[i * n : (i + 1) * n] = np.moveaxis(row, 0, 1).reshape(n, n * K)

        with threadpool_limits(limits=1):
            t_c = min(
                _timed(lambda: np.linalg.solve(J_big, g)) for _ in range(repeats)
            )

            def decoupled():
                g_nodes = V @ g.reshape(K, n)
                delta = np.linalg.solve(J_nodes, g_nodes[..., None])[..., 0]
                return (Vi @ delta).ravel()

            t_d = min(_timed(decoupled) for _ in range(repeats))
        rows.append([p, K, t_c, t_d, t_c / t_d])
    return rows


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# entry point


_RUNNERS = {
    "pss-forced": _cmd_pss_forced,
    "pss-osc": _cmd_pss_osc,
    "st-forced": _cmd_st_forced,
    "st-osc": _cmd_st_osc,
    "mc": _cmd_mc,
    "compare": _cmd_compare,
    "convergence": _cmd_convergence,
    "speedup": _cmd_speedup,
}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="pssuq",
        description="periodic steady-state analysis with polynomial-chaos UQ",
    )
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--netlist", help="netlist file (not needed for speedup)")
    ap.add_argument("--config", required=True, help="JSON analysis configuration")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override config seed")
    ap.add_argument("--order", type=int, default=None, help="override chaos order")
    ap.add_argument("--mode", choices=("coupled", "decoupled"), default=None)
    return ap


def run(command, netlist_path, config_path, out_dir, seed=None, order=None, mode=None):
    """Programmatic entry point; returns the process exit code."""
    t_start = time.perf_counter()
    try:
        cfg = load_config(
            config_path, {"seed": seed, "gpc_order": order, "mode": mode}
        )
        circuit = None
        if command != "speedup":
            if not netlist_path:
                raise ConfigError(f"{command} needs --netlist")
            circuit = _load_circuit(netlist_path)
    except (ConfigError, NetlistError, CircuitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    rep = Reporter(out_dir)
    try:
        _RUNNERS[command](rep, circuit, cfg)
    except (ConvergenceError, OscillationError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        rep.say(f"FAILED: {exc}")
        rep.finish(command, netlist_path, cfg)
        return EXIT_SOLVER
    except (ConfigError, NetlistError, CircuitError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    rep.timings["total"] = time.perf_counter() - t_start
    rep.finish(command, netlist_path, cfg)
    print("\n".join(rep.lines))
    print(f"outputs written to {rep.out}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(
        args.command,
        args.netlist,
        args.config,
        args.out,
        seed=args.seed,
        order=args.order,
        mode=args.mode,
    )


def entry():  # console script
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
