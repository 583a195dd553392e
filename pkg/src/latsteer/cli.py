"""Command-line front end.

Subcommands: simulate, rank, generic-check, counterexample, steer,
recurrence, bounds. Every command reads a flat key=value config, writes
summary.json (plus CSV files where data is produced) into --out, and
echoes the resolved config in the JSON for auditability. Exit codes:
0 success, 1 verdict fail / not found, 2 usage or config error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy.linalg import null_space

from .analysis import conservation_report, verify_compactness
from .brackets import (
    degeneracy_scan,
    genericity_determinant,
    kalman_rank,
    lie_rank,
)
from .configio import (
    Config,
    ConfigError,
    REQUIRED,
    dump_json,
    format_float,
    parse_config_file,
    parse_control_csv,
    policy_from_config,
    potential_from_config,
    state_from_config,
    system_from_config,
    write_control_csv,
    write_trajectory_csv,
)
from .counterexamples import (
    Plane,
    build_nonperiodic_trimer,
    build_periodic_degenerate_trimer,
    invariant_plane_residual,
)
from .dynamics import (
    ControlSignal,
    NumericalFailure,
    controlled_flow,
    free_flow_trajectory,
)
from .potentials import toda
from .steering import (
    ConjugatedFlow,
    ConstantLeg,
    FreeFlow,
    Pulse,
    execute_plan,
    plan_steering,
    recurrence_search,
)
from .system import LatticeConfig, LatticeSystem, State

DEFAULT_SEED = 20240501

COUNTEREXAMPLE_CASES = ("periodic-quartic", "open-harmonic", "toda-negative")


def _prepare_out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory '{out}' is not writable: {exc}") from None
    return out


def _resolve_seed(args, cfg: Config) -> int:
    if args.seed is not None:
        return int(args.seed)
    return cfg.int("seed", DEFAULT_SEED)


def _echo(cfg: Config, seed: int) -> dict:
    echo = cfg.echo()
    echo["seed"] = str(seed)
    return echo


def _finish(outdir: Path, payload: dict, line: str) -> int:
    dump_json(outdir / "summary.json", payload)
    print(f"{line}  [{outdir / 'summary.json'}]")
    return 0 if payload["verdict"] == "pass" else 1


# ---------------------------------------------------------------------------
# simulate

def _padded_signal(signal: ControlSignal, T: float) -> ControlSignal:
    horizon = signal.horizon
    if T < horizon - 1e-9 * (1.0 + horizon):
        raise ConfigError(
            f"T={T:g} is shorter than the control horizon {horizon:g}"
        )
    if T <= horizon + 1e-9 * (1.0 + horizon):
        return signal
    per_site = {
        site: list(segs) + [(T - horizon, 0.0)]
        for site, segs in zip(signal.sites, signal.segments)
    }
    return ControlSignal.from_segments(per_site)


def cmd_simulate(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    system = system_from_config(cfg)
    x0 = state_from_config(cfg, system.n)
    policy = policy_from_config(cfg)

    signal = None
    if args.control is not None:
        if "u" in cfg:
            raise ConfigError("give either --control or the 'u' config key, not both")
        signal = parse_control_csv(args.control)
    elif "u" in cfg:
        T_u = cfg.float("T", REQUIRED)
        site = cfg.int("u_site", system.config.control_sites[0])
        signal = ControlSignal.constant(cfg.float("u"), T_u, site=site)

    T = cfg.float("T", None)
    if signal is None:
        if T is None:
            raise ConfigError("simulate needs a horizon: set T or give a control")
        if not T > 0:
            raise ConfigError(f"T must be positive, got {T:g}")
        traj = free_flow_trajectory(system, x0, T, policy)
    else:
        if T is not None:
            signal = _padded_signal(signal, T)
        traj = controlled_flow(system, x0, signal, policy)

    report = conservation_report(traj, system)
    write_trajectory_csv(outdir / "trajectory.csv", traj)
    final = traj.final_state()
    payload = {
        "command": "simulate",
        "config": _echo(cfg, seed),
        "conservation": report.to_dict(),
        "files": {"trajectory": "trajectory.csv"},
        "final_state": {"q": final.q.tolist(), "p": final.p.tolist()},
        "samples": len(traj),
        "verdict": "pass",
    }
    return _finish(
        outdir,
        payload,
        f"simulate T={report.horizon:g} |dH|={report.energy_drift:.3e} "
        f"|dP-injected|={report.momentum_defect:.3e}",
    )


# ---------------------------------------------------------------------------
# rank

def cmd_rank(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    system = system_from_config(cfg)
    x = state_from_config(cfg, system.n)
    depth = cfg.int("depth", None)
    tol = cfg.float("tol", 1e-8)

    report = lie_rank(x, system, depth=depth, tol=tol)
    try:
        kal = kalman_rank(system, site=system.config.control_sites[0])
    except ValueError:
        kal = None  # force is nonlinear; the linear oracle does not apply

    full = 2 * system.n
    verdict = "pass" if report.rank == full else "fail"
    payload = {
        "command": "rank",
        "config": _echo(cfg, seed),
        "full_rank": full,
        "kalman_rank": kal,
        "rank_report": report.to_dict(),
        "verdict": verdict,
    }
    return _finish(outdir, payload, f"rank {report.rank}/{full} verdict={verdict}")


# ---------------------------------------------------------------------------
# generic-check

def cmd_generic_check(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    pot = potential_from_config(cfg)
    lo = cfg.float("grid_lo", -10.0)
    hi = cfg.float("grid_hi", 10.0)
    num = cfg.int("grid_num", 401)

    scan = degeneracy_scan(pot, lo=lo, hi=hi, num=num)
    det = None
    if "a" in cfg and "d" in cfg:
        det = genericity_determinant(pot, cfg.float("a"), cfg.float("d"))

    verdict = "pass" if scan.classification == "generic" else "fail"
    payload = {
        "command": "generic-check",
        "config": _echo(cfg, seed),
        "degeneracy": scan.to_dict(),
        "determinant_sample": det,
        "verdict": verdict,
    }
    return _finish(
        outdir,
        payload,
        f"generic-check {pot.kind}: {scan.classification} "
        f"(shift={scan.shift:g}, sign={scan.sign:+d}) verdict={verdict}",
    )


# ---------------------------------------------------------------------------
# counterexample

def _on_plane_state(plane: Plane, rng: np.random.Generator) -> State:
    rows = plane.rows
    part, *_ = np.linalg.lstsq(rows, plane.offsets, rcond=None)
    basis = null_space(rows)
    for _ in range(64):
        z = rng.uniform(-0.5, 0.5, size=basis.shape[1])
        x = part + basis @ z
        st = State.from_vector(x)
        # keep the first bond visibly stretched so drift terms do not hide
        if abs(st.q[0] - st.q[1]) >= 0.3:
            return st
    return State.from_vector(part + basis @ rng.uniform(-0.5, 0.5, basis.shape[1]))


def _random_signal(rng: np.random.Generator, T: float, site: int) -> ControlSignal:
    durations = rng.uniform(0.5, 1.5, size=5)
    durations *= T / durations.sum()
    values = rng.uniform(-1.0, 1.0, size=5)
    return ControlSignal.from_segments(
        {site: list(zip(durations, values))}
    )


def cmd_counterexample(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    case = args.case if args.case is not None else cfg.str("case", None)
    if case is None:
        raise ConfigError(
            "counterexample needs --case or a 'case' config key "
            f"(one of {', '.join(COUNTEREXAMPLE_CASES)})"
        )
    if case not in COUNTEREXAMPLE_CASES:
        raise ConfigError(f"unknown case '{case}'")

    shift = cfg.float("param.shift", 0.0)
    T = cfg.float("T", 10.0)
    policy = policy_from_config(cfg)
    rng = np.random.default_rng(seed)

    if case == "periodic-quartic":
        system, plane = build_periodic_degenerate_trimer([0.0, 0.0, 0.0, 1.0], shift)
        threshold, want_below = 1e-7, True
    elif case == "open-harmonic":
        system, plane = build_nonperiodic_trimer([0.0, 1.0], shift)
        threshold, want_below = 1e-7, True
    else:  # toda-negative: the analogous plane is NOT invariant for Toda
        system = LatticeSystem(
            LatticeConfig(n=3, topology="periodic", control_sites=(1,)), toda()
        )
        rows = np.zeros((2, 6))
        rows[0, 2], rows[0, 1] = 1.0, -1.0
        rows[1, 5], rows[1, 4] = 1.0, -1.0
        plane = Plane(rows=rows, offsets=np.zeros(2), label="toda-trimer-plane")
        threshold, want_below = 1e-3, False

    x0 = _on_plane_state(plane, rng)
    site = system.config.control_sites[0]
    signal = _random_signal(rng, T, site)
    residual = invariant_plane_residual(system, plane, x0, signal, T, policy)
    traj = controlled_flow(system, x0, signal, policy)
    write_trajectory_csv(outdir / "trajectory.csv", traj)

    ok = (residual < threshold) if want_below else (residual > threshold)
    verdict = "pass" if ok else "fail"
    payload = {
        "command": "counterexample",
        "case": case,
        "config": _echo(cfg, seed),
        "control": {
            "site": site,
            "segments": [[d, v] for d, v in signal.segments[0]],
        },
        "expected": "residual < threshold" if want_below else "residual > threshold",
        "files": {"trajectory": "trajectory.csv"},
        "initial_state": {"q": x0.q.tolist(), "p": x0.p.tolist()},
        "plane": plane.to_dict(),
        "residual": residual,
        "threshold": threshold,
        "verdict": verdict,
    }
    rel = "<" if want_below else ">"
    return _finish(
        outdir,
        payload,
        f"counterexample {case}: residual={residual:.3e} "
        f"(want {rel} {threshold:g}) verdict={verdict}",
    )


# ---------------------------------------------------------------------------
# steer

def _realized_segments(plan) -> list[tuple[float, float]]:
    segs: list[tuple[float, float]] = []
    for prim in plan.primitives:
        if isinstance(prim, FreeFlow):
            if prim.t > 0:
                segs.append((prim.t, 0.0))
        elif isinstance(prim, ConstantLeg):
            if prim.duration > 0:
                segs.append((prim.duration, prim.u))
        elif isinstance(prim, Pulse):
            segs.append((1.0 / prim.theta, prim.sign * prim.theta))
        elif isinstance(prim, ConjugatedFlow):
            theta = plan.theta
            segs.append((1.0 / theta, -prim.sign * theta))
            if prim.t > 0:
                segs.append((prim.t, 0.0))
            segs.append((1.0 / theta, +prim.sign * theta))
        else:  # GShift has no finite-control realization
            raise ValueError("plan contains exact bumps; no realized control exists")
    return segs


def cmd_steer(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    system = system_from_config(cfg)
    if "goal_q" not in cfg and "goal_p" not in cfg:
        raise ConfigError("steer needs goal_q and/or goal_p")
    start = state_from_config(cfg, system.n)
    goal = state_from_config(cfg, system.n, q_key="goal_q", p_key="goal_p")
    tol = cfg.float("tol", 1e-2)
    budget = cfg.int("budget", 2000)
    mode = cfg.str("mode", "idealized")
    theta = cfg.float("theta", 1e3)

    result = plan_steering(start, goal, tol, budget, system, mode=mode, theta=theta)
    files = {}
    if len(result.plan) > 0:
        traj = execute_plan(start, result.plan, system)
        write_trajectory_csv(outdir / "trajectory.csv", traj)
        files["trajectory"] = "trajectory.csv"
        if mode == "admissible":
            segs = _realized_segments(result.plan)
            if segs:
                site = system.config.control_sites[0]
                write_control_csv(
                    outdir / "control.csv",
                    ControlSignal.from_segments({site: segs}),
                )
                files["control"] = "control.csv"

    verdict = "pass" if result.success else "fail"
    payload = {
        "command": "steer",
        "config": _echo(cfg, seed),
        "files": files,
        "result": result.to_dict(),
        "verdict": verdict,
    }
    return _finish(
        outdir,
        payload,
        f"steer distance={result.distance:.3e} (tol {tol:g}) "
        f"primitives={len(result.plan)} verdict={verdict}",
    )


# ---------------------------------------------------------------------------
# recurrence

def cmd_recurrence(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    system = system_from_config(cfg)
    x = state_from_config(cfg, system.n)
    eps = cfg.float("eps", 0.05)
    tmin = cfg.float("tmin", 0.1)
    tmax = cfg.float("tmax", 500.0)
    policy = policy_from_config(cfg)

    result = recurrence_search(x, eps, tmin, tmax, system, policy)
    verdict = "pass" if result.found else "not-found"
    payload = {
        "command": "recurrence",
        "config": _echo(cfg, seed),
        "result": result.to_dict(),
        "verdict": verdict,
    }
    return _finish(
        outdir,
        payload,
        f"recurrence tau={result.tau:.4f} distance={result.distance:.3e} "
        f"(eps {eps:g}) verdict={verdict}",
    )


# ---------------------------------------------------------------------------
# bounds

def cmd_bounds(args) -> int:
    cfg = parse_config_file(args.config)
    outdir = _prepare_out(args)
    seed = _resolve_seed(args, cfg)
    pot = potential_from_config(cfg)
    c = cfg.float("c", REQUIRED)
    n = cfg.int("n", 3)
    Q = cfg.float("Q", 0.0)
    samples = cfg.int("samples", 10_000)
    B = cfg.float("B", None)
    inflate = cfg.float("inflate", 1.5)
    keep = samples if cfg.bool("write_samples", False) else 0

    report = verify_compactness(
        pot, c, Q, n,
        num_samples=samples, seed=seed, inflate=inflate, B=B, keep_samples=keep,
    )
    files = {}
    if report.samples is not None:
        cols = [f"q{j}" for j in range(1, n + 1)] + [f"p{j}" for j in range(1, n + 1)]
        lines = [",".join(cols)]
        for row in report.samples:
            lines.append(",".join(format_float(v) for v in row))
        (outdir / "samples.csv").write_bytes(("\n".join(lines) + "\n").encode("ascii"))
        files["samples"] = "samples.csv"

    verdict = "pass" if report.violations == 0 else "fail"
    payload = {
        "command": "bounds",
        "config": _echo(cfg, seed),
        "files": files,
        "report": report.to_dict(),
        "verdict": verdict,
    }
    box = report.box
    if box.empty:
        line = f"bounds: empty sublevel set (c={c:g}) verdict={verdict}"
    else:
        lo, hi = box.interval(Q)
        line = (
            f"bounds: bond |y| <= {box.bond_bound:.12g}, "
            f"box [{lo:.12g}, {hi:.12g}], |p| <= {box.momentum_bound:.12g}, "
            f"violations={report.violations}/{report.accepted} verdict={verdict}"
        )
    return _finish(outdir, payload, line)


# ---------------------------------------------------------------------------
# parser and entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latsteer",
        description=(
            "Simulate, test, and steer single-forced particle chains: "
            "accessibility ranks, degeneracy classification, invariant-plane "
            "counterexamples, steering plans, recurrence, and energy boxes."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument(
            "--seed", type=int, default=None,
            help=f"RNG seed (overrides the config; default {DEFAULT_SEED})",
        )
        p.add_argument("--out", default="latsteer-out", help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "integrate and write trajectory + summary")
    p.add_argument("--control", default=None,
                   help="control CSV (header duration,u<site>,...)")
    add("rank", cmd_rank, "accessibility rank at a state")
    add("generic-check", cmd_generic_check, "classify a potential's symmetry")
    p = add("counterexample", cmd_counterexample,
            "run an invariant-plane (or negative-control) case")
    p.add_argument("--case", choices=COUNTEREXAMPLE_CASES, default=None)
    add("steer", cmd_steer, "plan and execute a steering composition")
    add("recurrence", cmd_recurrence, "find a near-return of the free flow")
    add("bounds", cmd_bounds, "energy-box bound plus Monte-Carlo verification")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code in (0, None):
            return 0
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
