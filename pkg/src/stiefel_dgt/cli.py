"""Command-line harness: ``run``, ``compare``, ``audit`` and ``constants``.

Exit codes: 0 success (converged or max_iters), 2 configuration or parameter
error, 3 divergence, 4 failed audit, 5 missing snapshots.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path


from .algorithms import ALGORITHMS, AlgorithmConfig, run
from .config import ConfigError, ExperimentConfig, dump_config, load_config, preset, resolve, resolved_config
from .diagnostics import TraceWriter, fit_pl_constant, record
from .manifold import ParameterError, distance_to_stiefel, op_counter
from .merit import audit_inequalities, audit_records, with_gamma, with_mu
from .problems import DatasetError, DegenerateInstanceError, read_dmat, write_dmat

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_AUDIT, EXIT_SNAPSHOTS = 0, 2, 3, 4, 5


class MissingSnapshotError(FileNotFoundError):
    pass


def _thread_limit():
    raw = os.environ.get("STIEFEL_DGT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STIEFEL_DGT_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(args) -> ExperimentConfig:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("give exactly one of --config or --preset")
    cfg = load_config(args.config) if args.config else preset(args.preset)
    out = cfg.output
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        out = replace(out, dir=args.out)
    if getattr(args, "audit", False):
        out = replace(out, audit=True)
    if getattr(args, "audit_stride", None):
        out = replace(out, audit_stride=args.audit_stride)
    if getattr(args, "format", None):
        out = replace(out, format=args.format)
    cfg = replace(cfg, output=out)
    if getattr(args, "header", False):
        cfg = replace(cfg, problem=replace(cfg.problem, header=True))
    return cfg


def _audit_consts(res, problem, delta: float, mu_setting: str):
    consts = res.consts
    if mu_setting == "none" or problem.reference_solution is None:
        return consts
    mu = fit_pl_constant(problem, delta) if mu_setting == "auto" else float(mu_setting)
    return with_mu(consts, mu)


def _execute(res, algorithm: str, out_dir: Path, audit_consts=None) -> dict:
    """One algorithm into one run directory; returns the summary dict."""
    cfg = res.config
    o = cfg.output
    out_dir.mkdir(parents=True, exist_ok=True)
    rcfg = resolved_config(res)
    rcfg = replace(rcfg, algorithm=replace(rcfg.algorithm, name=algorithm), output=replace(rcfg.output, dir=str(out_dir)))
    (out_dir / "config.resolved").write_text(dump_config(rcfg))
    csv_path = out_dir / "trace.csv" if o.format in ("csv", "both") else None
    jsonl_path = out_dir / "trace.jsonl" if o.format in ("jsonl", "both") else None
    snap_dir = out_dir / "snapshots"
    if o.audit:
        snap_dir.mkdir(exist_ok=True)
    stride = math.gcd(o.record_every, o.audit_stride) if o.audit else o.record_every
    a = cfg.algorithm
    acfg = AlgorithmConfig(
        alpha=res.alpha, lam=res.lam, epsilon=a.epsilon, max_iters=a.max_iters, tol_grad=a.tol_grad,
        tol_consensus=a.tol_consensus, consensus_rounds=a.consensus_rounds, seed=res.init_seed,
    )
    params = acfg.params
    audit_fh = open(out_dir / "audit.jsonl", "w") if o.audit else None
    audit_fail = 0
    metric0 = op_counter.metric_svd

    with TraceWriter(csv_path, jsonl_path) as writer:
        last = {}

        def sink(state, qr_count, elapsed):
            nonlocal audit_fail
            rec = record(state, res.problem, res.consts, params, qr_count, elapsed)
            last["rec"] = rec
            if state.k % o.record_every == 0 or state.k == 0:
                writer.write(rec)
            if o.audit and state.k % o.audit_stride == 0:
                n, d, r = state.x.shape
                write_dmat(snap_dir / f"x_{state.k:010d}.dmat", state.x.reshape(n * d, r))
                report = audit_inequalities(state.xbar, res.problem, params, audit_consts, o.audit_delta)
                for row in audit_records(state.k, report):
                    audit_fh.write(json.dumps(row) + "\n")
                audit_fail += sum(1 for c in report.values() if c.passed is False)

        result = run(algorithm, res.problem, res.W, acfg, res.x0, trace_sink=sink, record_every=stride)
        if result.exit_reason != "diverged" and (not writer.records or writer.records[-1].k != result.iterations):
            writer.write(last["rec"])
    if audit_fh:
        audit_fh.close()

    final = last.get("rec")
    summary = {
        "algorithm": algorithm,
        "exit_reason": result.exit_reason,
        "iterations": result.iterations,
        "qr_svd_count": result.qr_svd_count,
        "metric_svd_count": op_counter.metric_svd - metric0,
        "wall_time_s": result.wall_time_s,
        "constants": res.summary_constants(),
        "final": None if final is None or result.exit_reason == "diverged" else {
            k: getattr(final, k) for k in ("grad_norm_sum", "landing_norm_avg", "consensus_x", "consensus_y", "feasibility_avg", "merit_avg")
        },
        "feasibility_xbar": float(distance_to_stiefel(result.state.xbar)),
        "f_star": res.problem.f_star,
        "audit_failures": audit_fail if o.audit else None,
        "error": None if result.error is None else str(result.error),
    }
    if result.exit_reason == "diverged":
        summary["diverged_at"] = result.error.iteration
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _resolve_or_fail(cfg):
    try:
        return resolve(cfg)
    except (ConfigError, ParameterError, DatasetError, DegenerateInstanceError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_run(args) -> int:
    cfg = _load(args)
    res = _resolve_or_fail(cfg)
    o = cfg.output
    audit_consts = _audit_consts(res, res.problem, o.audit_delta, o.audit_mu) if o.audit else None
    summary = _execute(res, cfg.algorithm.name, Path(o.dir), audit_consts)
    print(json.dumps({k: summary[k] for k in ("algorithm", "exit_reason", "iterations", "qr_svd_count", "wall_time_s")}))
    if summary["exit_reason"] == "diverged":
        print(f"diverged at iteration {summary['diverged_at']}", file=sys.stderr)
        return EXIT_DIVERGED
    if o.audit and summary["audit_failures"]:
        return EXIT_AUDIT
    return EXIT_OK


def cmd_compare(args) -> int:
    algos = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    if len(algos) < 2:
        raise ConfigError("compare needs at least two algorithms")
    cfg = _load(args)
    res = _resolve_or_fail(cfg)
    unknown = [name for name in algos if name not in ALGORITHMS]
    if unknown:
        raise ConfigError(f"unknown algorithms {unknown}; choose from {list(ALGORITHMS)}")
    root = Path(cfg.output.dir)
    audit_consts = _audit_consts(res, res.problem, cfg.output.audit_delta, cfg.output.audit_mu) if cfg.output.audit else None
    rows = {}
    for name in algos:
        s = _execute(res, name, root / name, audit_consts)
        rows[name] = {
            "exit_reason": s["exit_reason"],
            "iterations_to_tolerance": s["iterations"] if s["exit_reason"] == "converged" else None,
            "iterations": s["iterations"],
            "wall_time_s": s["wall_time_s"],
            "qr_svd_count": s["qr_svd_count"],
            "metric_svd_count": s["metric_svd_count"],
            "final_feasibility_avg": None if s["final"] is None else s["final"]["feasibility_avg"],
            "final_feasibility_xbar": s["feasibility_xbar"],
            "final_landing_norm_avg": None if s["final"] is None else s["final"]["landing_norm_avg"],
        }
    comparison = {"alpha": res.alpha, "lambda": res.lam, "sigma_W": res.W.sigma_W, "seed": res.init_seed, "runs": rows}
    (root / "comparison.json").write_text(json.dumps(comparison, indent=2))
    print(json.dumps(comparison, indent=2))
    return EXIT_DIVERGED if any(r["exit_reason"] == "diverged" for r in rows.values()) else EXIT_OK


def replay_audit(run_dir, gamma_scale: float | None = None, mu: str | None = None, delta: float | None = None):
    """Re-evaluate the inequality audits on a run's stored snapshots.

    Returns ``(rows, failures)``.
    """
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.resolved"
    if not cfg_path.is_file():
        raise ConfigError(f"{run_dir}: no config.resolved; not a run directory")
    snaps = sorted((run_dir / "snapshots").glob("x_*.dmat")) if (run_dir / "snapshots").is_dir() else []
    if not snaps:
        raise MissingSnapshotError(f"{run_dir}: no snapshots stored (run with --audit)")
    cfg = load_config(cfg_path)
    res = _resolve_or_fail(cfg)
    o = cfg.output
    delta = o.audit_delta if delta is None else delta
    consts = _audit_consts(res, res.problem, delta, o.audit_mu if mu is None else mu)
    if gamma_scale is not None:
        # keep the PL constant when rebuilding with a different gamma
        consts = with_gamma(consts, gamma_scale * consts.gamma)
    params = AlgorithmConfig(alpha=res.alpha, lam=res.lam, epsilon=cfg.algorithm.epsilon).params
    rows, failures = [], 0
    d, r = cfg.problem.d, cfg.problem.r
    for path in snaps:
        k = int(path.stem.split("_")[1])
        X = read_dmat(path).reshape(-1, d, r)
        report = audit_inequalities(X.mean(axis=0), res.problem, params, consts, delta)
        rows.extend(audit_records(k, report))
        failures += sum(1 for c in report.values() if c.passed is False)
    return rows, failures


def cmd_audit(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        rows, failures = replay_audit(run_dir, args.gamma_scale, args.mu)
    except MissingSnapshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SNAPSHOTS
    name = "audit_replay.jsonl" if args.gamma_scale is None else f"audit_gamma{args.gamma_scale:g}.jsonl"
    with open(run_dir / name, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"{'iter':>10}  {'check':<26} {'status':<15} {'slack':>12}")
    for row in rows:
        slack = "" if row["slack"] is None else f"{row['slack']:.3e}"
        print(f"{row['iteration']:>10}  {row['check']:<26} {row['status']:<15} {slack:>12}")
    print(f"{failures} failing checks")
    return EXIT_AUDIT if failures else EXIT_OK


def cmd_constants(args) -> int:
    cfg = _load(args)
    res = _resolve_or_fail(cfg)
    print(json.dumps(res.summary_constants(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stiefel-dgt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment file")
        p.add_argument("--preset", help="named preset (paper-synthetic, desk-pca)")
        p.add_argument("--seed", type=int, help="overrides problem and initialisation seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--header", action="store_true", help="CSV dataset has a header row")

    def outputs(p):
        p.add_argument("--audit", action="store_true", help="store snapshots and audit them")
        p.add_argument("--audit-stride", type=int, help="iterations between snapshots")
        p.add_argument("--format", choices=("csv", "jsonl", "both"))

    p = sub.add_parser("run", help="run one algorithm")
    common(p)
    outputs(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several algorithms from the same start")
    common(p)
    outputs(p)
    p.add_argument("--algorithms", default="drfgt,retraction_dgt", help="comma-separated list")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("audit", help="replay inequality audits on stored snapshots")
    p.add_argument("run_dir")
    p.add_argument("--gamma-scale", type=float, help="multiply the merit penalty weight")
    p.add_argument("--mu", help="PL factor: auto, none or a number")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("constants", help="print the resolved constants")
    common(p)
    p.set_defaults(func=cmd_constants)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
