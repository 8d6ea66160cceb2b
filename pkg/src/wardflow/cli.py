"""Command-line front door: simulate, ingest, fit, analyze, plan, serve.

Every subcommand writes its artifacts into ``--out`` (created on demand)
and prints a one-paragraph summary to stdout.  Exit codes: 0 on success,
1 when the inputs are at fault (bad flags, malformed files, validation),
2 when the package itself failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import census as cs
from . import scheduling as sch
from . import synth
from .analytics import (
    interval_transition,
    occupancy,
    resolve_horizon,
    total_los,
)
from .config import PipelineConfig, load_config
from .dataio import (
    WardGroupingConfig,
    export_trajectories,
    ingest,
    load_model,
    load_trajectories,
    save_model,
)
from .em import EmConfig, encode_dataset, fit
from .errors import InfeasibleError, WardflowError
from .experiments import (
    canonical_scenario,
    cluster_methods,
    elbow_curve,
    recovery_table,
    restart_table,
    scheduling_table,
)
from .selection import elbow_scan

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wardflow",
        description="patient-flow mixtures, census forecasts and weekly plans",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument(
        "--out", default="wardflow_out", help="output directory (created)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="sample a synthetic cohort")
    p.add_argument(
        "--scenario",
        choices=("canonical", "replication", "random"),
        default="canonical",
    )
    p.add_argument("--n", type=int, default=1000, help="patients to generate")
    p.add_argument("--clusters", type=int, default=4, help="random scenario only")
    p.add_argument("--wards", type=int, default=4, help="random scenario only")

    p = sub.add_parser("ingest", parents=[common], help="read stay records")
    p.add_argument("--input", required=True, help="event CSV or trajectory JSONL")
    p.add_argument("--grouping", required=True, help="JSON: {mapping, absorbing}")
    p.add_argument("--time-unit", choices=("day", "hour", "week"), default="day")

    p = sub.add_parser("fit", parents=[common], help="estimate the mixture")
    p.add_argument("--data", required=True, help="trajectory JSONL")
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--count-mode", choices=("soft", "hard"), default="soft")
    p.add_argument("--shared-holding", action="store_true")

    p = sub.add_parser("select-k", parents=[common], help="scan cluster counts")
    p.add_argument("--data", required=True, help="trajectory JSONL")
    p.add_argument("--range", default="1..8", help="inclusive K range, e.g. 1..8")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--restarts", type=int, default=5)

    p = sub.add_parser("analyze", parents=[common], help="stay/occupancy tables")
    p.add_argument("--model", required=True, help="model artifact JSON")

    p = sub.add_parser("forecast", parents=[common], help="weekly census forecast")
    p.add_argument("--model", required=True)
    p.add_argument(
        "--plan", required=True, help="JSON: {elective, emergency_rates[, capacities]}"
    )

    p = sub.add_parser("optimize", parents=[common], help="solve a weekly schedule")
    p.add_argument("--model", required=True)
    p.add_argument("--instance", required=True, help="JSON hospital instance")
    p.add_argument("--time-limit", type=float, default=None)

    p = sub.add_parser(
        "replicate", parents=[common], help="run the synthetic study end to end"
    )
    p.add_argument("--scenario", choices=("k4", "k50"), default="k4")
    p.add_argument("--n", type=int, default=1000)

    p = sub.add_parser("serve", parents=[common], help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WardflowError(f"cannot read JSON file {path}: {exc}") from exc


def _spec_for(args) -> synth.GeneratorSpec:
    if args.scenario == "canonical":
        return synth.canonical_spec()
    if args.scenario == "replication":
        return synth.replication_spec()
    return synth.random_spec(args.clusters, args.seed, n_wards=args.wards)


def _cmd_simulate(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    spec = _spec_for(args)
    trajs, labels, report = synth.sample_dataset(spec, args.n, seed=args.seed)
    export_trajectories(out / "trajectories.jsonl", spec.params.space, trajs)
    _write_csv(out / "labels.csv", ["trajectory", "cluster"],
               [(t.traj_id, int(lbl)) for t, lbl in zip(trajs, labels)])
    print(
        f"generated {report.n_generated} patients, retained "
        f"{report.n_retained} ({100 * report.retention:.1f}%) -> {out}"
    )
    return 0


def _cmd_ingest(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    doc = _read_json(args.grouping)
    try:
        grouping = WardGroupingConfig(
            mapping=dict(doc["mapping"]), absorbing=tuple(doc["absorbing"])
        )
    except (KeyError, TypeError) as exc:
        raise WardflowError(f"grouping file needs mapping+absorbing: {exc}") from exc
    result = ingest(args.input, grouping, time_unit=args.time_unit)
    export_trajectories(out / "trajectories.jsonl", result.space, result.trajectories)
    rep = result.report
    (out / "ingest_report.json").write_text(
        json.dumps(
            {
                "n_records": rep.n_records,
                "n_rejected_records": rep.n_rejected_records,
                "n_patients": rep.n_patients,
                "n_dropped_single": rep.n_dropped_single,
                "n_dropped_anomalous": rep.n_dropped_anomalous,
                "n_retained": rep.n_retained,
                "retention": rep.retention,
                "anomalies": list(rep.anomalies),
                "wards": list(result.space.transient),
                "exits": list(result.space.absorbing),
            },
            indent=2,
        )
    )
    print(
        f"retained {rep.n_retained}/{rep.n_patients} patients "
        f"({100 * rep.retention:.1f}%), {rep.n_rejected_records} records "
        f"rejected -> {out}"
    )
    return 0


def _load_batch(path: str):
    loaded = load_trajectories(path)
    if not loaded.trajectories:
        raise WardflowError(f"{path} holds no usable trajectories")
    max_hold = max(d for traj in loaded.trajectories for _, d in traj.visits)
    return loaded, encode_dataset(loaded.trajectories, loaded.space, max_hold)


def _cmd_fit(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    loaded, batch = _load_batch(args.data)
    em_config = EmConfig(
        n_clusters=args.clusters,
        max_iter=args.max_iter,
        restarts=args.restarts,
        epsilon=config.em_epsilon,
        seed=args.seed,
        count_mode=args.count_mode,
        shared_holding=args.shared_holding,
    )
    res = fit(batch, em_config)
    save_model(out / "model.json", res.params, em_config, res.final_q)
    print(
        f"fitted K={args.clusters} on {len(loaded.trajectories)} trajectories: "
        f"objective {res.final_q:.3f} after {res.n_iter} iterations -> "
        f"{out / 'model.json'}"
    )
    return 0


def _parse_range(text: str) -> list[int]:
    try:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError as exc:
        raise WardflowError(f"range must look like 1..8, got {text!r}") from exc
    if hi < lo:
        raise WardflowError(f"empty range {text!r}")
    return list(range(lo, hi + 1))


def _cmd_select_k(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    _, batch = _load_batch(args.data)
    ks = _parse_range(args.range)
    base = EmConfig(
        n_clusters=ks[0],
        max_iter=args.max_iter,
        restarts=args.restarts,
        epsilon=config.em_epsilon,
        seed=args.seed,
    )
    scan = elbow_scan(batch, ks, base, threshold=config.elbow_threshold)
    rows = []
    for i, k in enumerate(scan.k_values):
        imp = scan.improvements[i] if i < len(scan.improvements) else ""
        rows.append((k, scan.q_values[i], imp))
    _write_csv(out / "elbow.csv", ["k", "objective", "improvement_to_next"], rows)
    print(f"chose K={scan.chosen_k} over {args.range} -> {out / 'elbow.csv'}")
    return 0


def _cmd_analyze(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    model = load_model(args.model)
    params = model.params
    names = params.space.names
    phi_rows, occ_rows, los_rows, week_rows = [], [], [], []
    for k in range(params.n_clusters):
        d_max = resolve_horizon(
            params, k, tail_tol=config.horizon_tail_tol, cap=config.horizon_cap
        )
        iv = interval_transition(params, k, d_max=d_max)
        for u in range(params.space.n_transient):
            for j in range(params.space.n_states):
                for d in range(iv.d_max + 1):
                    phi_rows.append((k, names[u], names[j], d, iv.phi[u, j, d]))
        occ = occupancy(params, k, interval=iv)
        for j in range(params.space.n_states):
            for d in range(occ.d_max + 1):
                occ_rows.append((k, names[j], d, occ.gamma[j, d]))
        los = total_los(params, k, d_max=d_max)
        for d in range(los.pmf.size):
            los_rows.append((k, d, los.pmf[d]))
        folded = cs.cyclic_occupancy(
            params, k, tol=config.eps_tail, interval=iv
        ).folded_means()
        for u in range(params.space.n_transient):
            for d in range(cs.WEEK):
                week_rows.append((k, names[u], d, folded[u, d]))
    _write_csv(out / "location_mix.csv",
               ["cluster", "origin", "state", "day", "prob"], phi_rows)
    _write_csv(out / "occupancy.csv", ["cluster", "state", "day", "prob"], occ_rows)
    _write_csv(out / "los.csv", ["cluster", "days", "prob"], los_rows)
    _write_csv(out / "weekly_census.csv",
               ["cluster", "ward", "weekday", "mean_beds"], week_rows)
    print(
        f"wrote location mix, occupancy, stay-length and weekly census "
        f"tables for K={params.n_clusters} -> {out}"
    )
    return 0


def _model_occupancies(params, config: PipelineConfig):
    occ = []
    for k in range(params.n_clusters):
        d_max = resolve_horizon(
            params, k, tail_tol=config.horizon_tail_tol, cap=config.horizon_cap
        )
        iv = interval_transition(params, k, d_max=d_max)
        occ.append(cs.cyclic_occupancy(params, k, tol=config.eps_tail, interval=iv))
    return occ


def _cmd_forecast(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    model = load_model(args.model)
    doc = _read_json(args.plan)
    try:
        plan = cs.ArrivalPlan(
            elective=np.array(doc["elective"]),
            emergency_rates=np.array(doc["emergency_rates"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise WardflowError(f"plan file is malformed: {exc}") from exc
    occ = _model_occupancies(model.params, config)
    elective = cs.elective_demand(plan, occ)
    emergency = cs.emergency_demand(plan, occ, eps_tail=config.eps_tail)
    caps = doc.get("capacities")
    fc = cs.combined_forecast(
        elective, emergency, np.array(caps) if caps is not None else None
    )
    wards = list(model.params.space.transient)
    (out / "forecast.json").write_text(
        json.dumps(
            {
                "wards": wards,
                "mean": fc.mean.tolist(),
                "exceedance": None
                if fc.exceedance is None
                else fc.exceedance.tolist(),
                "tail_mass": fc.demand.tail_mass.tolist(),
            },
            indent=2,
        )
    )
    _write_csv(
        out / "census_mean.csv",
        ["ward"] + [f"day{d}" for d in range(cs.WEEK)],
        [[wards[u]] + [f"{fc.mean[u, d]:.4f}" for d in range(cs.WEEK)]
         for u in range(len(wards))],
    )
    peak = fc.mean.max(axis=1)
    print(
        "peak mean census per ward: "
        + ", ".join(f"{w}={p:.1f}" for w, p in zip(wards, peak))
        + f" -> {out}"
    )
    return 0


def _cmd_optimize(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    model = load_model(args.model)
    doc = _read_json(args.instance)
    params = model.params
    occ = _model_occupancies(params, config)
    try:
        rates = np.array(doc["emergency_rates"], dtype=float)
        hospital = sch.HospitalConfig(
            capacities=np.array(doc["capacities"], dtype=float),
            blocking_limit=float(doc["blocking_limit"]),
            offunit_limits=np.array(doc["offunit_limits"], dtype=float),
            baseline=np.array(doc["baseline"]),
            daily_caps=np.array(doc["daily_caps"]),
            rewards=np.array(doc["rewards"], dtype=float),
            cancellation_share=(
                np.array(doc["cancellation_share"], dtype=float)
                if doc.get("cancellation_share") is not None
                else None
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise WardflowError(f"instance file is malformed: {exc}") from exc
    plan = cs.ArrivalPlan(
        elective=np.zeros((params.n_clusters, cs.WEEK), dtype=int),
        emergency_rates=rates,
    )
    emergency = cs.emergency_demand(plan, occ, eps_tail=config.eps_tail)
    instance = sch.build_instance(occ, emergency, hospital)
    limit = args.time_limit or config.solver_time_limit
    try:
        sol = sch.solve_exact(instance, time_limit=limit)
    except InfeasibleError as exc:
        (out / "schedule.json").write_text(
            json.dumps(
                {
                    "infeasible": True,
                    "binding_family": exc.binding_family,
                    "message": str(exc),
                }
            )
        )
        print(f"infeasible: {exc}")
        return 0
    (out / "schedule.json").write_text(
        json.dumps(
            {
                "infeasible": False,
                "psi": sol.psi.tolist(),
                "objective": sol.objective,
                "certified": sol.certified,
                "gap": sol.gap,
                "nodes": sol.nodes,
                "expected_blocking": sol.metrics.expected_blocking,
                "throughput": sol.metrics.throughput,
                "utilization": sol.metrics.utilization,
            }
        )
    )
    tag = "certified optimal" if sol.certified else f"best found (gap {sol.gap:.1f})"
    print(
        f"objective {sol.objective:.1f} ({tag}), {sol.nodes} nodes -> "
        f"{out / 'schedule.json'}"
    )
    return 0


def _cmd_replicate(args, config: PipelineConfig) -> int:
    out = _outdir(args)
    if args.scenario == "k4":
        spec = synth.canonical_spec()
        n_clusters = 4
    else:
        spec = synth.random_spec(50, args.seed, n_wards=6)
        n_clusters = 50
    trajs, labels, report = synth.sample_dataset(spec, args.n, seed=args.seed)
    records = [t.attributes for t in trajs]
    fit_seed = args.seed + 100

    if args.scenario == "k4":
        methods = cluster_methods(
            trajs, labels, records, spec.params, n_clusters, fit_seed
        )
        acc = recovery_table(trajs, methods, spec.params, fit_seed)
        _write_csv(
            out / "accuracy_table.csv",
            ["method", "accuracy", "macro_f1", "min_recovery_p"],
            [
                (
                    r["method"],
                    r["accuracy"],
                    r["macro_f1"],
                    r.get("min_recovery_p", ""),
                )
                for r in acc
            ],
        )
        scan = elbow_curve(trajs, spec.params, seed=fit_seed)
        _write_csv(
            out / "elbow_curve.csv",
            ["k", "objective", "improvement_to_next"],
            [
                (
                    k,
                    scan.q_values[i],
                    scan.improvements[i] if i < len(scan.improvements) else "",
                )
                for i, k in enumerate(scan.k_values)
            ],
        )
        sched = scheduling_table(
            methods, labels, spec.params, canonical_scenario(),
            time_limit=config.solver_time_limit,
        )
        _write_csv(
            out / "scheduling_table.csv",
            [
                "method", "throughput", "throughput_pct", "utilization",
                "utilization_pct", "cancelled", "infeasible",
            ],
            [
                (
                    r.method,
                    r.throughput,
                    f"{r.throughput_pct:.2f}",
                    f"{r.utilization:.4f}",
                    f"{r.utilization_pct:.2f}",
                    r.cancelled,
                    r.infeasible,
                )
                for r in sched
            ],
        )
        week_rows = []
        for k in range(n_clusters):
            folded = cs.cyclic_occupancy(
                spec.params, k, tol=config.eps_tail
            ).folded_means()
            for u in range(spec.params.space.n_transient):
                for d in range(cs.WEEK):
                    week_rows.append(
                        (k, spec.params.space.names[u], d, folded[u, d])
                    )
        _write_csv(
            out / "census_curves.csv",
            ["cluster", "ward", "weekday", "mean_beds"],
            week_rows,
        )
    rows = restart_table(trajs, labels, spec.params, n_clusters, fit_seed)
    _write_csv(
        out / "restart_table.csv",
        ["restart", "objective", "accuracy"],
        [(r["restart"], r["objective"], r["accuracy"]) for r in rows],
    )
    print(
        f"replicated {args.scenario} study on {report.n_retained} retained "
        f"trajectories -> {out}"
    )
    return 0


def _cmd_serve(args, config: PipelineConfig) -> int:
    from .service import serve

    print(f"serving on {args.host}:{args.port} (ctrl-c to stop)")
    serve(host=args.host, port=args.port, config=config)
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "ingest": _cmd_ingest,
    "fit": _cmd_fit,
    "select-k": _cmd_select_k,
    "analyze": _cmd_analyze,
    "forecast": _cmd_forecast,
    "optimize": _cmd_optimize,
    "replicate": _cmd_replicate,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; that is caller error here
        return 0 if exc.code in (0, None) else 1
    try:
        config = load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except WardflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
