"""End-to-end study harness: recovery, restarts, and scheduling impact.

Reproduces the synthetic-study tables on the shipped generator:

- recovery: label accuracy per method plus per-component goodness-of-fit
  of the mixture fit against the generating parameters;
- restarts: objective versus accuracy across EM restarts;
- scheduling impact: optimize a weekly elective schedule under each
  method's estimated parameters, then score every schedule under the
  generating truth.

Scoring under truth uses a slot convention: each of a method's clusters
is matched to the distinct true type it identifies best (maximum-overlap
assignment on the label contingency), and an elective slot for that
cluster admits patients of the matched true type. Planning runs on the
method's believed occupancy curves; evaluation swaps in the true curves
of the matched types. A method with impure clusters therefore pays
through its beliefs: curves fitted on contaminated members mis-state
what the matched type costs. A schedule that breaks the true blocking or
off-unit limits is repaired by cancelling admissions bluntly, one from
the fullest slot-day at a time, until it fits; the throughput credited
is what survives repair. Emergency demand is shared across methods at
its true value so the comparison isolates elective planning quality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import baselines as bl
from . import census as cs
from . import scheduling as sch
from . import synth
from .analytics import interval_transition
from .em import EmConfig, clustering_scores, e_step, encode_dataset, expected_counts, fit
from .errors import InfeasibleError
from .selection import elbow_scan, recovery_pvalues
from .types import SmmParams, StateSpace, Trajectory

__all__ = [
    "MethodOutcome",
    "SchedulingScenario",
    "SchedulingRow",
    "canonical_scenario",
    "cluster_methods",
    "composition_matrix",
    "slot_matching",
    "recovery_table",
    "restart_table",
    "scheduling_table",
    "repair_under_truth",
]

METHODS = ("true", "csi", "markov", "kmeans", "drg", "gaussian")


@dataclass(frozen=True)
class MethodOutcome:
    name: str
    labels: np.ndarray
    params: SmmParams
    accuracy: float
    macro_f1: float


def cluster_methods(
    trajectories: list[Trajectory],
    true_labels: np.ndarray,
    records: list[dict],
    generator: SmmParams,
    n_clusters: int,
    seed: int,
    max_iter: int = 50,
    restarts: int = 5,
) -> dict[str, MethodOutcome]:
    """Run every estimation method on one dataset."""
    space, t = generator.space, generator.max_hold
    data = encode_dataset(trajectories, space, t)
    cfg = EmConfig(
        n_clusters=n_clusters, max_iter=max_iter, restarts=restarts, seed=seed
    )
    out: dict[str, MethodOutcome] = {}

    def add(name: str, labels: np.ndarray, params: SmmParams) -> None:
        scores = clustering_scores(true_labels, labels, generator.n_clusters)
        out[name] = MethodOutcome(
            name=name,
            labels=np.asarray(labels, dtype=int),
            params=params,
            accuracy=scores["accuracy"],
            macro_f1=scores["macro_f1"],
        )

    add("true", true_labels, generator)
    csi = fit(data, cfg)
    add("csi", csi.membership.assignments, csi.params)
    mkv = bl.markov_mixture_cluster(data, cfg)
    add("markov", mkv.membership.assignments, mkv.params)
    km = bl.kmeans_attribute_cluster(records, n_clusters, seed=seed)
    add("kmeans", km, bl.empirical_estimate(trajectories, km, space, t).params)
    dg, _ = bl.drg_cluster(records)
    add("drg", dg, bl.empirical_estimate(trajectories, dg, space, t).params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        gm = bl.gaussian_attribute_cluster(records, n_clusters, seed=seed)
    add("gaussian", gm, bl.empirical_estimate(trajectories, gm, space, t).params)
    return out


def composition_matrix(
    method_labels: np.ndarray, true_labels: np.ndarray, n_method: int, n_true: int
) -> np.ndarray:
    """Row k: distribution of true types among patients the method calls k."""
    comp = np.zeros((n_method, n_true))
    np.add.at(comp, (np.asarray(method_labels), np.asarray(true_labels)), 1.0)
    empty = comp.sum(axis=1) == 0
    comp[empty] = 1.0 / n_true
    return comp / comp.sum(axis=1, keepdims=True)


def slot_matching(
    method_labels: np.ndarray, true_labels: np.ndarray, n_method: int, n_true: int
) -> np.ndarray:
    """Match each method cluster to a distinct true type by maximum overlap.

    Returns ``mapping`` with ``mapping[k]`` the true type whose elective slot
    cluster k stands in for. Requires ``n_method <= n_true``; with fewer
    clusters than true types the leftover types simply get no slot.
    """
    from scipy.optimize import linear_sum_assignment

    if n_method > n_true:
        raise ValueError("more method clusters than true types")
    counts = np.zeros((n_method, n_true))
    np.add.at(counts, (np.asarray(method_labels), np.asarray(true_labels)), 1.0)
    rows, cols = linear_sum_assignment(-counts)
    mapping = np.full(n_method, -1, dtype=int)
    mapping[rows] = cols
    return mapping


def recovery_table(
    trajectories: list[Trajectory],
    methods: dict[str, MethodOutcome],
    generator: SmmParams,
    fit_seed: int,
) -> list[dict]:
    """Accuracy per method; recovery p-values for the mixture fit."""
    rows = []
    csi = methods["csi"]
    space, t = generator.space, generator.max_hold
    data = encode_dataset(trajectories, space, t)
    counts = expected_counts(data, e_step(data, csi.params))
    from .em import match_labels

    mapping = match_labels(
        methods["true"].labels, csi.labels, generator.n_clusters
    )
    pvals = recovery_pvalues(csi.params, counts, generator, mapping)
    for name in METHODS:
        if name not in methods:
            continue
        m = methods[name]
        row = {
            "method": name,
            "accuracy": round(m.accuracy, 4),
            "macro_f1": round(m.macro_f1, 4),
        }
        if name == "csi":
            row["min_recovery_p"] = round(
                min(
                    min(p["p_initial"], p["p_trans"], p["p_hold"]) for p in pvals
                ),
                4,
            )
        rows.append(row)
    return rows


def restart_table(
    trajectories: list[Trajectory],
    true_labels: np.ndarray,
    generator: SmmParams,
    n_clusters: int,
    seed: int,
    max_iter: int = 50,
    restarts: int = 5,
) -> list[dict]:
    """Objective and accuracy per restart (the more-is-better pairing)."""
    data = encode_dataset(trajectories, generator.space, generator.max_hold)
    rows = []
    for r in range(restarts):
        cfg = EmConfig(
            n_clusters=n_clusters,
            max_iter=max_iter,
            restarts=1,
            seed=seed + 1000 * r,
        )
        res = fit(data, cfg)
        scores = clustering_scores(
            true_labels, res.membership.assignments, generator.n_clusters
        )
        rows.append(
            {
                "restart": r,
                "objective": float(res.final_q),
                "accuracy": round(scores["accuracy"], 4),
            }
        )
    return rows


@dataclass(frozen=True)
class SchedulingScenario:
    """Hospital constants for the scheduling comparison."""

    capacities: np.ndarray
    blocking_limit: float
    offunit_limits: np.ndarray
    baseline_weekly: int          # current admissions per true type per week
    daily_cap: int                # elective cap per type per admission day
    cap_days: int                 # admission days per week (Monday onward)
    emergency_rate: float         # arrivals per true type per day
    tail_tol: float = 1e-9

    def daily_caps(self, n_types: int) -> np.ndarray:
        caps = np.zeros((n_types, cs.WEEK), dtype=int)
        caps[:, : self.cap_days] = self.daily_cap
        return caps

    def baseline_psi(self, n_types: int) -> np.ndarray:
        psi = np.zeros((n_types, cs.WEEK), dtype=int)
        for k in range(n_types):
            base = self.baseline_weekly // self.cap_days
            extra = self.baseline_weekly % self.cap_days
            psi[k, : self.cap_days] = base
            psi[k, :extra] += 1
        return psi


def canonical_scenario() -> SchedulingScenario:
    return SchedulingScenario(
        capacities=np.array([16.0, 74.0, 67.0, 70.0]),
        blocking_limit=0.75,
        offunit_limits=np.array([0.5, 0.5, 0.5, 0.5]),
        baseline_weekly=8,
        daily_cap=4,
        cap_days=3,
        emergency_rate=0.10,
    )


@dataclass(frozen=True)
class SchedulingRow:
    method: str
    throughput: float               # admissions per week surviving repair
    throughput_pct: float           # increase over the baseline schedule
    utilization: float
    utilization_pct: float
    cancelled: int                  # admissions removed by repair
    solver_nodes: int
    infeasible: bool                # solver found no schedule at all


def _true_occupancies(
    generator: SmmParams, tail_tol: float
) -> list[cs.CyclicOccupancy]:
    out = []
    for k in range(generator.n_clusters):
        iv = interval_transition(generator, k, tail_tol=tail_tol)
        out.append(cs.cyclic_occupancy(generator, k, interval=iv))
    return out


def repair_under_truth(
    psi: np.ndarray, eval_instance: sch.ScheduleInstance, tol: float = 1e-9
) -> tuple[np.ndarray, int]:
    """Cancel admissions until the schedule meets the true limits.

    Cancellation is deliberately blunt: each step removes one admission
    from the fullest slot-day (ties to the earliest day, then lowest
    slot). A planner whose model overbooked gets no second round of
    optimization out of the repair; the trim falls on its largest
    programs, whether or not they caused the overload.
    """
    psi = np.asarray(psi, dtype=int).copy()

    def excess(p: np.ndarray) -> float:
        m = sch.evaluate_schedule(p, eval_instance, tol)
        over_b = max(0.0, m.expected_blocking - eval_instance.blocking_limit)
        over_o = np.maximum(
            0.0, m.expected_offunit - eval_instance.offunit_limits[:, None]
        ).sum()
        return over_b + over_o

    cancelled = 0
    while excess(psi) > tol and psi.sum() > 0:
        flat = np.argwhere(psi == psi.max())
        k, d = min(flat.tolist(), key=lambda kd: (kd[1], kd[0]))
        psi[k, d] -= 1
        cancelled += 1
    return psi, cancelled


def _eval_instance(
    occupancies: list[cs.CyclicOccupancy],
    emergency: cs.DemandDistribution,
    scenario: SchedulingScenario,
    n_types: int,
) -> sch.ScheduleInstance:
    cfg = sch.HospitalConfig(
        capacities=scenario.capacities,
        blocking_limit=scenario.blocking_limit,
        offunit_limits=scenario.offunit_limits,
        baseline=np.zeros((n_types, cs.WEEK), dtype=int),
        daily_caps=np.full((n_types, cs.WEEK), 10_000),
        rewards=np.ones(n_types),
    )
    return sch.build_instance(occupancies, emergency, cfg)


def scheduling_table(
    methods: dict[str, MethodOutcome],
    true_labels: np.ndarray,
    generator: SmmParams,
    scenario: SchedulingScenario,
    time_limit: float = 120.0,
    node_limit: int | None = None,
) -> list[SchedulingRow]:
    """Optimize under each method's beliefs, score under the truth.

    ``node_limit`` gives every method the same deterministic solver
    budget, which keeps the comparison reproducible when a believed
    instance is too hard to certify inside the wall-clock limit.
    """
    true_occ = _true_occupancies(generator, scenario.tail_tol)
    plan_rates = np.full(
        (generator.n_clusters, cs.WEEK), scenario.emergency_rate
    )
    plan = cs.ArrivalPlan(
        elective=np.zeros((1, cs.WEEK), dtype=int), emergency_rates=plan_rates
    )
    emergency = cs.emergency_demand(plan, true_occ)

    base_psi = scenario.baseline_psi(generator.n_clusters)
    base_eval = _eval_instance(
        true_occ, emergency, scenario, generator.n_clusters
    )
    base_psi, base_cancelled = repair_under_truth(base_psi, base_eval)
    base_metrics = sch.evaluate_schedule(base_psi, base_eval)
    base_thr = max(base_metrics.throughput, 1.0)
    base_util = max(base_metrics.utilization, 1e-9)

    rows = []
    for name in METHODS:
        if name not in methods:
            continue
        m = methods[name]
        k_m = m.params.n_clusters
        believed = [
            cs.cyclic_occupancy(m.params, k, tol=scenario.tail_tol)
            for k in range(k_m)
        ]
        cfg = sch.HospitalConfig(
            capacities=scenario.capacities,
            blocking_limit=scenario.blocking_limit,
            offunit_limits=scenario.offunit_limits,
            baseline=np.zeros((k_m, cs.WEEK), dtype=int),
            daily_caps=scenario.daily_caps(k_m),
            rewards=np.ones(k_m),
        )
        inst = sch.build_instance(believed, emergency, cfg)
        try:
            sol = sch.solve_exact(
                inst, time_limit=time_limit, node_limit=node_limit
            )
            psi_star, nodes = sol.psi, sol.nodes
        except InfeasibleError:
            psi_star, nodes = None, 0
        if psi_star is None:
            rows.append(
                SchedulingRow(
                    method=name,
                    throughput=0.0,
                    throughput_pct=-100.0,
                    utilization=0.0,
                    utilization_pct=-100.0,
                    cancelled=0,
                    solver_nodes=nodes,
                    infeasible=True,
                )
            )
            continue
        mapping = slot_matching(
            m.labels, true_labels, k_m, generator.n_clusters
        )
        eval_occ = [true_occ[mapping[k]] for k in range(k_m)]
        eval_inst = _eval_instance(eval_occ, emergency, scenario, k_m)
        psi_rep, cancelled = repair_under_truth(psi_star, eval_inst)
        metrics = sch.evaluate_schedule(psi_rep, eval_inst)
        rows.append(
            SchedulingRow(
                method=name,
                throughput=metrics.throughput,
                throughput_pct=100.0 * (metrics.throughput - base_thr) / base_thr,
                utilization=metrics.utilization,
                utilization_pct=100.0
                * (metrics.utilization - base_util)
                / base_util,
                cancelled=cancelled,
                solver_nodes=nodes,
                infeasible=False,
            )
        )
    return rows


def elbow_curve(
    trajectories: list[Trajectory],
    generator: SmmParams,
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8),
    seed: int = 0,
    max_iter: int = 50,
    restarts: int = 5,
):
    data = encode_dataset(trajectories, generator.space, generator.max_hold)
    cfg = EmConfig(
        n_clusters=k_values[0], max_iter=max_iter, restarts=restarts, seed=seed
    )
    return elbow_scan(data, list(k_values), cfg)
