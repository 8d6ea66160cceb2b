"""Weekly elective-admission optimization.

Maximizes reward-weighted admissions over a repeating week, subject to an
expected-blocking budget at hospital level, per-ward expected off-unit
limits, weekly volume floors per patient type, and daily caps.

The blocking and off-unit helper counts are not free decision variables
here. Given a schedule, the number blocked when n emergency patients are
present is forced to its lower bound max(0, ceil(n - free capacity)), and
likewise for off-unit counts; any larger value only consumes budget. That
collapses the problem to a search over integer schedules, solved by
depth-first branch and bound with admissible pruning:

- expected blocking is nondecreasing in every schedule entry, so a lower
  bound with all unassigned entries at zero already exceeding the budget
  kills the subtree;
- the off-unit bound subtracts the blocking term, so its admissible lower
  bound pairs least elective census with the LARGEST blocking any feasible
  completion could have (capped by the blocking budget itself).

One modeling wrinkle is inherited from the formulation: because expected
blocking is subtracted inside the off-unit bound, deliberately inflating
the blocking count could relax off-unit constraints. Pinning the helper
counts to their lower bounds excludes that gaming and reads them as what
they are, actual blockages.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .census import WEEK, CyclicOccupancy, DemandDistribution
from .errors import ConfigurationError, InfeasibleError, StructuralError

__all__ = [
    "HospitalConfig",
    "ScheduleInstance",
    "ScheduleMetrics",
    "ScheduleSolution",
    "build_instance",
    "evaluate_schedule",
    "solve_exact",
    "enumerate_schedules",
]

_CEIL_EPS = 1e-9


def _iceil(x: np.ndarray) -> np.ndarray:
    """Ceiling with a guard so 3.0 + float noise does not become 4."""
    return np.ceil(x - _CEIL_EPS)


def _tail_sums(pmf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-tail partials (sum of pmf, sum of n*pmf) with a 0 sentinel.

    For integer counts, E max(0, iceil(N - c)) = S1[m+1] - m*S0[m+1] with
    m = floor(c + eps), which turns the pmf dot products in the search's
    inner loop into two lookups.
    """
    n = np.arange(pmf.size)
    s0 = np.concatenate([np.cumsum(pmf[::-1])[::-1], [0.0]])
    s1 = np.concatenate([np.cumsum((pmf * n)[::-1])[::-1], [0.0]])
    return s0, s1


def _tail_expect(s0: np.ndarray, s1: np.ndarray, c: float) -> float:
    m = math.floor(c + _CEIL_EPS)
    mi = m + 1
    if mi >= s0.size:
        return 0.0
    if mi < 0:
        mi = 0
    return float(s1[mi] - m * s0[mi])


@dataclass(frozen=True)
class HospitalConfig:
    """Ward capacities and managerial limits for the weekly plan.

    ``cancellation_share`` spreads expected hospital-level blockings over
    wards inside the off-unit bound; when omitted it defaults to each
    ward's share of mean emergency demand.
    """

    capacities: np.ndarray          # beds per ward
    blocking_limit: float           # expected blockings per week
    offunit_limits: np.ndarray      # expected off-unit patients per ward-day
    baseline: np.ndarray            # (K, 7) current admissions
    daily_caps: np.ndarray          # (K, 7) admission caps
    rewards: np.ndarray             # (K,)
    cancellation_share: np.ndarray | None = None


@dataclass(frozen=True)
class ScheduleInstance:
    capacities: np.ndarray
    blocking_limit: float
    offunit_limits: np.ndarray
    cancellation_share: np.ndarray
    baseline: np.ndarray
    daily_caps: np.ndarray
    rewards: np.ndarray
    census_map: np.ndarray           # (K, 7, U, 7): slot (k, d2) -> mean beds (u, d1)
    ward_pmfs: tuple[tuple[np.ndarray, ...], ...]
    hospital_pmfs: tuple[np.ndarray, ...]
    emergency_mean: np.ndarray       # (U, 7)

    @property
    def n_types(self) -> int:
        return self.baseline.shape[0]

    @property
    def n_wards(self) -> int:
        return self.capacities.size

    def elective_census(self, psi: np.ndarray) -> np.ndarray:
        """Mean elective beds per (ward, weekday) under schedule psi."""
        return np.einsum("kd,kdue->ue", psi, self.census_map)


def build_instance(
    elective_occupancies: list[CyclicOccupancy],
    emergency: DemandDistribution,
    config: HospitalConfig,
) -> ScheduleInstance:
    """Assemble the solver inputs from fitted models and census outputs."""
    caps = np.asarray(config.capacities, dtype=float)
    n_wards = caps.size
    if emergency.n_wards != n_wards:
        raise ConfigurationError(
            f"emergency demand covers {emergency.n_wards} wards, config has {n_wards}"
        )
    baseline = np.asarray(config.baseline, dtype=int)
    daily_caps = np.asarray(config.daily_caps, dtype=int)
    rewards = np.asarray(config.rewards, dtype=float)
    k = baseline.shape[0]
    if len(elective_occupancies) != k:
        raise ConfigurationError(
            f"{k} elective types configured but {len(elective_occupancies)} "
            "occupancy curves were given"
        )
    for name, arr, shape in (
        ("baseline", baseline, (k, WEEK)),
        ("daily_caps", daily_caps, (k, WEEK)),
        ("rewards", rewards, (k,)),
        ("offunit_limits", np.asarray(config.offunit_limits), (n_wards,)),
    ):
        if arr.shape != shape:
            raise StructuralError(f"{name} must have shape {shape}")
    if np.any(baseline < 0) or np.any(daily_caps < 0):
        raise StructuralError("baseline and daily_caps must be nonnegative")
    if not np.all(np.isfinite(rewards)):
        raise StructuralError("rewards must be finite")

    census_map = np.zeros((k, WEEK, n_wards, WEEK))
    for ki, occ in enumerate(elective_occupancies):
        fold = occ.folded_means()[:n_wards]
        for d2 in range(WEEK):
            for d1 in range(WEEK):
                census_map[ki, d2, :, d1] = fold[:, (d1 - d2) % WEEK]

    share = config.cancellation_share
    if share is None:
        totals = emergency.mean.sum(axis=1)
        grand = totals.sum()
        share = totals / grand if grand > 0 else np.full(n_wards, 1.0 / n_wards)
    share = np.asarray(share, dtype=float)
    if share.shape != (n_wards,):
        raise StructuralError(f"cancellation_share must have shape ({n_wards},)")

    return ScheduleInstance(
        capacities=caps,
        blocking_limit=float(config.blocking_limit),
        offunit_limits=np.asarray(config.offunit_limits, dtype=float),
        cancellation_share=share,
        baseline=baseline,
        daily_caps=daily_caps,
        rewards=rewards,
        census_map=census_map,
        ward_pmfs=emergency.pmfs,
        hospital_pmfs=emergency.hospital_pmf
        or tuple(np.array([1.0]) for _ in range(WEEK)),
        emergency_mean=emergency.mean,
    )


@dataclass(frozen=True)
class ScheduleMetrics:
    expected_blocking: float         # per week, hospital level
    expected_offunit: np.ndarray     # (U, 7) per ward-day
    throughput: float                # admissions per week
    reward: float
    utilization: float               # mean census over total beds
    feasible: bool
    violations: tuple[str, ...]


def _expected_blocking(instance: ScheduleInstance, hosp_census: np.ndarray) -> float:
    total_cap = instance.capacities.sum()
    exp = 0.0
    for d in range(WEEK):
        pmf = instance.hospital_pmfs[d]
        n = np.arange(pmf.size)
        # blocking bound applied from n = 0: a schedule beyond total capacity
        # blocks even with no emergency load
        delta = np.maximum(0.0, _iceil(n - (total_cap - hosp_census[d])))
        exp += float(pmf @ delta)
    return exp


def _expected_offunit(
    instance: ScheduleInstance, census: np.ndarray, blocking: float
) -> np.ndarray:
    out = np.zeros((instance.n_wards, WEEK))
    for u in range(instance.n_wards):
        relief = instance.cancellation_share[u] * blocking
        for d in range(WEEK):
            pmf = instance.ward_pmfs[u][d]
            n = np.arange(pmf.size)
            rhs = n + census[u, d] - instance.capacities[u] - relief
            out[u, d] = float(pmf @ np.maximum(0.0, _iceil(rhs)))
    return out


def evaluate_schedule(
    psi: np.ndarray, instance: ScheduleInstance, tol: float = 1e-9
) -> ScheduleMetrics:
    """Score an integer weekly schedule against the instance's limits."""
    psi = np.asarray(psi)
    if psi.shape != (instance.n_types, WEEK):
        raise StructuralError(f"psi must have shape ({instance.n_types}, {WEEK})")
    if np.any(psi < 0) or not np.allclose(psi, np.round(psi)):
        raise StructuralError("psi must be nonnegative integers")
    psi = np.round(psi).astype(int)

    census = instance.elective_census(psi)
    hosp = census.sum(axis=0)
    blocking = _expected_blocking(instance, hosp)
    offunit = _expected_offunit(instance, census, blocking)

    violations = []
    if np.any(psi > instance.daily_caps):
        violations.append("daily_caps")
    if np.any(psi.sum(axis=1) < instance.baseline.sum(axis=1)):
        violations.append("volume_floor")
    if blocking > instance.blocking_limit + tol:
        violations.append("expected_blocking")
    if np.any(offunit > instance.offunit_limits[:, None] + tol):
        violations.append("off_unit")

    mean_census = (hosp + instance.emergency_mean.sum(axis=0)).mean()
    total_cap = instance.capacities.sum()
    return ScheduleMetrics(
        expected_blocking=blocking,
        expected_offunit=offunit,
        throughput=float(psi.sum()),
        reward=float(instance.rewards @ psi.sum(axis=1)),
        utilization=float(mean_census / total_cap) if total_cap > 0 else 0.0,
        feasible=not violations,
        violations=tuple(violations),
    )


@dataclass(frozen=True)
class ScheduleSolution:
    psi: np.ndarray
    objective: float
    metrics: ScheduleMetrics
    nodes: int
    bound: float
    gap: float
    certified: bool


@dataclass
class _SearchState:
    instance: ScheduleInstance
    order: list[tuple[int, int]]
    best_psi: np.ndarray | None = None
    best_obj: float = -math.inf
    nodes: int = 0
    deadline: float = math.inf
    node_limit: float = math.inf
    timed_out: bool = False
    leaf_violations: dict = field(default_factory=dict)


def _offunit_lb_ok(
    instance: ScheduleInstance,
    census_lo: np.ndarray,
    block_hi: float,
    tol: float,
) -> bool:
    """False when some ward-day off-unit bound fails for every completion."""
    relief_cap = min(block_hi, instance.blocking_limit)
    for u in range(instance.n_wards):
        relief = instance.cancellation_share[u] * relief_cap
        for d in range(WEEK):
            pmf = instance.ward_pmfs[u][d]
            n = np.arange(pmf.size)
            rhs = n + census_lo[u, d] - instance.capacities[u] - relief
            lb = float(pmf @ np.maximum(0.0, _iceil(rhs)))
            if lb > instance.offunit_limits[u] + tol:
                return False
    return True


def solve_exact(
    instance: ScheduleInstance,
    time_limit: float = 60.0,
    tol: float = 1e-9,
    node_limit: int | None = None,
) -> ScheduleSolution:
    """Certified-optimal weekly schedule, or best found within the limit.

    ``node_limit`` caps the search by node count; unlike the wall-clock
    limit it cuts off at the same point on every machine, so comparisons
    between incumbents of equally budgeted solves are reproducible.

    Raises
    ------
    InfeasibleError
        when no schedule satisfies all limits; the error names the
        constraint family that binds at the baseline schedule.
    """
    k, u7 = instance.n_types, WEEK
    if k == 0:
        psi = np.zeros((0, WEEK), dtype=int)
        metrics = evaluate_schedule(psi, instance, tol)
        if not metrics.feasible:
            raise InfeasibleError(
                "even the empty schedule violates "
                + ", ".join(metrics.violations),
                binding_family=metrics.violations[0],
            )
        return ScheduleSolution(psi, 0.0, metrics, 1, 0.0, 0.0, True)

    if np.any(instance.daily_caps.sum(axis=1) < instance.baseline.sum(axis=1)):
        raise InfeasibleError(
            "weekly volume floor exceeds the daily caps for some type",
            binding_family="daily_caps",
        )

    # assign high-reward types first, heaviest census footprint breaking
    # ties, each type's week left to right; heavy lanes early make census
    # bounds bite near the root
    load = instance.census_map.sum(axis=(1, 2, 3))
    type_order = np.lexsort((-load, -instance.rewards))
    order = [(int(ki), d) for ki in type_order for d in range(WEEK)]
    state = _SearchState(instance=instance, order=order)
    state.deadline = time.monotonic() + time_limit
    if node_limit is not None:
        state.node_limit = float(node_limit)

    caps = instance.daily_caps
    floors = instance.baseline.sum(axis=1)
    rewards = instance.rewards
    # remaining reward available from position i onward, all caps taken
    suffix = np.zeros(len(order) + 1)
    for i in range(len(order) - 1, -1, -1):
        ki, d = order[i]
        suffix[i] = suffix[i + 1] + max(rewards[ki], 0.0) * caps[ki, d]

    psi = np.zeros((k, WEEK), dtype=int)
    census = np.zeros((instance.n_wards, WEEK))
    cap_left = caps.sum(axis=1).astype(float)  # per type, not yet assigned
    # census added by taking every cap from position i onward
    suffix_census = np.zeros((len(order) + 1, instance.n_wards, WEEK))
    for i in range(len(order) - 1, -1, -1):
        ki, d = order[i]
        suffix_census[i] = suffix_census[i + 1] + caps[ki, d] * instance.census_map[ki, d]

    # when even the all-caps census with zero relief stays inside every
    # off-unit limit, the per-node off-unit bound can never prune
    offunit_can_bind = not _offunit_lb_ok(instance, suffix_census[0], 0.0, tol)

    # weekly bed-day budgets from a mean-value relaxation of the limits:
    # E[(N - x)+] >= E[N] - x turns each ward's off-unit bound into
    # sum_d census_u(d) <= 7 (cap_u + relief_u + o_u) - weekly emergency
    # mean, and the blocking bound into a hospital-level analog; any
    # feasible completion obeys both, so a fractional fill of the
    # cheapest-per-bed-day lanes bounds the remaining reward
    relief_max = instance.cancellation_share * instance.blocking_limit
    week_budget = (
        WEEK * (instance.capacities + relief_max + instance.offunit_limits)
        - instance.emergency_mean.sum(axis=1)
    )
    hosp_budget = (
        WEEK * instance.capacities.sum()
        - instance.emergency_mean.sum()
        + instance.blocking_limit
    )
    w_ward = instance.census_map[:, 0].sum(axis=2)  # (K, U) bed-days per admission
    w_hosp = w_ward.sum(axis=1)
    budget_w = [w_ward[:, u] for u in range(instance.n_wards)] + [w_hosp]
    budget_orders = [
        sorted(
            range(k),
            key=lambda t, w=w: -(rewards[t] / w[t] if w[t] > 1e-12 else math.inf),
        )
        for w in budget_w
    ]
    integral_rewards = bool(np.allclose(rewards, np.round(rewards)))

    blk_tails = [_tail_sums(instance.hospital_pmfs[d]) for d in range(WEEK)]
    ward_tails = [
        [_tail_sums(instance.ward_pmfs[u][d]) for d in range(WEEK)]
        for u in range(instance.n_wards)
    ]
    total_cap = instance.capacities.sum()

    def greedy_incumbent() -> tuple[np.ndarray, float] | None:
        """Feasible warm start: baseline plus reward-dense single admissions.

        Seeding the search with a deterministic incumbent makes a budget
        cutoff return a schedule of predictable quality instead of
        whatever leaf the tree walk reached first.
        """
        psi0 = instance.baseline.astype(int).copy()
        if np.any(psi0 > caps) or not evaluate_schedule(psi0, instance, tol).feasible:
            return None
        slots = sorted(
            (
                (ki, d)
                for ki in range(k)
                for d in range(WEEK)
                if caps[ki, d] > 0 and rewards[ki] > 0
            ),
            key=lambda kd: (
                -(rewards[kd[0]] / max(w_hosp[kd[0]], 1e-12)),
                kd[0],
                kd[1],
            ),
        )
        obj0 = float(rewards @ psi0.sum(axis=1))
        improved = True
        while improved:
            improved = False
            for ki, d in slots:
                if psi0[ki, d] >= caps[ki, d]:
                    continue
                psi0[ki, d] += 1
                if evaluate_schedule(psi0, instance, tol).feasible:
                    obj0 += rewards[ki]
                    improved = True
                else:
                    psi0[ki, d] -= 1
        return psi0, obj0

    def fast_blocking(hosp: np.ndarray) -> float:
        exp = 0.0
        for d in range(WEEK):
            s0, s1 = blk_tails[d]
            exp += _tail_expect(s0, s1, total_cap - hosp[d])
        return exp

    def fast_offunit_ok(census_lo: np.ndarray, block_hi: float) -> bool:
        relief_cap = min(block_hi, instance.blocking_limit)
        for u in range(instance.n_wards):
            free = (
                instance.capacities[u]
                + instance.cancellation_share[u] * relief_cap
            )
            limit = instance.offunit_limits[u] + tol
            for d in range(WEEK):
                s0, s1 = ward_tails[u][d]
                if _tail_expect(s0, s1, free - census_lo[u, d]) > limit:
                    return False
        return True

    def fill_bound() -> float:
        """Admissible cap on remaining reward; -inf when a budget is blown."""
        used = census.sum(axis=1)
        used_h = used.sum()
        best = math.inf
        for c, w in enumerate(budget_w):
            slack = week_budget[c] - used[c] if c < instance.n_wards else hosp_budget - used_h
            if slack < -tol:
                return -math.inf
            total, rem = 0.0, max(slack, 0.0)
            for ki in budget_orders[c]:
                if cap_left[ki] <= 0 or rewards[ki] <= 0:
                    continue
                if w[ki] <= 1e-12:
                    total += rewards[ki] * cap_left[ki]
                    continue
                take = min(cap_left[ki], rem / w[ki])
                total += rewards[ki] * take
                rem -= take * w[ki]
                if rem <= 1e-12:
                    break
            best = min(best, total)
        return best

    def recurse(i: int, obj: float) -> None:
        nonlocal census
        state.nodes += 1
        if state.nodes > state.node_limit or (
            state.nodes % 1024 == 0 and time.monotonic() > state.deadline
        ):
            state.timed_out = True
        if state.timed_out:
            return
        if obj + suffix[i] <= state.best_obj + tol:
            return
        hosp = census.sum(axis=0)
        block_lo = fast_blocking(hosp)
        if block_lo > instance.blocking_limit + tol:
            state.leaf_violations["expected_blocking"] = (
                state.leaf_violations.get("expected_blocking", 0) + 1
            )
            return
        if i == len(order):
            if np.any(psi.sum(axis=1) < floors):
                state.leaf_violations["volume_floor"] = (
                    state.leaf_violations.get("volume_floor", 0) + 1
                )
                return
            metrics = evaluate_schedule(psi, instance, tol)
            if not metrics.feasible:
                for fam in metrics.violations:
                    state.leaf_violations[fam] = state.leaf_violations.get(fam, 0) + 1
                return
            if metrics.reward > state.best_obj + tol:
                state.best_obj = metrics.reward
                state.best_psi = psi.copy()
            return
        ki, d = order[i]
        if offunit_can_bind:
            # largest blocking any completion could have: remaining all at caps
            block_hi = fast_blocking((census + suffix_census[i]).sum(axis=0))
            if not fast_offunit_ok(census, block_hi):
                state.leaf_violations["off_unit"] = (
                    state.leaf_violations.get("off_unit", 0) + 1
                )
                return
        fb = fill_bound()
        if math.isfinite(fb) and integral_rewards:
            # fractional fill rounds down: total reward is an integer
            fb = math.floor(fb + 1e-9)
        if obj + fb <= state.best_obj + tol:
            return
        assigned = psi[ki].sum()
        future_cap = cap_left[ki]
        for v in range(caps[ki, d], -1, -1):
            if assigned + v + (future_cap - caps[ki, d]) < floors[ki]:
                break  # even full caps later cannot reach the floor
            psi[ki, d] = v
            if v:
                census += v * instance.census_map[ki, d]
            cap_left[ki] -= caps[ki, d]
            recurse(i + 1, obj + rewards[ki] * v)
            cap_left[ki] += caps[ki, d]
            if v:
                census -= v * instance.census_map[ki, d]
            psi[ki, d] = 0
            if state.timed_out:
                return

    warm = greedy_incumbent()
    if warm is not None:
        state.best_psi, state.best_obj = warm

    recurse(0, 0.0)

    if state.best_psi is None:
        base_metrics = evaluate_schedule(instance.baseline, instance, tol)
        if base_metrics.violations:
            family = base_metrics.violations[0]
        elif state.leaf_violations:
            family = max(state.leaf_violations, key=state.leaf_violations.get)
        else:
            family = "unknown"
        raise InfeasibleError(
            "no feasible weekly schedule; baseline violates "
            + (", ".join(base_metrics.violations) or "nothing directly")
            + f"; most common search violation: {family}",
            binding_family=family,
        )

    metrics = evaluate_schedule(state.best_psi, instance, tol)
    root_bound = float(suffix[0])
    gap = 0.0 if not state.timed_out else max(0.0, root_bound - state.best_obj)
    return ScheduleSolution(
        psi=state.best_psi,
        objective=state.best_obj,
        metrics=metrics,
        nodes=state.nodes,
        bound=root_bound if state.timed_out else state.best_obj,
        gap=gap,
        certified=not state.timed_out,
    )


def enumerate_schedules(instance: ScheduleInstance):
    """Yield every schedule satisfying caps and floors (small instances)."""
    caps = instance.daily_caps
    floors = instance.baseline.sum(axis=1)
    k = instance.n_types
    per_type = []
    for ki in range(k):
        rows = [
            np.array(row, dtype=int)
            for row in itertools.product(*(range(c + 1) for c in caps[ki]))
            if sum(row) >= floors[ki]
        ]
        per_type.append(rows)
    for combo in itertools.product(*per_type):
        yield np.stack(combo) if k else np.zeros((0, WEEK), dtype=int)
