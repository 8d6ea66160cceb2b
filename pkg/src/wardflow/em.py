"""MAP-EM fitting of the trajectory mixture.

Counts are soft by default (responsibility-weighted, the derived update);
``count_mode="hard"`` routes every trajectory's counts to its current hard
label instead, which reproduces the classic classification-EM behaviour.
Either way the first iteration uses the random hard assignment to break the
symmetry of an otherwise uniform start.

The recorded objective is the posterior objective

    sum_n log sum_k weight_k p(y_n | k)  +  sum_cells prior * log(theta)

whose prior term uses the pseudo-count exponents directly, so the
normalize-counts-plus-prior update is its exact maximizer and the trace is
non-decreasing in the soft mode.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, DataError, StructuralError
from .types import Hyperparams, MembershipMatrix, SmmParams, StateSpace, Trajectory

__all__ = [
    "EmConfig",
    "EmResult",
    "TrajectoryBatch",
    "encode_dataset",
    "e_step",
    "m_step",
    "ExpectedCounts",
    "expected_counts",
    "q_function",
    "map_objective",
    "fit",
    "match_labels",
    "clustering_scores",
]


@dataclass(frozen=True)
class EmConfig:
    n_clusters: int
    max_iter: int = 50
    restarts: int = 5
    epsilon: float = 1e-5
    seed: int = 0
    count_mode: str = "soft"  # "soft" | "hard"
    shared_holding: bool = False  # pool stay lengths across transfers, per cluster
    reassignment_tol: int | None = None  # stop early once label changes <= tol

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigurationError("n_clusters must be >= 1")
        if self.max_iter < 1 or self.restarts < 1:
            raise ConfigurationError("max_iter and restarts must be >= 1")
        if self.count_mode not in ("soft", "hard"):
            raise ConfigurationError(f"count_mode {self.count_mode!r} not in soft/hard")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")


@dataclass(frozen=True)
class TrajectoryBatch:
    """Dataset flattened for vectorized factor lookups.

    ``codes[m]`` packs the m-th transfer of the whole dataset as
    ``(origin * S + destination) * T + (days - 1)``; ``traj_index[m]`` says
    which trajectory it belongs to.
    """

    space: StateSpace
    max_hold: int
    first: np.ndarray        # (N,) admission ward per trajectory
    codes: np.ndarray        # (M,) packed transfer codes
    traj_index: np.ndarray   # (M,)
    n_trajectories: int

    @property
    def n_states(self) -> int:
        return self.space.n_states


def encode_dataset(
    trajectories: list[Trajectory], space: StateSpace, max_hold: int
) -> TrajectoryBatch:
    """Validate and flatten a dataset for the EM kernels."""
    if not trajectories:
        raise DataError("empty dataset")
    s, t = space.n_states, max_hold
    first = np.empty(len(trajectories), dtype=np.int64)
    codes: list[int] = []
    traj_index: list[int] = []
    for n, traj in enumerate(trajectories):
        traj.validate(space, max_hold)
        first[n] = traj.visits[0][0]
        wards = [w for w, _ in traj.visits] + [traj.exit_state]
        for i, (ward, days) in enumerate(traj.visits):
            codes.append((ward * s + wards[i + 1]) * t + (days - 1))
            traj_index.append(n)
    return TrajectoryBatch(
        space=space,
        max_hold=max_hold,
        first=first,
        codes=np.asarray(codes, dtype=np.int64),
        traj_index=np.asarray(traj_index, dtype=np.int64),
        n_trajectories=len(trajectories),
    )


def _log_factor_table(params: SmmParams) -> np.ndarray:
    """(K, S*S*T) table of log(trans) + log(hold) per packed code."""
    with np.errstate(divide="ignore"):
        lt = np.log(params.trans)[:, :, :, None]
        lh = np.log(params.hold)
    k = params.n_clusters
    return (lt + lh).reshape(k, -1)


def component_loglik(data: TrajectoryBatch, params: SmmParams) -> np.ndarray:
    """(N, K) log-likelihood of each trajectory under each component."""
    if params.space != data.space or params.max_hold != data.max_hold:
        raise StructuralError("params and dataset disagree on state space or max stay")
    k, n = params.n_clusters, data.n_trajectories
    table = _log_factor_table(params)
    with np.errstate(divide="ignore"):
        log_init = np.log(params.initial)
    out = np.empty((n, k))
    for c in range(k):
        vals = table[c, data.codes]
        # bincount treats -inf correctly only without nan; codes with zero
        # probability contribute -inf through the masked path below
        finite = np.isfinite(vals)
        if finite.all():
            acc = np.bincount(data.traj_index, weights=vals, minlength=n)
        else:
            acc = np.bincount(
                data.traj_index[finite], weights=vals[finite], minlength=n
            )
            dead = np.unique(data.traj_index[~finite])
            acc[dead] = -np.inf
        out[:, c] = log_init[c, data.first] + acc
    return out


def _normalize_rows(log_joint: np.ndarray) -> tuple[np.ndarray, int]:
    """Softmax per row in log space; all--inf rows become uniform."""
    n, k = log_joint.shape
    peak = np.max(log_joint, axis=1)
    dead = ~np.isfinite(peak)
    safe_peak = np.where(dead, 0.0, peak)
    with np.errstate(invalid="ignore"):
        w = np.exp(log_joint - safe_peak[:, None])
    w[dead] = 1.0
    omega = w / w.sum(axis=1, keepdims=True)
    return omega, int(dead.sum())


def e_step(data: TrajectoryBatch, params: SmmParams) -> MembershipMatrix:
    """Posterior responsibilities of each component for each trajectory.

    A trajectory with zero likelihood under every component gets uniform
    responsibilities and a RuntimeWarning is emitted.
    """
    with np.errstate(divide="ignore"):
        log_joint = np.log(params.weight)[None, :] + component_loglik(data, params)
    omega, n_dead = _normalize_rows(log_joint)
    if n_dead:
        warnings.warn(
            f"{n_dead} trajectories impossible under every component; "
            "responsibilities set uniform",
            RuntimeWarning,
            stacklevel=2,
        )
    return MembershipMatrix(omega=omega)


def _soft_counts(data: TrajectoryBatch, omega: np.ndarray):
    s, t = data.n_states, data.max_hold
    n, k = omega.shape
    hold_counts = np.empty((k, s, s, t))
    init_counts = np.empty((k, s))
    for c in range(k):
        w = omega[data.traj_index, c]
        hold_counts[c] = np.bincount(data.codes, weights=w, minlength=s * s * t).reshape(s, s, t)
        init_counts[c] = np.bincount(data.first, weights=omega[:, c], minlength=s)
    return init_counts, hold_counts


def _normalize_with_prior(counts: np.ndarray, prior: float, legal: np.ndarray) -> np.ndarray:
    """(counts + prior) / total over legal cells; uniform when total is zero."""
    padded = np.where(legal, counts + prior, 0.0)
    total = padded.sum(axis=-1, keepdims=True)
    n_legal = legal.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, padded / np.where(total > 0, total, 1.0), 0.0)
    fallback = np.where(legal, 1.0 / np.where(n_legal > 0, n_legal, 1), 0.0)
    zero_rows = (total == 0) & (n_legal > 0)
    return np.where(zero_rows, fallback, out)


@dataclass(frozen=True)
class ExpectedCounts:
    """Responsibility-weighted event counts per cluster."""

    initial: np.ndarray  # (K, S)
    trans: np.ndarray    # (K, S, S)
    hold: np.ndarray     # (K, S, S, T)
    cluster: np.ndarray  # (K,) soft cluster sizes


def expected_counts(data: TrajectoryBatch, membership: MembershipMatrix | np.ndarray) -> ExpectedCounts:
    """Soft counts of admissions, transfers and stays under ``membership``."""
    omega = membership.omega if isinstance(membership, MembershipMatrix) else np.asarray(membership, float)
    init_counts, hold_counts = _soft_counts(data, omega)
    return ExpectedCounts(
        initial=init_counts,
        trans=hold_counts.sum(axis=3),
        hold=hold_counts,
        cluster=omega.sum(axis=0),
    )


def m_step(
    data: TrajectoryBatch,
    membership: MembershipMatrix | np.ndarray,
    hyper: Hyperparams,
    shared_holding: bool = False,
) -> SmmParams:
    """Closed-form posterior update from (soft) counts plus pseudo-counts.

    Every legal parameter cell ends strictly positive whenever its prior is
    positive. With ``shared_holding`` the stay-length counts are pooled over
    all transfers of a cluster and the pooled pmf is copied to every legal
    (origin, destination) pair.
    """
    omega = membership.omega if isinstance(membership, MembershipMatrix) else np.asarray(membership, float)
    if omega.ndim != 2 or omega.shape[0] != data.n_trajectories:
        raise StructuralError(f"omega shape {omega.shape} does not match dataset")
    space = data.space
    s, nt, t = space.n_states, space.n_transient, data.max_hold
    k = omega.shape[1]

    init_counts, hold_counts = _soft_counts(data, omega)
    trans_counts = hold_counts.sum(axis=3)

    wc = omega.sum(axis=0)
    weight = (wc + hyper.prior_weight) / (wc.sum() + k * hyper.prior_weight)

    legal_init = np.zeros(s, dtype=bool)
    legal_init[:nt] = True
    initial = _normalize_with_prior(init_counts, hyper.prior_initial, legal_init[None, :])

    legal_trans = np.zeros((s, s), dtype=bool)
    legal_trans[:nt, :] = True
    np.fill_diagonal(legal_trans, False)
    trans = _normalize_with_prior(trans_counts, hyper.prior_trans, legal_trans[None, :, :])
    for a in range(nt, s):
        trans[:, a, a] = 1.0

    legal_hold = np.broadcast_to(legal_trans[None, :, :, None], (k, s, s, t))
    if shared_holding:
        pooled = (hold_counts * legal_trans[None, :, :, None]).sum(axis=(1, 2))
        pooled_pmf = _normalize_with_prior(pooled, hyper.prior_hold, np.ones((k, t), dtype=bool))
        hold = np.zeros((k, s, s, t))
        hold[..., 0] = 1.0
        hold = np.where(legal_trans[None, :, :, None], pooled_pmf[:, None, None, :], hold)
    else:
        hold = _normalize_with_prior(hold_counts, hyper.prior_hold, legal_hold)
        structural = ~legal_trans
        hold[:, structural, 0] = 1.0
        hold[:, structural, 1:] = 0.0

    return SmmParams(space=space, weight=weight, initial=initial, trans=trans, hold=hold)


def _log_prior_term(params: SmmParams, hyper: Hyperparams) -> float:
    """sum of prior * log(theta) over legal cells (normalizers dropped)."""
    space = params.space
    s, nt = space.n_states, space.n_transient
    total = 0.0
    with np.errstate(divide="ignore"):
        if hyper.prior_weight > 0:
            total += hyper.prior_weight * np.log(params.weight).sum()
        if hyper.prior_initial > 0:
            total += hyper.prior_initial * np.log(params.initial[:, :nt]).sum()
        legal = np.zeros((s, s), dtype=bool)
        legal[:nt, :] = True
        np.fill_diagonal(legal, False)
        if hyper.prior_trans > 0:
            total += hyper.prior_trans * np.log(params.trans[:, legal]).sum()
        if hyper.prior_hold > 0:
            total += hyper.prior_hold * np.log(params.hold[:, legal, :]).sum()
    return float(total)


def map_objective(data: TrajectoryBatch, params: SmmParams, hyper: Hyperparams) -> float:
    """Observed-data posterior objective (the quantity the fit trace records)."""
    with np.errstate(divide="ignore"):
        log_joint = np.log(params.weight)[None, :] + component_loglik(data, params)
    peak = np.max(log_joint, axis=1)
    dead = ~np.isfinite(peak)
    if dead.any():
        return float("-inf")
    ll = peak + np.log(np.exp(log_joint - peak[:, None]).sum(axis=1))
    return float(ll.sum() + _log_prior_term(params, hyper))


def q_function(
    data: TrajectoryBatch,
    params: SmmParams,
    membership: MembershipMatrix,
    hyper: Hyperparams,
) -> float:
    """Expected complete-data objective under fixed responsibilities.

    Zero-responsibility terms are dropped even when the component gives the
    trajectory probability zero (0 * -inf == 0 here). Constant prior
    normalizers are omitted, as in :func:`map_objective`.
    """
    omega = membership.omega
    with np.errstate(divide="ignore"):
        log_joint = np.log(params.weight)[None, :] + component_loglik(data, params)
    mask = omega > 0
    if np.any(mask & ~np.isfinite(log_joint)):
        return float("-inf")
    contrib = np.where(mask, omega * np.where(mask, log_joint, 0.0), 0.0)
    return float(contrib.sum() + _log_prior_term(params, hyper))


@dataclass(frozen=True)
class EmResult:
    params: SmmParams
    membership: MembershipMatrix
    q_trace: tuple[float, ...]              # best restart, one value per iteration
    reassignments: tuple[int, ...]          # label changes per iteration, best restart
    final_q: float
    best_restart: int
    restart_final_qs: tuple[float, ...]
    n_iter: int
    n_uniform_rows: int = 0                 # impossible-trajectory fallbacks seen
    config: EmConfig = field(default=None)  # type: ignore[assignment]


def _init_assignments(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.integers(0, k, size=n)
    # repair empty clusters with distinct random trajectories
    missing = [c for c in range(k) if not (z == c).any()]
    if missing:
        picks = rng.choice(n, size=len(missing), replace=False)
        z[picks] = missing
    return z


def _one_hot(z: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((z.size, k))
    out[np.arange(z.size), z] = 1.0
    return out


def fit(data: TrajectoryBatch, config: EmConfig) -> EmResult:
    """Random-restart MAP-EM; the restart with the best final objective wins.

    Each restart starts from a random hard assignment in which every cluster
    is non-empty; iteration 1's update uses that assignment, subsequent
    iterations use soft counts (or keep hard routing in ``count_mode="hard"``).
    """
    k = config.n_clusters
    n = data.n_trajectories
    if k > n:
        raise ConfigurationError(f"n_clusters {k} exceeds dataset size {n}")
    hyper = Hyperparams.from_epsilon(config.epsilon, k, data.n_states, data.max_hold)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)

    best: dict | None = None
    final_qs: list[float] = []
    for r, seq in enumerate(seeds):
        rng = np.random.default_rng(seq)
        z = _init_assignments(n, k, rng)
        omega = None
        trace: list[float] = []
        reassigns: list[int] = []
        n_uniform = 0
        params = None
        for it in range(config.max_iter):
            if it == 0 or config.count_mode == "hard":
                m_input = _one_hot(z, k)
            else:
                m_input = omega
            params = m_step(data, m_input, hyper, shared_holding=config.shared_holding)
            with np.errstate(divide="ignore"):
                log_joint = np.log(params.weight)[None, :] + component_loglik(data, params)
            omega, dead = _normalize_rows(log_joint)
            n_uniform += dead
            z_new = np.argmax(omega, axis=1)
            changed = int((z_new != z).sum())
            z = z_new
            peak = np.max(log_joint, axis=1)
            if np.isfinite(peak).all():
                ll = float((peak + np.log(np.exp(log_joint - peak[:, None]).sum(axis=1))).sum())
                trace.append(ll + _log_prior_term(params, hyper))
            else:
                trace.append(float("-inf"))
            reassigns.append(changed)
            if config.reassignment_tol is not None and changed <= config.reassignment_tol:
                break
        final_qs.append(trace[-1])
        if best is None or trace[-1] > best["final_q"]:
            best = {
                "params": params,
                "omega": omega,
                "trace": trace,
                "reassigns": reassigns,
                "final_q": trace[-1],
                "restart": r,
                "n_uniform": n_uniform,
            }
    assert best is not None
    return EmResult(
        params=best["params"],
        membership=MembershipMatrix(omega=best["omega"]),
        q_trace=tuple(best["trace"]),
        reassignments=tuple(best["reassigns"]),
        final_q=best["final_q"],
        best_restart=best["restart"],
        restart_final_qs=tuple(final_qs),
        n_iter=len(best["trace"]),
        n_uniform_rows=best["n_uniform"],
        config=config,
    )


def match_labels(labels_true: np.ndarray, labels_pred: np.ndarray, n_clusters: int) -> np.ndarray:
    """Permutation of predicted cluster ids maximizing agreement (Hungarian).

    Returns ``mapping`` with ``mapping[pred] = true``; predicted ids beyond
    the matched set (when cluster counts differ) map to themselves.
    """
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    k = max(n_clusters, int(labels_pred.max()) + 1 if labels_pred.size else 1)
    contingency = np.zeros((k, k))
    np.add.at(contingency, (labels_pred, labels_true), 1.0)
    rows, cols = linear_sum_assignment(-contingency)
    mapping = np.arange(k)
    mapping[rows] = cols
    return mapping


def clustering_scores(
    labels_true: np.ndarray, labels_pred: np.ndarray, n_clusters: int
) -> dict:
    """Accuracy and macro-F1 after optimal relabeling."""
    mapping = match_labels(labels_true, labels_pred, n_clusters)
    relabeled = mapping[np.asarray(labels_pred)]
    truth = np.asarray(labels_true)
    acc = float((relabeled == truth).mean())
    f1s = []
    for c in range(n_clusters):
        tp = float(((relabeled == c) & (truth == c)).sum())
        fp = float(((relabeled == c) & (truth != c)).sum())
        fn = float(((relabeled != c) & (truth == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return {"accuracy": acc, "macro_f1": float(np.mean(f1s)), "mapping": mapping}
