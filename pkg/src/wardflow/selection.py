"""Cluster-count selection and redundancy pruning.

Two complementary mechanisms:

* an elbow scan over K keeping the best final objective per K and stopping
  where the relative improvement drops below a threshold;
* pairwise similarity tests between fitted components (admission pmfs and
  stay-length pmfs by a discrete two-sample KS test, transfer matrices by a
  row-pooled chi-square in the style of homogeneity tests for Markov
  chains), merging a pair only when none of the three tests rejects at the
  Bonferroni-corrected level.

All tests take soft (responsibility-weighted) counts as their sample sizes.
The continuous KS reference distribution is conservative on discrete
support, which errs on the side of merging less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import chi2

from .errors import ConfigurationError
from .types import Hyperparams, MembershipMatrix, SmmParams
from .em import (
    EmConfig,
    EmResult,
    TrajectoryBatch,
    expected_counts,
    fit,
    m_step,
)

__all__ = [
    "ElbowScan",
    "elbow_scan",
    "ks_discrete_test",
    "transition_chisq_test",
    "ComponentComparison",
    "compare_components",
    "MergeReport",
    "merge_redundant",
    "recovery_pvalues",
]


# ---------------------------------------------------------------------------
# Elbow scan


@dataclass(frozen=True)
class ElbowScan:
    k_values: tuple[int, ...]
    q_values: tuple[float, ...]
    improvements: tuple[float, ...]  # relative improvement K -> K+1
    chosen_k: int
    results: tuple[EmResult, ...]


def elbow_scan(
    data: TrajectoryBatch,
    k_values: list[int],
    base_config: EmConfig,
    threshold: float = 0.01,
) -> ElbowScan:
    """Fit every K and pick the smallest one past the elbow.

    ``chosen_k`` is the smallest K whose relative objective improvement to
    the next scanned K falls below ``threshold``; when no K qualifies the
    largest scanned K is returned.
    """
    ks = sorted(set(k_values))
    if len(ks) < 2:
        raise ConfigurationError("elbow scan needs at least two distinct K values")
    if threshold <= 0:
        raise ConfigurationError("threshold must be > 0")
    results = []
    for k in ks:
        cfg = EmConfig(
            n_clusters=k,
            max_iter=base_config.max_iter,
            restarts=base_config.restarts,
            epsilon=base_config.epsilon,
            seed=base_config.seed,
            count_mode=base_config.count_mode,
            shared_holding=base_config.shared_holding,
            reassignment_tol=base_config.reassignment_tol,
        )
        results.append(fit(data, cfg))
    qs = [r.final_q for r in results]
    improvements = []
    chosen = ks[-1]
    found = False
    for i in range(len(ks) - 1):
        denom = abs(qs[i]) if qs[i] != 0 else 1.0
        rel = (qs[i + 1] - qs[i]) / denom
        improvements.append(rel)
        if not found and rel < threshold:
            chosen = ks[i]
            found = True
    return ElbowScan(
        k_values=tuple(ks),
        q_values=tuple(qs),
        improvements=tuple(improvements),
        chosen_k=chosen,
        results=tuple(results),
    )


# ---------------------------------------------------------------------------
# Distribution tests


def ks_discrete_test(
    pmf_a: np.ndarray,
    n_a: float,
    pmf_b: np.ndarray,
    n_b: float | None = None,
) -> tuple[float, float]:
    """Two-sample (or one-sample when ``n_b`` is None) KS test on pmfs.

    Returns ``(statistic, p_value)`` using the asymptotic Kolmogorov
    distribution with the small-sample correction of Stephens. ``n_b=None``
    treats ``pmf_b`` as an exact reference distribution.
    """
    a = np.asarray(pmf_a, dtype=float)
    b = np.asarray(pmf_b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(f"pmf shapes differ: {a.shape} vs {b.shape}")
    stat = float(np.max(np.abs(np.cumsum(a) - np.cumsum(b))))
    if n_b is None:
        n_eff = float(n_a)
    else:
        n_eff = float(n_a) * float(n_b) / max(float(n_a) + float(n_b), 1e-300)
    if n_eff <= 0 or stat == 0.0:
        return stat, 1.0
    root = np.sqrt(n_eff)
    lam = (root + 0.12 + 0.11 / root) * stat
    return stat, float(kolmogorov(lam))


def _merged_cells(expected: np.ndarray, floor: float) -> list[list[int]]:
    """Group cell indices so each group's pooled expected count is >= floor.

    Cells below the floor are folded into a single catch-all group (which may
    itself stay below the floor when there is simply not enough mass).
    """
    big = [[int(j)] for j in np.flatnonzero(expected >= floor)]
    small = [int(j) for j in np.flatnonzero((expected > 0) & (expected < floor))]
    if small:
        big.append(small)
    return big


def transition_chisq_test(
    counts_a: np.ndarray,
    counts_b: np.ndarray | None = None,
    ref_probs: np.ndarray | None = None,
    n_transient: int | None = None,
    min_expected: float = 5.0,
) -> tuple[float, float, int]:
    """Row-pooled chi-square comparison of transfer behaviour.

    Two modes:

    * homogeneity, with two count matrices: each transient row is compared
      against the pooled row estimate, summing the statistic over both
      samples; degrees of freedom add ``m_u - 1`` per row with at least two
      merged cells;
    * goodness-of-fit, with ``ref_probs``: expected counts are the row totals
      of ``counts_a`` times the reference row.

    Cells with pooled expected count below ``min_expected`` are merged into
    one catch-all cell per row. Returns ``(statistic, p_value, df)``;
    ``df == 0`` yields p = 1 (no informative rows).
    """
    a = np.asarray(counts_a, dtype=float)
    nt = a.shape[0] if n_transient is None else n_transient
    if (counts_b is None) == (ref_probs is None):
        raise ConfigurationError("provide exactly one of counts_b or ref_probs")

    stat, df = 0.0, 0
    for u in range(nt):
        row_a = a[u]
        if counts_b is not None:
            row_b = np.asarray(counts_b, dtype=float)[u]
            ta, tb = row_a.sum(), row_b.sum()
            if ta <= 0 or tb <= 0:
                continue
            pooled = (row_a + row_b) / (ta + tb)
            exp_a, exp_b = ta * pooled, tb * pooled
            groups = _merged_cells(exp_a + exp_b, min_expected)
            if len(groups) < 2:
                continue
            for g in groups:
                ea, eb = exp_a[g].sum(), exp_b[g].sum()
                if ea > 0:
                    stat += (row_a[g].sum() - ea) ** 2 / ea
                if eb > 0:
                    stat += (row_b[g].sum() - eb) ** 2 / eb
            df += len(groups) - 1
        else:
            ref = np.asarray(ref_probs, dtype=float)[u]
            ta = row_a.sum()
            if ta <= 0:
                continue
            exp_a = ta * ref
            groups = _merged_cells(exp_a, min_expected)
            if len(groups) < 2:
                continue
            for g in groups:
                ea = exp_a[g].sum()
                if ea > 0:
                    stat += (row_a[g].sum() - ea) ** 2 / ea
            df += len(groups) - 1
    if df == 0:
        return stat, 1.0, 0
    return stat, float(chi2.sf(stat, df)), df


# ---------------------------------------------------------------------------
# Pairwise component comparison and merging


@dataclass(frozen=True)
class ComponentComparison:
    pair: tuple[int, int]
    p_initial: float
    p_trans: float
    p_hold: float
    n_hold_cells: int

    @property
    def min_p(self) -> float:
        return min(self.p_initial, self.p_trans, self.p_hold)


def compare_components(
    params: SmmParams,
    counts,
    i: int,
    j: int,
    min_cell_count: float = 5.0,
) -> ComponentComparison:
    """Three-way similarity test between fitted components ``i`` and ``j``.

    ``counts`` is an :class:`wardflow.em.ExpectedCounts`. The stay-length
    p-value is the Bonferroni-corrected minimum over all transfer cells with
    at least ``min_cell_count`` soft observations in both components.
    """
    nt = params.space.n_transient
    sizes = counts.cluster
    _, p_init = ks_discrete_test(
        params.initial[i, :nt], sizes[i], params.initial[j, :nt], sizes[j]
    )
    _, p_trans, _ = transition_chisq_test(
        counts.trans[i], counts.trans[j], n_transient=nt
    )
    p_min, n_cells = 1.0, 0
    for u in range(nt):
        for w in range(params.n_states):
            if w == u:
                continue
            na, nb = counts.trans[i, u, w], counts.trans[j, u, w]
            if min(na, nb) < min_cell_count:
                continue
            _, p = ks_discrete_test(params.hold[i, u, w], na, params.hold[j, u, w], nb)
            p_min = min(p_min, p)
            n_cells += 1
    p_hold = min(1.0, p_min * n_cells) if n_cells else 1.0
    return ComponentComparison(
        pair=(i, j), p_initial=p_init, p_trans=p_trans, p_hold=p_hold, n_hold_cells=n_cells
    )


@dataclass(frozen=True)
class MergeReport:
    params: SmmParams
    membership: MembershipMatrix
    merges: tuple[tuple[int, int], ...]  # pairs merged, in pre-merge indexing per sweep
    comparisons: tuple[ComponentComparison, ...]

    @property
    def n_clusters(self) -> int:
        return self.params.n_clusters


def merge_redundant(
    data: TrajectoryBatch,
    params: SmmParams,
    membership: MembershipMatrix,
    alpha: float = 0.05,
    epsilon: float = 1e-5,
    min_cell_count: float = 5.0,
    shared_holding: bool = False,
) -> MergeReport:
    """Iteratively merge component pairs that no test can tell apart.

    A pair qualifies when all three p-values exceed the Bonferroni-corrected
    level ``alpha / n_pairs``; the qualifying pair with the largest minimum
    p-value merges first, responsibilities are summed, parameters refit by
    one M-step, and the scan repeats until nothing qualifies. ``alpha = 0``
    disables merging: a level-0 test rejects nothing, and we treat the
    absence of any rejection region as "no evidence of redundancy" rather
    than merging everything.
    """
    if alpha < 0 or alpha > 1:
        raise ConfigurationError("alpha must be in [0, 1]")
    omega = membership.omega.copy()
    cur_params = params
    merges: list[tuple[int, int]] = []
    all_cmps: list[ComponentComparison] = []

    while alpha > 0 and omega.shape[1] > 1:
        k = omega.shape[1]
        counts = expected_counts(data, omega)
        n_pairs = k * (k - 1) // 2
        level = alpha / n_pairs
        best: ComponentComparison | None = None
        for i in range(k):
            for j in range(i + 1, k):
                cmp_ = compare_components(cur_params, counts, i, j, min_cell_count)
                all_cmps.append(cmp_)
                if cmp_.min_p > level and (best is None or cmp_.min_p > best.min_p):
                    best = cmp_
        if best is None:
            break
        i, j = best.pair
        merges.append((i, j))
        omega[:, i] += omega[:, j]
        omega = np.delete(omega, j, axis=1)
        hyper = Hyperparams.from_epsilon(
            epsilon, omega.shape[1], data.n_states, data.max_hold
        )
        cur_params = m_step(data, omega, hyper, shared_holding=shared_holding)

    final_membership = MembershipMatrix(omega=omega)
    return MergeReport(
        params=cur_params,
        membership=final_membership,
        merges=tuple(merges),
        comparisons=tuple(all_cmps),
    )


def recovery_pvalues(
    est_params: SmmParams,
    est_counts,
    true_params: SmmParams,
    mapping: np.ndarray,
    min_cell_count: float = 5.0,
) -> list[dict]:
    """Estimated-vs-generating p-values per matched component.

    ``mapping[k_est] = k_true`` as returned by ``match_labels``. The
    admission and stay-length comparisons are one-sample KS tests against
    the generating pmfs; transfers use the goodness-of-fit chi-square.
    """
    nt = est_params.space.n_transient
    out = []
    for k_est in range(est_params.n_clusters):
        k_true = int(mapping[k_est])
        size = float(est_counts.cluster[k_est])
        _, p_init = ks_discrete_test(
            est_params.initial[k_est, :nt], size, true_params.initial[k_true, :nt]
        )
        _, p_trans, _ = transition_chisq_test(
            est_counts.trans[k_est], ref_probs=true_params.trans[k_true], n_transient=nt
        )
        p_min, n_cells = 1.0, 0
        for u in range(nt):
            for w in range(est_params.n_states):
                if w == u:
                    continue
                n_uw = est_counts.trans[k_est, u, w]
                if n_uw < min_cell_count:
                    continue
                _, p = ks_discrete_test(
                    est_params.hold[k_est, u, w], n_uw, true_params.hold[k_true, u, w]
                )
                p_min = min(p_min, p)
                n_cells += 1
        p_hold = min(1.0, p_min * n_cells) if n_cells else 1.0
        out.append(
            {
                "component": k_est,
                "matched_to": k_true,
                "p_initial": p_init,
                "p_trans": p_trans,
                "p_hold": p_hold,
            }
        )
    return out
