"""Day-grained distributional analytics for a fitted cluster.

Everything here is computed by exact dynamic programming over days, per
cluster. The interval-transition tensor ``phi[u, j, d]`` answers "given
admission to ward u on day 0, where is the patient at the end of day d";
rows always sum to one because the patient is somewhere (a ward or an
absorbing exit). Recursions convolve the one-visit kernel

    kernel[d'][u, l] = trans[u, l] * hold[u, l](d')      d' = 1..T

with either continued occupancy (interval transition) or first arrivals
(first passage). The kernel vanishes for d' > T, so every convolution is
a short sum regardless of the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, HorizonError, StructuralError
from .types import SmmParams

__all__ = [
    "IntervalTransition",
    "Occupancy",
    "FirstPassage",
    "LosDistribution",
    "WardDays",
    "resolve_horizon",
    "interval_transition",
    "occupancy",
    "first_passage",
    "total_los",
    "ward_days",
]

DEFAULT_TAIL_TOL = 1e-6
HARD_CAP = 50_000


def _visit_kernel(params: SmmParams, cluster: int) -> np.ndarray:
    """(T, S, S) one-visit kernel; absorbing rows are zero."""
    nt = params.space.n_transient
    kern = (params.trans[cluster][None, :, :] * np.moveaxis(params.hold[cluster], 2, 0)).copy()
    kern[:, nt:, :] = 0.0
    return kern


@dataclass(frozen=True)
class IntervalTransition:
    """phi[u, j, d] for d = 0..d_max; phi[:, :, 0] is the identity."""

    phi: np.ndarray
    d_max: int
    tail: np.ndarray  # transient mass left at d_max, per start state

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]


def _phi_recursion(
    kernel: np.ndarray, n_transient: int, d_max: int
) -> np.ndarray:
    t, s, _ = kernel.shape
    row_mass = kernel.sum(axis=2)  # (T, S): probability the visit lasts exactly d'
    phi = np.zeros((d_max + 1, s, s))
    phi[0] = np.eye(s)
    eye_abs = np.eye(s)[n_transient:]
    for d in range(1, d_max + 1):
        acc = np.zeros((s, s))
        for dp in range(1, min(d, t) + 1):
            acc += kernel[dp - 1] @ phi[d - dp]
        if d < t:
            # still in the first visit: holding longer than d days
            survive = row_mass[d:].sum(axis=0)
            acc[np.arange(n_transient), np.arange(n_transient)] += survive[:n_transient]
        acc[n_transient:] = eye_abs
        phi[d] = acc
    return phi


def resolve_horizon(
    params: SmmParams,
    cluster: int,
    tail_tol: float = DEFAULT_TAIL_TOL,
    cap: int | None = None,
) -> int:
    """Smallest horizon whose worst-case transient mass is below ``tail_tol``.

    The default cap is four times the model-implied 99th LOS percentile
    (never below 64 days); if the tolerance is not reached by the cap, the
    cap is returned and downstream consumers decide whether the remaining
    tail is acceptable.
    """
    if tail_tol <= 0:
        raise ConfigurationError("tail_tol must be > 0")
    kernel = _visit_kernel(params, cluster)
    nt = params.space.n_transient
    t, s, _ = kernel.shape
    window: list[np.ndarray] = [np.eye(s)]
    row_mass = kernel.sum(axis=2)
    d99: int | None = None
    d = 0
    while True:
        d += 1
        acc = np.zeros((s, s))
        for dp in range(1, min(d, t) + 1):
            acc += kernel[dp - 1] @ window[-dp]
        if d < t:
            survive = row_mass[d:].sum(axis=0)
            acc[np.arange(nt), np.arange(nt)] += survive[:nt]
        acc[nt:] = np.eye(s)[nt:]
        window.append(acc)
        if len(window) > t:
            window.pop(0)
        transient = acc[:nt, :nt].sum(axis=1)
        mixture_mass = float(params.initial[cluster, :nt] @ transient)
        if d99 is None and mixture_mass < 0.01:
            d99 = d
        limit = cap if cap is not None else (max(4 * d99, 64) if d99 is not None else HARD_CAP)
        if transient.max() < tail_tol:
            return d
        if d >= min(limit, HARD_CAP):
            return d


def interval_transition(
    params: SmmParams,
    cluster: int,
    d_max: int | None = None,
    tail_tol: float = DEFAULT_TAIL_TOL,
) -> IntervalTransition:
    """End-of-day location distribution per admission ward.

    Parameters
    ----------
    params, cluster : model and component index.
    d_max : horizon in days; resolved from ``tail_tol`` when omitted.
    tail_tol : target residual transient mass for horizon resolution.

    Returns
    -------
    IntervalTransition
        ``phi[u, j, d]``; every row sums to one at every day.
    """
    if not 0 <= cluster < params.n_clusters:
        raise StructuralError(f"cluster {cluster} out of range")
    if d_max is None:
        d_max = resolve_horizon(params, cluster, tail_tol)
    if d_max < 1:
        raise ConfigurationError("d_max must be >= 1")
    kernel = _visit_kernel(params, cluster)
    phi = _phi_recursion(kernel, params.space.n_transient, d_max)
    nt = params.space.n_transient
    tail = phi[d_max, :, :nt].sum(axis=1)
    return IntervalTransition(phi=np.moveaxis(phi, 0, 2), d_max=d_max, tail=tail)


@dataclass(frozen=True)
class Occupancy:
    """gamma[j, d]: location distribution of a random admission at day d."""

    gamma: np.ndarray
    d_max: int


def occupancy(
    params: SmmParams,
    cluster: int,
    d_max: int | None = None,
    tail_tol: float = DEFAULT_TAIL_TOL,
    interval: IntervalTransition | None = None,
) -> Occupancy:
    """Admission-weighted occupancy; reuses a precomputed tensor if given."""
    if interval is None:
        interval = interval_transition(params, cluster, d_max, tail_tol)
    gamma = np.einsum("u,ujd->jd", params.initial[cluster], interval.phi)
    return Occupancy(gamma=gamma, d_max=interval.d_max)


@dataclass(frozen=True)
class FirstPassage:
    """f[u, j, d]: first arrival at j exactly d days after admission to u."""

    f: np.ndarray  # (n_transient, S, d_max + 1)
    d_max: int


def first_passage(
    params: SmmParams,
    cluster: int,
    d_max: int | None = None,
    tail_tol: float = DEFAULT_TAIL_TOL,
) -> FirstPassage:
    """First-passage pmfs from every admission ward to every state.

    The day-0 column is zero: arrivals take at least one day, and the
    starting ward itself is not counted as a passage.
    """
    if not 0 <= cluster < params.n_clusters:
        raise StructuralError(f"cluster {cluster} out of range")
    if d_max is None:
        d_max = resolve_horizon(params, cluster, tail_tol)
    if d_max < 1:
        raise ConfigurationError("d_max must be >= 1")
    kernel = _visit_kernel(params, cluster)
    t = kernel.shape[0]
    s, nt = params.n_states, params.space.n_transient
    f = np.zeros((nt, s, d_max + 1))
    for j in range(s):
        # convolution kernel restricted to continuing through l != j, l transient
        k_cont = kernel[:, :nt, :nt].copy()
        if j < nt:
            k_cont[:, :, j] = 0.0
        fj = np.zeros((d_max + 1, nt))
        for d in range(1, d_max + 1):
            vec = kernel[d - 1, :nt, j] if d <= t else np.zeros(nt)
            acc = vec.copy()
            for dp in range(1, min(d, t) + 1):
                acc += k_cont[dp - 1] @ fj[d - dp]
            fj[d] = acc
        f[:, j, :] = fj.T
    return FirstPassage(f=f, d_max=d_max)


@dataclass(frozen=True)
class LosDistribution:
    """Total length-of-stay pmf over days, with its truncation tail."""

    pmf: np.ndarray       # (d_max + 1,), index = days
    by_start: np.ndarray  # (n_transient, d_max + 1)
    tail: float
    d_max: int

    @property
    def mean(self) -> float:
        days = np.arange(self.pmf.size)
        return float(days @ self.pmf)


def total_los(
    params: SmmParams,
    cluster: int,
    d_max: int | None = None,
    tail_tol: float = DEFAULT_TAIL_TOL,
    passage: FirstPassage | None = None,
) -> LosDistribution:
    """Length of stay = first passage into the absorbing set."""
    if passage is None:
        passage = first_passage(params, cluster, d_max, tail_tol)
    nt = params.space.n_transient
    by_start = passage.f[:, nt:, :].sum(axis=1)
    pmf = params.initial[cluster, :nt] @ by_start
    return LosDistribution(
        pmf=pmf,
        by_start=by_start,
        tail=float(1.0 - pmf.sum()),
        d_max=passage.d_max,
    )


@dataclass(frozen=True)
class WardDays:
    """Moments of total days spent in each ward, per admission ward.

    ``mean`` comes from summing the interval-transition tensor over days
    (day 0 included unless ``include_day_zero`` is False). The exact second
    moment and variance come from the visit-renewal closed form. The
    ``*_geometric`` fields carry the one-line shortcut
    ``second_moment = mean * (2 * mean - 1)``, exact only when total ward
    days are geometric; ``geometric_max_dev`` reports how far its variance
    is from the exact one so the shortcut's error is visible, not hidden.
    """

    mean: np.ndarray                  # (n_transient, n_transient)
    second_moment: np.ndarray
    variance: np.ndarray
    second_moment_geometric: np.ndarray
    variance_geometric: np.ndarray
    include_day_zero: bool
    geometric_max_dev: float


def _hitting_probabilities(trans: np.ndarray, nt: int, target: int) -> np.ndarray:
    """P(ever enter ``target`` | now entering l), for every transient l."""
    others = [l for l in range(nt) if l != target]
    if not others:
        return np.array([])
    sub = trans[np.ix_(others, others)]
    b = trans[others, target]
    h = np.linalg.solve(np.eye(len(others)) - sub, b)
    return h


def ward_days(
    params: SmmParams,
    cluster: int,
    include_day_zero: bool = True,
    d_max: int | None = None,
    tail_tol: float = DEFAULT_TAIL_TOL,
    interval: IntervalTransition | None = None,
) -> WardDays:
    """Expected ward days and their exact dispersion.

    Raises
    ------
    HorizonError
        if the truncated tensor still carries more transient mass than
        ``tail_tol`` at its horizon (the day-sum would be visibly short).
    """
    if interval is None:
        interval = interval_transition(params, cluster, d_max, tail_tol)
    if interval.tail.max() > tail_tol:
        raise HorizonError(
            f"transient tail {interval.tail.max():.3e} above {tail_tol:.1e} at "
            f"d_max={interval.d_max}; increase the horizon"
        )
    nt = params.space.n_transient
    start = 0 if include_day_zero else 1
    mean = interval.phi[:nt, :nt, start:].sum(axis=2)

    trans = params.trans[cluster]
    hold = params.hold[cluster]
    t = params.max_hold
    days = np.arange(1, t + 1)
    m_stay = hold @ days      # (S, S) mean stay given the transfer taken
    s_stay = hold @ days**2

    second = np.zeros((nt, nt))
    for j in range(nt):
        h = _hitting_probabilities(trans, nt, j)
        h_full = np.zeros(nt)
        h_full[[l for l in range(nt) if l != j]] = h
        ret = float(trans[j, :nt] @ h_full)  # trans[j, j] == 0
        if ret >= 1 - 1e-12:
            raise StructuralError(f"ward {j} is revisited forever; no absorption")
        dest = np.concatenate([np.arange(j), np.arange(j + 1, params.n_states)])
        stay_mean = float(trans[j, dest] @ m_stay[j, dest])
        stay_sq = float(trans[j, dest] @ s_stay[j, dest])
        ret_weighted = float(
            (trans[j, :nt] * h_full) @ m_stay[j, :nt]
        )
        v1 = stay_mean / (1 - ret)
        v2 = stay_sq / (1 - ret) + 2 * ret_weighted * stay_mean / (1 - ret) ** 2
        for u in range(nt):
            reach = 1.0 if u == j else h_full[u]
            ev2 = reach * v2
            if not include_day_zero and u == j:
                # dropping day 0 shortens the first stay by exactly one day
                ev2 = ev2 - 2 * reach * v1 + reach
            second[u, j] = ev2

    variance = second - mean**2
    variance = np.where(variance < 0, 0.0, variance)
    second_geo = mean * (2 * mean - 1)
    variance_geo = second_geo - mean**2
    dev = float(np.max(np.abs(variance_geo - variance)))
    return WardDays(
        mean=mean,
        second_moment=second,
        variance=variance,
        second_moment_geometric=second_geo,
        variance_geometric=variance_geo,
        include_day_zero=include_day_zero,
        geometric_max_dev=dev,
    )
