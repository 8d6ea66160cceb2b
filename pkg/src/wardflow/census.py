"""Weekly bed-demand distributions from occupancy curves and arrival plans.

The hospital runs on a repeating weekly plan, so every census quantity is
indexed by day of week (0..6 internally). A patient admitted on weekday
``d2`` some ``n`` weeks back occupies ward u today (weekday ``d1``) with
probability ``gamma_u(7 n + (d1 - d2) mod 7)``; folding over past weeks
turns one repeating admission slot into a stream of independent Bernoulli
trials, and a repeating Poisson arrival rate into a Poisson census.

Elective demand is therefore Poisson-Binomial (exact convolution DP over
the Bernoulli trials), emergency demand is Poisson, and the combined
forecast is their convolution. Scheduled electives are taken at face
value: exactly the planned number arrive, with no no-show noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .analytics import IntervalTransition, interval_transition, occupancy
from .errors import ConfigurationError, DataError, StructuralError
from .types import SmmParams

__all__ = [
    "ArrivalPlan",
    "CyclicOccupancy",
    "DemandDistribution",
    "CensusForecast",
    "cyclic_occupancy",
    "elective_demand",
    "emergency_demand",
    "combined_forecast",
    "poisson_binomial_pmf",
]

WEEK = 7
EPS_TAIL = 1e-9
_TRIM = 1e-15
_DROP_Q = 1e-14


@dataclass(frozen=True)
class ArrivalPlan:
    """Weekly-cyclic arrivals: column d is the weekday (0 = planning day 1).

    ``elective[k, d]`` is an integer head count; ``emergency_rates[k, d]``
    a Poisson rate. Rows index arrival types, which need not be the same
    set for the two streams.
    """

    elective: np.ndarray
    emergency_rates: np.ndarray

    def __post_init__(self) -> None:
        elect = np.asarray(self.elective, dtype=float)
        rates = np.asarray(self.emergency_rates, dtype=float)
        for name, arr in (("elective", elect), ("emergency_rates", rates)):
            if arr.ndim != 2 or arr.shape[1] != WEEK:
                raise StructuralError(f"{name} must have shape (n_types, 7)")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise StructuralError(f"{name} must be finite and nonnegative")
        if not np.allclose(elect, np.round(elect)):
            raise StructuralError("elective counts must be integers")
        object.__setattr__(self, "elective", np.round(elect).astype(int))
        object.__setattr__(self, "emergency_rates", rates)
        self.elective.setflags(write=False)
        self.emergency_rates.setflags(write=False)


@dataclass(frozen=True)
class CyclicOccupancy:
    """Occupancy curve of one arrival type, prepared for weekly folding."""

    gamma: np.ndarray  # (S, D+1), day 0 included
    n_transient: int

    def bernoulli_probs(self, ward: int, offset: int) -> np.ndarray:
        """gamma[ward, offset], gamma[ward, offset+7], ... (one week apart)."""
        return self.gamma[ward, offset % WEEK :: WEEK]

    def folded_mean(self, ward: int, offset: int) -> float:
        return float(self.bernoulli_probs(ward, offset).sum())

    def folded_means(self) -> np.ndarray:
        """(n_transient, 7): expected beds in ward u at weekday offset."""
        out = np.zeros((self.n_transient, WEEK))
        for u in range(self.n_transient):
            for off in range(WEEK):
                out[u, off] = self.folded_mean(u, off)
        return out


def cyclic_occupancy(
    params: SmmParams,
    cluster: int,
    tol: float = EPS_TAIL,
    interval: IntervalTransition | None = None,
) -> CyclicOccupancy:
    """Occupancy resolved deep enough that the dropped weeks carry < tol."""
    if interval is None:
        interval = interval_transition(params, cluster, tail_tol=tol)
    gamma = occupancy(params, cluster, interval=interval).gamma
    return CyclicOccupancy(gamma=gamma, n_transient=params.space.n_transient)


@dataclass(frozen=True)
class DemandDistribution:
    """Bed-demand pmfs per (ward, weekday).

    ``cell(u, d)`` returns the pmf array for ward u on weekday d; ``mean``
    and ``tail_mass`` are (U, 7). For Poisson (emergency) demand the
    hospital-level pmfs are included: the total over wards of independent
    Poisson counts is itself Poisson.
    """

    pmfs: tuple[tuple[np.ndarray, ...], ...]
    family: str
    mean: np.ndarray
    tail_mass: np.ndarray
    hospital_pmf: tuple[np.ndarray, ...] | None = None
    hospital_mean: np.ndarray | None = None

    @property
    def n_wards(self) -> int:
        return len(self.pmfs)

    def cell(self, ward: int, day: int) -> np.ndarray:
        return self.pmfs[ward][day % WEEK]

    def n_max(self, ward: int, day: int) -> int:
        return self.cell(ward, day).size - 1


def poisson_binomial_pmf(probs: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact pmf of a sum of independent Bernoulli trials.

    Sequential convolution; trailing mass below 1e-15 per step is trimmed
    and returned as the second element so truncation stays accounted for.
    Trials with negligible probability are folded into that tail as well.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.size and (probs.min() < 0 or probs.max() > 1 + 1e-12):
        raise DataError("occupancy probability outside [0, 1]; model inconsistency")
    probs = np.clip(probs, 0.0, 1.0)
    keep = probs > _DROP_Q
    tail = float(probs[~keep].sum())
    pmf = np.array([1.0])
    for q in probs[keep]:
        pmf = np.convolve(pmf, [1.0 - q, q])
        csum = np.cumsum(pmf[::-1])
        cut = np.searchsorted(csum, _TRIM)
        if cut > 0:
            tail += float(pmf[-cut:].sum())
            pmf = pmf[:-cut]
    return pmf, tail


def _offset_probs(
    occ: CyclicOccupancy, ward: int, d1: int, d2: int, copies: int
) -> np.ndarray:
    qs = occ.bernoulli_probs(ward, d1 - d2)
    if copies == 1:
        return qs
    return np.tile(qs, copies)


def elective_demand(
    plan: ArrivalPlan,
    occupancies: list[CyclicOccupancy],
    n_wards: int | None = None,
) -> DemandDistribution:
    """Poisson-Binomial bed demand from the repeating elective plan.

    ``occupancies[k]`` must describe the trajectory model of elective row
    k in the plan. Demand in ward u on weekday d1 collects one Bernoulli
    trial per scheduled head per past week.
    """
    if len(occupancies) != plan.elective.shape[0]:
        raise ConfigurationError(
            f"plan has {plan.elective.shape[0]} elective types but "
            f"{len(occupancies)} occupancy curves were given"
        )
    if n_wards is None:
        n_wards = occupancies[0].n_transient if occupancies else 0
    mean = np.zeros((n_wards, WEEK))
    tails = np.zeros((n_wards, WEEK))
    rows = []
    for u in range(n_wards):
        row = []
        for d1 in range(WEEK):
            parts = [
                _offset_probs(occ, u, d1, d2, int(plan.elective[k, d2]))
                for k, occ in enumerate(occupancies)
                for d2 in range(WEEK)
                if plan.elective[k, d2] > 0
            ]
            qs = np.concatenate(parts) if parts else np.empty(0)
            pmf, tail = poisson_binomial_pmf(qs)
            row.append(pmf)
            mean[u, d1] = float(qs.sum())
            tails[u, d1] = tail
        rows.append(tuple(row))
    return DemandDistribution(
        pmfs=tuple(rows), family="poisson-binomial", mean=mean, tail_mass=tails
    )


def _poisson_pmf(lam: float, eps: float) -> tuple[np.ndarray, float]:
    if lam <= 0:
        return np.array([1.0]), 0.0
    n_max = int(stats.poisson.ppf(1.0 - eps / 10, lam))
    pmf = stats.poisson.pmf(np.arange(n_max + 1), lam)
    return pmf, float(1.0 - pmf.sum())


def emergency_demand(
    plan: ArrivalPlan,
    occupancies: list[CyclicOccupancy],
    n_wards: int | None = None,
    eps_tail: float = EPS_TAIL,
) -> DemandDistribution:
    """Poisson bed demand from the repeating emergency arrival rates.

    Arrivals of type k on weekday d2 at rate lambda land in ward u on
    weekday d1 as an independent thinning, so ward counts are Poisson with
    the folded-occupancy mean, and the hospital total is Poisson too.
    """
    if len(occupancies) != plan.emergency_rates.shape[0]:
        raise ConfigurationError(
            f"plan has {plan.emergency_rates.shape[0]} emergency types but "
            f"{len(occupancies)} occupancy curves were given"
        )
    if n_wards is None:
        n_wards = occupancies[0].n_transient if occupancies else 0
    lam = np.zeros((n_wards, WEEK))
    for k, occ in enumerate(occupancies):
        fold = occ.folded_means()  # (U, offset)
        for d2 in range(WEEK):
            rate = plan.emergency_rates[k, d2]
            if rate == 0:
                continue
            for d1 in range(WEEK):
                lam[:, d1] += rate * fold[:, (d1 - d2) % WEEK]
    rows, tails = [], np.zeros((n_wards, WEEK))
    for u in range(n_wards):
        row = []
        for d1 in range(WEEK):
            pmf, tail = _poisson_pmf(lam[u, d1], eps_tail)
            row.append(pmf)
            tails[u, d1] = tail
        rows.append(tuple(row))
    hosp_lam = lam.sum(axis=0)
    hosp = tuple(_poisson_pmf(l, eps_tail)[0] for l in hosp_lam)
    return DemandDistribution(
        pmfs=tuple(rows),
        family="poisson",
        mean=lam,
        tail_mass=tails,
        hospital_pmf=hosp,
        hospital_mean=hosp_lam,
    )


@dataclass(frozen=True)
class CensusForecast:
    """Elective + emergency census per (ward, weekday), with exceedance."""

    demand: DemandDistribution
    capacities: np.ndarray | None
    exceedance: np.ndarray | None  # P(demand > capacity), (U, 7)

    @property
    def mean(self) -> np.ndarray:
        return self.demand.mean


def combined_forecast(
    elective: DemandDistribution,
    emergency: DemandDistribution,
    capacities: np.ndarray | None = None,
) -> CensusForecast:
    """Convolve the two independent demand streams per (ward, weekday)."""
    if elective.n_wards != emergency.n_wards:
        raise StructuralError("elective and emergency ward counts differ")
    n_wards = elective.n_wards
    if capacities is not None:
        capacities = np.asarray(capacities, dtype=float)
        if capacities.shape != (n_wards,):
            raise StructuralError(f"capacities must have shape ({n_wards},)")
    rows, exceed = [], np.zeros((n_wards, WEEK))
    tails = np.zeros((n_wards, WEEK))
    for u in range(n_wards):
        row = []
        for d in range(WEEK):
            pmf = np.convolve(elective.cell(u, d), emergency.cell(u, d))
            tails[u, d] = elective.tail_mass[u, d] + emergency.tail_mass[u, d]
            row.append(pmf)
            if capacities is not None:
                cap = int(np.floor(capacities[u]))
                inside = pmf[: cap + 1].sum() if cap >= 0 else 0.0
                exceed[u, d] = float(1.0 - inside)
        rows.append(tuple(row))
    demand = DemandDistribution(
        pmfs=tuple(rows),
        family="convolution",
        mean=elective.mean + emergency.mean,
        tail_mass=tails,
    )
    return CensusForecast(
        demand=demand,
        capacities=capacities,
        exceedance=exceed if capacities is not None else None,
    )
