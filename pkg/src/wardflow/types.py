"""Core domain types: state spaces, trajectories, model parameters.

Conventions used everywhere in the package:

* States are dense integer indices ``0..n_states-1`` with transient wards
  first and absorbing exit states last.
* A trajectory is the sequence of ward visits of one patient, each visit a
  ``(ward, days)`` pair with ``days >= 1``, followed by the absorbing exit
  state the patient left through.
* Stay lengths are supported on ``1..max_hold``; index ``v - 1`` of the last
  axis of ``hold`` stores the probability of staying exactly ``v`` days.
* All probability arithmetic on trajectories happens in log space; ``-inf``
  is a legal log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, StructuralError

__all__ = [
    "StateSpace",
    "Trajectory",
    "Hyperparams",
    "SmmParams",
    "MembershipMatrix",
    "ValidationReport",
    "validate_params",
    "log_trajectory_likelihood",
]


@dataclass(frozen=True)
class StateSpace:
    """Ordered ward labels; transient wards first, absorbing exits last."""

    transient: tuple[str, ...]
    absorbing: tuple[str, ...]

    def __post_init__(self):
        if not self.transient:
            raise StructuralError("state space needs at least one transient ward")
        if not self.absorbing:
            raise StructuralError("state space needs at least one absorbing exit")
        names = self.transient + self.absorbing
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate state labels in {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return self.transient + self.absorbing

    @property
    def n_transient(self) -> int:
        return len(self.transient)

    @property
    def n_states(self) -> int:
        return len(self.transient) + len(self.absorbing)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise StructuralError(f"unknown state label {name!r}") from None

    def is_absorbing(self, state: int) -> bool:
        return state >= self.n_transient

    def transient_indices(self) -> np.ndarray:
        return np.arange(self.n_transient)

    def absorbing_indices(self) -> np.ndarray:
        return np.arange(self.n_transient, self.n_states)


@dataclass(frozen=True)
class Trajectory:
    """One patient path: ward visits with stay lengths, then the exit taken.

    ``visits`` is never empty; length-1 paths are dropped at ingestion, so a
    valid sample trajectory has at least one transfer between wards before
    the exit, but a bare one-visit trajectory is still representable (e.g.
    before filtering).
    """

    visits: tuple[tuple[int, int], ...]  # ((ward, days), ...)
    exit_state: int
    traj_id: str = ""
    attributes: dict | None = None

    def __post_init__(self):
        if not self.visits:
            raise StructuralError("trajectory has no visits")

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def total_days(self) -> int:
        return sum(v for _, v in self.visits)

    def validate(self, space: StateSpace, max_hold: int) -> None:
        """Raise StructuralError if the trajectory does not fit the space."""
        if not space.is_absorbing(self.exit_state) or self.exit_state >= space.n_states:
            raise StructuralError(
                f"trajectory {self.traj_id!r}: exit state {self.exit_state} is not absorbing"
            )
        for ward, days in self.visits:
            if not 0 <= ward < space.n_transient:
                raise StructuralError(
                    f"trajectory {self.traj_id!r}: visit ward {ward} is not transient"
                )
            if not 1 <= days <= max_hold:
                raise StructuralError(
                    f"trajectory {self.traj_id!r}: stay of {days} days outside 1..{max_hold}"
                )


@dataclass(frozen=True)
class Hyperparams:
    """Dirichlet pseudo-count per cell for each parameter family."""

    prior_weight: float
    prior_initial: float
    prior_trans: float
    prior_hold: float
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("prior_weight", "prior_initial", "prior_trans", "prior_hold"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    @classmethod
    def from_epsilon(cls, epsilon: float, n_clusters: int, n_states: int, max_hold: int) -> "Hyperparams":
        """Spread a total pseudo-mass ``epsilon`` over each family's cells.

        The divisor is the cell count of the family: K for the mixture
        weights, ``|U| K`` for initial wards, ``|U|^2 K`` for transfers and
        ``|U|^2 T K`` for stay lengths.
        """
        if epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if n_clusters < 1 or n_states < 2 or max_hold < 1:
            raise ConfigurationError("need n_clusters >= 1, n_states >= 2, max_hold >= 1")
        u = float(n_states)
        return cls(
            prior_weight=epsilon / n_clusters,
            prior_initial=epsilon / (u * n_clusters),
            prior_trans=epsilon / (u * u * n_clusters),
            prior_hold=epsilon / (u * u * max_hold * n_clusters),
            epsilon=epsilon,
        )


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SmmParams:
    """Mixture parameters: per-cluster admission, transfer and stay models.

    * ``weight``  (K,)          mixture weight of each cluster
    * ``initial`` (K, S)        admission ward pmf, mass on transient wards only
    * ``trans``   (K, S, S)     ward transfer matrix; transient rows are pmfs
                                with zero diagonal, absorbing rows self-loop
    * ``hold``    (K, S, S, T)  stay-length pmf per (origin, destination)
    """

    space: StateSpace
    weight: np.ndarray
    initial: np.ndarray
    trans: np.ndarray
    hold: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _readonly(self.weight))
        object.__setattr__(self, "initial", _readonly(self.initial))
        object.__setattr__(self, "trans", _readonly(self.trans))
        object.__setattr__(self, "hold", _readonly(self.hold))
        s = self.space.n_states
        k = self.weight.shape[0] if self.weight.ndim == 1 else -1
        if self.weight.ndim != 1:
            raise StructuralError(f"weight must be 1-d, got shape {self.weight.shape}")
        if self.initial.shape != (k, s):
            raise StructuralError(
                f"initial shape {self.initial.shape} != {(k, s)}"
            )
        if self.trans.shape != (k, s, s):
            raise StructuralError(f"trans shape {self.trans.shape} != {(k, s, s)}")
        if self.hold.ndim != 4 or self.hold.shape[:3] != (k, s, s) or self.hold.shape[3] < 1:
            raise StructuralError(
                f"hold shape {self.hold.shape} incompatible with {(k, s, s)} x T"
            )

    @property
    def n_clusters(self) -> int:
        return self.weight.shape[0]

    @property
    def n_states(self) -> int:
        return self.space.n_states

    @property
    def max_hold(self) -> int:
        return self.hold.shape[3]


@dataclass(frozen=True)
class ValidationReport:
    """Numeric violations found by validate_params; empty means valid."""

    violations: tuple[tuple[str, tuple, float], ...] = ()  # (family, index, deviation)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "params valid"
        lines = [f"{len(self.violations)} violation(s):"]
        for family, index, dev in self.violations[:20]:
            lines.append(f"  {family}{list(index)}: off by {dev:.3e}")
        if len(self.violations) > 20:
            lines.append(f"  ... {len(self.violations) - 20} more")
        return "\n".join(lines)


def validate_params(params: SmmParams, tol: float = 1e-9) -> ValidationReport:
    """Check simplex and structural-zero constraints on ``params``.

    Shape problems raise StructuralError at construction time; this function
    only reports numeric violations: entries outside [0, 1], rows off the
    simplex by more than ``tol``, mass on structurally-zero cells (initial
    mass on absorbing states, transfer self-loops, non-self transfers out of
    absorbing states).

    Returns
    -------
    ValidationReport
        ``report.ok`` is True when no violation was found.
    """
    v: list[tuple[str, tuple, float]] = []
    sp = params.space
    nt, s = sp.n_transient, sp.n_states

    def check_range(name, arr):
        bad = np.argwhere((arr < -tol) | (arr > 1 + tol))
        for idx in bad:
            v.append((name, tuple(int(i) for i in idx), float(arr[tuple(idx)])))

    check_range("weight", params.weight)
    check_range("initial", params.initial)
    check_range("trans", params.trans)
    check_range("hold", params.hold)

    dev = abs(params.weight.sum() - 1.0)
    if dev > tol:
        v.append(("weight_sum", (), float(dev)))

    for k in range(params.n_clusters):
        dev = abs(params.initial[k].sum() - 1.0)
        if dev > tol:
            v.append(("initial_sum", (k,), float(dev)))
        for a in range(nt, s):
            if params.initial[k, a] > tol:
                v.append(("initial_on_absorbing", (k, a), float(params.initial[k, a])))
        for u in range(nt):
            dev = abs(params.trans[k, u].sum() - 1.0)
            if dev > tol:
                v.append(("trans_row_sum", (k, u), float(dev)))
            if params.trans[k, u, u] > tol:
                v.append(("trans_self_loop", (k, u), float(params.trans[k, u, u])))
            for j in range(s):
                if j == u:
                    continue
                dev = abs(params.hold[k, u, j].sum() - 1.0)
                if dev > tol:
                    v.append(("hold_sum", (k, u, j), float(dev)))
        for a in range(nt, s):
            # absorbing rows must self-loop so occupancy mass stays put
            dev = abs(params.trans[k, a, a] - 1.0)
            if dev > tol:
                v.append(("absorbing_self_loop", (k, a), float(dev)))

    return ValidationReport(tuple(v))


@dataclass(frozen=True)
class MembershipMatrix:
    """Per-trajectory cluster responsibilities plus hard labels.

    ``assignments[n]`` is the argmax of row n with ties broken towards the
    lowest cluster index.
    """

    omega: np.ndarray  # (N, K), rows sum to 1
    assignments: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        om = np.array(self.omega, dtype=float)
        if om.ndim != 2:
            raise StructuralError(f"omega must be 2-d, got shape {om.shape}")
        rowsum = om.sum(axis=1)
        bad = np.argwhere(np.abs(rowsum - 1.0) > 1e-9)
        if bad.size:
            n = int(bad[0][0])
            raise StructuralError(
                f"omega row {n} sums to {rowsum[n]!r}, expected 1 within 1e-9"
            )
        if (om < 0).any():
            raise StructuralError("omega has negative entries")
        om.flags.writeable = False
        object.__setattr__(self, "omega", om)
        labels = np.argmax(om, axis=1)  # argmax takes the lowest index on ties
        labels.flags.writeable = False
        object.__setattr__(self, "assignments", labels)

    @property
    def n_trajectories(self) -> int:
        return self.omega.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.omega.shape[1]

    def cluster_sizes(self) -> np.ndarray:
        """Soft size of each cluster (column sums of omega)."""
        return self.omega.sum(axis=0)


def log_trajectory_likelihood(traj: Trajectory, cluster: int, params: SmmParams) -> float:
    """Log-probability of one trajectory under one mixture component.

    The trajectory contributes its admission ward, one transfer factor per
    visit (the last visit transfers into the exit state), and one
    stay-length factor per visit conditioned on the transfer taken.
    Structural zeros give ``-inf`` rather than raising.

    Parameters
    ----------
    traj : Trajectory
    cluster : int
        Component index in ``0..K-1``.
    params : SmmParams

    Returns
    -------
    float
        Natural-log likelihood; ``-inf`` when any factor is zero.
    """
    if not 0 <= cluster < params.n_clusters:
        raise StructuralError(f"cluster {cluster} outside 0..{params.n_clusters - 1}")
    traj.validate(params.space, params.max_hold)
    wards = [w for w, _ in traj.visits] + [traj.exit_state]
    total = 0.0
    with np.errstate(divide="ignore"):
        total += float(np.log(params.initial[cluster, wards[0]]))
        for i, (ward, days) in enumerate(traj.visits):
            nxt = wards[i + 1]
            total += float(np.log(params.trans[cluster, ward, nxt]))
            total += float(np.log(params.hold[cluster, ward, nxt, days - 1]))
    return total
