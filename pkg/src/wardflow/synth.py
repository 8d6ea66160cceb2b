"""Synthetic cohort generation: mixture samplers and attribute models.

The sampler is deliberately simple and fully vectorized: paths advance one
visit per round, every active path drawing its next ward and stay length
from the cumulative tables of its own cluster. A single seeded Generator
drives all draws, so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, GeneratorError, StructuralError
from .types import SmmParams, StateSpace, Trajectory, validate_params

__all__ = [
    "AttributeSpec",
    "GeneratorSpec",
    "PathBatch",
    "SampleReport",
    "sample_paths",
    "sample_dataset",
    "assign_attributes",
    "absorption_probabilities",
    "canonical_spec",
    "replication_spec",
    "random_spec",
]

DIAGNOSES = ("D1", "D2", "D3")


@dataclass(frozen=True)
class AttributeSpec:
    """Per-cluster demographic model: age normal, sex Bernoulli, diagnosis categorical."""

    age_mean: tuple[float, ...]
    age_sd: tuple[float, ...]
    male_prob: tuple[float, ...]
    diagnosis_probs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        k = len(self.age_mean)
        if not (len(self.age_sd) == len(self.male_prob) == len(self.diagnosis_probs) == k):
            raise StructuralError("attribute spec fields disagree on cluster count")
        for p in self.male_prob:
            if not 0 <= p <= 1:
                raise ConfigurationError(f"male_prob {p} outside [0, 1]")
        for probs in self.diagnosis_probs:
            if abs(sum(probs) - 1.0) > 1e-9:
                raise ConfigurationError(f"diagnosis probs {probs} do not sum to 1")

    @property
    def n_clusters(self) -> int:
        return len(self.age_mean)


@dataclass(frozen=True)
class GeneratorSpec:
    """A ground-truth mixture plus (optionally) its demographic model."""

    params: SmmParams
    attributes: AttributeSpec | None = None

    def __post_init__(self):
        report = validate_params(self.params)
        if not report.ok:
            raise StructuralError(f"generator parameters invalid: {report}")
        if self.attributes is not None and self.attributes.n_clusters != self.params.n_clusters:
            raise StructuralError("attribute model cluster count != mixture cluster count")


@dataclass(frozen=True)
class PathBatch:
    """Flat ragged storage for many sampled paths.

    Visit ``i`` of path ``n`` lives at ``offsets[n] + i``; ``offsets[n + 1]``
    is one past the end. ``clusters`` holds the generating component.
    """

    offsets: np.ndarray  # (N + 1,)
    wards: np.ndarray    # (total_visits,)
    holds: np.ndarray    # (total_visits,)
    exits: np.ndarray    # (N,)
    clusters: np.ndarray  # (N,)

    @property
    def n_paths(self) -> int:
        return self.exits.shape[0]

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def path(self, n: int) -> tuple[np.ndarray, np.ndarray, int]:
        lo, hi = self.offsets[n], self.offsets[n + 1]
        return self.wards[lo:hi], self.holds[lo:hi], int(self.exits[n])


@dataclass(frozen=True)
class SampleReport:
    n_generated: int
    n_retained: int
    dropped_single_visit: int

    @property
    def retention(self) -> float:
        return self.n_retained / self.n_generated if self.n_generated else 0.0


def absorption_probabilities(params: SmmParams, cluster: int) -> np.ndarray:
    """Probability of eventually exiting, per starting transient ward."""
    nt = params.space.n_transient
    q = params.trans[cluster, :nt, :nt]
    r = params.trans[cluster, :nt, nt:].sum(axis=1)
    try:
        return np.linalg.solve(np.eye(nt) - q, r)
    except np.linalg.LinAlgError:
        raise GeneratorError(
            f"cluster {cluster}: transfer matrix has no absorbing solution"
        ) from None


def _check_absorbing(params: SmmParams) -> None:
    for k in range(params.n_clusters):
        absorb = absorption_probabilities(params, k)
        if absorb.min() < 1 - 1e-9:
            raise GeneratorError(
                f"cluster {k}: absorption probability {absorb.min():.6f} < 1; "
                "paths would not terminate"
            )


def _pick(cum_rows: np.ndarray, r: np.ndarray) -> np.ndarray:
    # first index whose cumulative probability exceeds the uniform draw
    return (r[:, None] < cum_rows).argmax(axis=1)


def sample_paths(
    params: SmmParams,
    n: int,
    rng: np.random.Generator,
    clusters: np.ndarray | None = None,
    max_visits: int = 100_000,
) -> PathBatch:
    """Draw ``n`` complete paths from the mixture.

    Parameters
    ----------
    params : SmmParams
    n : int
    rng : numpy Generator
    clusters : optional array of component indices; drawn from the mixture
        weights when omitted.
    max_visits : guard against non-absorbing inputs.

    Returns
    -------
    PathBatch
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    _check_absorbing(params)
    s, nt = params.n_states, params.space.n_transient
    if clusters is None:
        clusters = _pick(np.tile(np.cumsum(params.weight), (n, 1)), rng.random(n))
    else:
        clusters = np.asarray(clusters, dtype=np.int64)
        if clusters.shape != (n,):
            raise StructuralError(f"clusters shape {clusters.shape} != ({n},)")

    cum_initial = np.cumsum(params.initial, axis=1)
    cum_trans = np.cumsum(params.trans, axis=1 + 1)
    cum_hold = np.cumsum(params.hold, axis=3)

    current = _pick(cum_initial[clusters], rng.random(n))
    alive = np.arange(n)
    exits = np.full(n, -1, dtype=np.int64)
    step_paths: list[np.ndarray] = []
    step_wards: list[np.ndarray] = []
    step_holds: list[np.ndarray] = []

    for _ in range(max_visits):
        if alive.size == 0:
            break
        k = clusters[alive]
        nxt = _pick(cum_trans[k, current], rng.random(alive.size))
        hold = _pick(cum_hold[k, current, nxt], rng.random(alive.size)) + 1
        step_paths.append(alive.copy())
        step_wards.append(current.copy())
        step_holds.append(hold)
        done = nxt >= nt
        exits[alive[done]] = nxt[done]
        alive = alive[~done]
        current = nxt[~done]
    else:
        raise GeneratorError(f"paths still active after {max_visits} visits")

    flat_path = np.concatenate(step_paths)
    order = np.argsort(flat_path, kind="stable")  # stable keeps visit order
    flat_path = flat_path[order]
    wards = np.concatenate(step_wards)[order]
    holds = np.concatenate(step_holds)[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, flat_path + 1, 1)
    offsets = np.cumsum(offsets)
    return PathBatch(offsets=offsets, wards=wards, holds=holds, exits=exits, clusters=clusters)


def assign_attributes(
    labels: np.ndarray, spec: AttributeSpec, rng: np.random.Generator
) -> list[dict]:
    """Draw one demographic record per label from the per-cluster model."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.n_clusters):
        raise StructuralError("label outside the attribute model's cluster range")
    means = np.asarray(spec.age_mean)[labels]
    sds = np.asarray(spec.age_sd)[labels]
    ages = rng.normal(means, sds)
    males = rng.random(labels.size) < np.asarray(spec.male_prob)[labels]
    diag_cum = np.cumsum(np.asarray(spec.diagnosis_probs), axis=1)
    diags = _pick(diag_cum[labels], rng.random(labels.size))
    return [
        {"age": float(a), "sex": "M" if m else "F", "diagnosis": DIAGNOSES[d]}
        for a, m, d in zip(ages, males, diags)
    ]


def sample_dataset(
    spec: GeneratorSpec, n: int, seed: int
) -> tuple[list[Trajectory], np.ndarray, SampleReport]:
    """Sample a cohort, drop single-visit paths, attach attributes.

    Returns
    -------
    (trajectories, labels, report)
        ``labels`` are the generating components of the retained paths;
        the report carries generated/retained counts.
    """
    rng = np.random.default_rng(seed)
    batch = sample_paths(spec.params, n, rng)
    lengths = batch.lengths()
    keep = np.flatnonzero(lengths > 1)
    labels = batch.clusters[keep]
    attrs: list[dict | None] = [None] * keep.size
    if spec.attributes is not None:
        attrs = assign_attributes(labels, spec.attributes, rng)
    trajectories = []
    for slot, n_idx in enumerate(keep):
        wards, holds, exit_state = batch.path(int(n_idx))
        trajectories.append(
            Trajectory(
                visits=tuple(zip(wards.tolist(), holds.tolist())),
                exit_state=exit_state,
                traj_id=f"p{int(n_idx):06d}",
                attributes=attrs[slot],
            )
        )
    report = SampleReport(
        n_generated=n,
        n_retained=len(trajectories),
        dropped_single_visit=n - len(trajectories),
    )
    return trajectories, labels, report


# ---------------------------------------------------------------------------
# Reference generators


def _hold_patterns() -> dict[str, list[float]]:
    return {
        "short": [0.55, 0.25, 0.10, 0.06, 0.04],
        "short2": [0.40, 0.40, 0.12, 0.05, 0.03],
        "mid": [0.15, 0.45, 0.22, 0.12, 0.06],
        "mid2": [0.10, 0.30, 0.40, 0.15, 0.05],
        "late": [0.06, 0.14, 0.42, 0.26, 0.12],
        "longer": [0.04, 0.08, 0.18, 0.35, 0.35],
        "vlong": [0.02, 0.05, 0.13, 0.30, 0.50],
    }


def _hold_tensor(space: StateSpace, t: int, cycle: list[str], rule: str = "sum") -> np.ndarray:
    """Fill stay-length pmfs for every legal (origin, destination) pair."""
    pats = _hold_patterns()
    s, nt = space.n_states, space.n_transient
    hold = np.zeros((s, s, t))
    hold[:, :, 0] = 1.0  # structural cells: point mass, never sampled
    for u in range(nt):
        for j in range(s):
            if j == u:
                continue
            idx = (u + j) % len(cycle) if rule == "sum" else (u + 2 * j) % len(cycle)
            hold[u, j] = pats[cycle[idx]]
    return hold


def _hold_cells(space: StateSpace, t: int, cells: list[list[str]]) -> np.ndarray:
    """Fill stay-length pmfs from an explicit per-(origin, destination) family map."""
    pats = _hold_patterns()
    s, nt = space.n_states, space.n_transient
    hold = np.zeros((s, s, t))
    hold[:, :, 0] = 1.0
    for u in range(nt):
        for j in range(s):
            if j == u:
                continue
            hold[u, j] = pats[cells[u][j]]
    return hold


def _assemble(space, weight, initial, trans_stack, hold_stack) -> SmmParams:
    s, nt = space.n_states, space.n_transient
    k = len(trans_stack)
    trans = np.zeros((k, s, s))
    for i, rows in enumerate(trans_stack):
        trans[i, :nt, :] = rows
        for a in range(nt, s):
            trans[i, a, a] = 1.0
    hold = np.stack(hold_stack)
    init = np.zeros((k, s))
    init[:, :nt] = initial
    return SmmParams(
        space=space,
        weight=np.asarray(weight, dtype=float),
        initial=init,
        trans=trans,
        hold=hold,
    )


def canonical_spec() -> GeneratorSpec:
    """Reference four-cluster generator used throughout the test experiments.

    W0 acts as a shared step-down ward: every cluster discharges from it with
    probability 0.45 and almost nobody is admitted directly into it, so the
    single-visit drop at ingestion removes the same small fraction from every
    cluster. On top of that base the four clusters form two pairs:

    * clusters 1/2 share admission mix and stay pmfs and differ purely in
      routing. Cluster 1 funnels patients into W0 within a hop or two (short
      episodes), cluster 2 circulates W1->W2->W3 and rarely touches W0 (long
      episodes).
    * clusters 3/4 share the same hub routing and admission mix and differ
      only in where the long stays sit: cluster 3 holds briefly before the
      favoured onward ward and long before the other one, cluster 4 the
      reverse. Their per-ward stay mixes are close to identical, so models
      that ignore the destination see nearly the same episode lengths.

    Every routing probability stays at or below 0.65.
    """
    space = StateSpace(transient=("W0", "W1", "W2", "W3"), absorbing=("EXIT",))
    t = 5
    weight = [0.17, 0.33, 0.25, 0.25]
    initial_pair_a = [0.05, 0.55, 0.15, 0.25]
    initial_pair_b = [0.05, 0.12, 0.58, 0.25]

    stepdown_row = [0.00, 0.22, 0.18, 0.15, 0.45]
    funnel = [
        stepdown_row,
        [0.62, 0.00, 0.14, 0.20, 0.04],
        [0.58, 0.26, 0.00, 0.12, 0.04],
        [0.62, 0.14, 0.20, 0.00, 0.04],
    ]
    circuit = [
        stepdown_row,
        [0.03, 0.00, 0.65, 0.28, 0.04],
        [0.03, 0.28, 0.00, 0.65, 0.04],
        [0.03, 0.65, 0.28, 0.00, 0.04],
    ]
    hub = [
        stepdown_row,
        [0.08, 0.00, 0.40, 0.48, 0.04],
        [0.08, 0.48, 0.00, 0.40, 0.04],
        [0.08, 0.40, 0.48, 0.00, 0.04],
    ]

    def pair_a_cells() -> list[list[str]]:
        cycle = ["late", "vlong", "mid2"]
        cells = [["short"] * 5]
        for u in (1, 2, 3):
            cells.append([cycle[(u + j) % 3] for j in range(5)])
        return cells

    def pair_b_cells(swap: bool) -> list[list[str]]:
        near, far = ("vlong", "short") if swap else ("short", "vlong")
        cells = [["short2"] * 5]
        for u in (1, 2, 3):
            row = ["mid"] * 5
            row[1 + ((u + 1) % 3)] = near  # favoured onward ward (p=0.48)
            row[1 + (u % 3)] = far         # the other one (p=0.40)
            cells.append(row)
        return cells

    hold_pair_a = _hold_cells(space, t, pair_a_cells())
    hold_near_short = _hold_cells(space, t, pair_b_cells(swap=False))
    hold_near_long = _hold_cells(space, t, pair_b_cells(swap=True))

    params = _assemble(
        space,
        weight,
        [initial_pair_a, initial_pair_a, initial_pair_b, initial_pair_b],
        [funnel, circuit, hub, hub],
        [hold_pair_a, hold_pair_a, hold_near_short, hold_near_long],
    )
    # the short-stay funnel and the long-stay circuit share an age/sex
    # profile on purpose: admission attributes flag WHERE a patient
    # enters, not how the episode unfolds, so clustering on attributes
    # cannot tell the two pathway types apart while their diagnosis mix
    # still differs
    attrs = AttributeSpec(
        age_mean=(27.0, 25.0, 40.0, 50.0),
        age_sd=(4.0, 4.0, 3.0, 3.0),
        male_prob=(0.45, 0.55, 0.70, 0.30),
        diagnosis_probs=(
            (0.20, 0.70, 0.10),
            (0.50, 0.25, 0.25),
            (0.10, 0.20, 0.70),
            (0.80, 0.10, 0.10),
        ),
    )
    return GeneratorSpec(params=params, attributes=attrs)


def replication_spec() -> GeneratorSpec:
    """Four-cluster generator with a heavy front-door discharge ward.

    Roughly a quarter of patients leave after a single visit (dropped at
    ingestion) and retained paths run long, which matches the texture of the
    larger consistency experiments. The front-door ward W0 is rarely
    re-entered, so retained paths cycle through W1..W3.
    """
    space = StateSpace(transient=("W0", "W1", "W2", "W3"), absorbing=("EXIT",))
    t = 5
    weight = [0.17, 0.33, 0.25, 0.25]
    initial = [0.52, 0.22, 0.16, 0.10]

    front_fwd = [
        [0.000, 0.295, 0.135, 0.080, 0.490],
        [0.015, 0.000, 0.620, 0.345, 0.020],
        [0.015, 0.280, 0.000, 0.690, 0.015],
        [0.015, 0.600, 0.365, 0.000, 0.020],
    ]
    front_rev = [
        [0.000, 0.080, 0.135, 0.295, 0.490],
        [0.015, 0.000, 0.310, 0.655, 0.020],
        [0.015, 0.690, 0.000, 0.280, 0.015],
        [0.015, 0.365, 0.600, 0.000, 0.020],
    ]
    front_hub = [
        [0.000, 0.155, 0.275, 0.080, 0.490],
        [0.015, 0.000, 0.640, 0.325, 0.020],
        [0.015, 0.485, 0.000, 0.485, 0.015],
        [0.015, 0.325, 0.640, 0.000, 0.020],
    ]

    hold_shared = _hold_tensor(space, t, ["short", "mid", "late"])
    hold_short = _hold_tensor(space, t, ["short", "short", "mid"])
    hold_long = _hold_tensor(space, t, ["longer", "vlong", "late"])

    params = _assemble(
        space,
        weight,
        [initial] * 4,
        [front_fwd, front_rev, front_hub, front_hub],
        [hold_shared, hold_shared, hold_short, hold_long],
    )
    return GeneratorSpec(params=params)


def random_spec(
    n_clusters: int,
    seed: int,
    n_wards: int = 4,
    max_hold: int = 5,
    mean_exit_prob: float = 0.125,
) -> GeneratorSpec:
    """Random valid generator, for consistency experiments at larger K."""
    if n_clusters < 1 or n_wards < 2:
        raise ConfigurationError("need n_clusters >= 1 and n_wards >= 2")
    rng = np.random.default_rng(seed)
    space = StateSpace(
        transient=tuple(f"W{i}" for i in range(n_wards)), absorbing=("EXIT",)
    )
    s, nt, t = space.n_states, n_wards, max_hold
    weight = rng.dirichlet(np.full(n_clusters, 5.0))
    initial = np.zeros((n_clusters, s))
    initial[:, :nt] = rng.dirichlet(np.full(nt, 1.5), size=n_clusters)
    trans = np.zeros((n_clusters, s, s))
    hold = np.zeros((n_clusters, s, s, t))
    hold[..., 0] = 1.0
    a, b = 2.0, 2.0 * (1 - mean_exit_prob) / mean_exit_prob
    for k in range(n_clusters):
        for u in range(nt):
            exit_prob = rng.beta(a, b)
            others = [j for j in range(nt) if j != u]
            trans[k, u, others] = (1 - exit_prob) * rng.dirichlet(np.full(nt - 1, 0.8))
            trans[k, u, nt] = exit_prob
            for j in range(s):
                if j != u:
                    hold[k, u, j] = rng.dirichlet(np.full(t, 0.9))
        for ab in range(nt, s):
            trans[k, ab, ab] = 1.0
    params = SmmParams(space=space, weight=weight, initial=initial, trans=trans, hold=hold)
    return GeneratorSpec(params=params)
