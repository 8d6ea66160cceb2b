"""Reference estimators the mixture fit is compared against.

Four ways to put patients into groups without fitting the full mixture:
diagnosis labels as-is, k-means or a diagonal Gaussian mixture on encoded
attributes, and a mixture fit whose holding pmf is shared across
transitions within a cluster. Any hard labeling feeds
``empirical_estimate``, which turns groups into per-group transition
parameters by frequency counting, so every method yields parameters the
analytics and scheduling layers consume identically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.mixture import GaussianMixture

from .em import EmConfig, EmResult, TrajectoryBatch, encode_dataset, fit
from .errors import ConfigurationError, DataError
from .types import SmmParams, StateSpace, Trajectory

__all__ = [
    "EmpiricalFit",
    "empirical_estimate",
    "encode_attributes",
    "kmeans_attribute_cluster",
    "gaussian_attribute_cluster",
    "drg_cluster",
    "markov_mixture_cluster",
]

_FLOOR = 1e-12


@dataclass(frozen=True)
class EmpiricalFit:
    params: SmmParams
    floored_rows: tuple[tuple[int, str, tuple[int, ...]], ...]
    counts_per_cluster: np.ndarray


def empirical_estimate(
    trajectories: list[Trajectory],
    labels: np.ndarray,
    space: StateSpace,
    max_hold: int,
    n_clusters: int | None = None,
) -> EmpiricalFit:
    """Frequency-normalized parameters per hard-labeled group.

    Rows with no observations cannot be normalized; they are replaced by
    the uniform distribution over structurally legal entries and listed in
    ``floored_rows`` as (cluster, kind, index) so the gap is visible.
    """
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (len(trajectories),):
        raise DataError("one label per trajectory required")
    if n_clusters is None:
        n_clusters = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=n_clusters)
    for k in range(n_clusters):
        if counts[k] == 0:
            raise DataError(f"cluster {k} has no trajectories")

    nt, s = space.n_transient, space.n_states
    init = np.zeros((n_clusters, s))
    trans = np.zeros((n_clusters, s, s))
    hold = np.zeros((n_clusters, s, s, max_hold))
    for traj, k in zip(trajectories, labels):
        traj.validate(space, max_hold)
        nexts = [w for w, _ in traj.visits[1:]] + [traj.exit_state]
        init[k, traj.visits[0][0]] += 1
        for (u, days), j in zip(traj.visits, nexts):
            trans[k, u, j] += 1
            hold[k, u, j, days - 1] += 1

    floored: list[tuple[int, str, tuple[int, ...]]] = []
    legal_trans = np.ones((s, s), dtype=bool)
    legal_trans[np.arange(nt), np.arange(nt)] = False
    legal_trans[nt:] = False

    weight = counts / counts.sum()
    for k in range(n_clusters):
        init[k] /= init[k].sum()
        for u in range(nt):
            row_total = trans[k, u].sum()
            if row_total < _FLOOR:
                floored.append((k, "trans", (u,)))
                trans[k, u, legal_trans[u]] = 1.0 / legal_trans[u].sum()
            else:
                trans[k, u] /= row_total
            for j in range(s):
                cell_total = hold[k, u, j].sum()
                if not legal_trans[u, j]:
                    hold[k, u, j] = 0.0
                    hold[k, u, j, 0] = 1.0
                elif cell_total < _FLOOR:
                    floored.append((k, "hold", (u, j)))
                    hold[k, u, j] = 1.0 / max_hold
                else:
                    hold[k, u, j] /= cell_total
        for a in range(nt, s):
            trans[k, a] = 0.0
            trans[k, a, a] = 1.0
            hold[k, a] = 0.0
            hold[k, a, :, 0] = 1.0

    params = SmmParams(space=space, weight=weight, initial=init, trans=trans, hold=hold)
    return EmpiricalFit(
        params=params,
        floored_rows=tuple(floored),
        counts_per_cluster=counts,
    )


def encode_attributes(records: list[dict]) -> tuple[np.ndarray, list[str]]:
    """Feature matrix: z-scored age, then one-hot sex and diagnosis."""
    if not records:
        raise DataError("no attribute records")
    ages = np.array([float(r["age"]) for r in records])
    sd = ages.std()
    cols = [(ages - ages.mean()) / (sd if sd > 0 else 1.0)]
    names = ["age_z"]
    sexes = sorted({str(r["sex"]) for r in records})
    for v in sexes:
        cols.append(np.array([1.0 if str(r["sex"]) == v else 0.0 for r in records]))
        names.append(f"sex={v}")
    diags = sorted({str(r["diagnosis"]) for r in records})
    for v in diags:
        cols.append(
            np.array([1.0 if str(r["diagnosis"]) == v else 0.0 for r in records])
        )
        names.append(f"diagnosis={v}")
    return np.column_stack(cols), names


def kmeans_attribute_cluster(
    records: list[dict], n_clusters: int, seed: int = 0, restarts: int = 10
) -> np.ndarray:
    if n_clusters > len(records):
        raise ConfigurationError(
            f"{n_clusters} clusters requested for {len(records)} records"
        )
    features, _ = encode_attributes(records)
    model = KMeans(
        n_clusters=n_clusters, n_init=restarts, random_state=seed
    ).fit(features)
    return model.labels_.astype(int)


def gaussian_attribute_cluster(
    records: list[dict],
    n_clusters: int,
    seed: int = 0,
    restarts: int = 5,
    var_floor: float = 1e-6,
) -> np.ndarray:
    if n_clusters > len(records):
        raise ConfigurationError(
            f"{n_clusters} clusters requested for {len(records)} records"
        )
    features, _ = encode_attributes(records)
    model = GaussianMixture(
        n_components=n_clusters,
        covariance_type="diag",
        reg_covar=var_floor,
        n_init=restarts,
        random_state=seed,
    ).fit(features)
    if np.min(model.covariances_) <= var_floor * 1.001:
        warnings.warn(
            "attribute mixture hit the variance floor; some component "
            "collapsed onto a degenerate feature",
            RuntimeWarning,
            stacklevel=2,
        )
    return model.predict(features).astype(int)


def drg_cluster(records: list[dict]) -> tuple[np.ndarray, list[str]]:
    """One cluster per distinct diagnosis label, labels sorted for stability."""
    if not records:
        raise DataError("no attribute records")
    diags = sorted({str(r["diagnosis"]) for r in records})
    index = {d: i for i, d in enumerate(diags)}
    return np.array([index[str(r["diagnosis"])] for r in records]), diags


def markov_mixture_cluster(
    data: TrajectoryBatch | tuple[list[Trajectory], StateSpace, int],
    config: EmConfig,
) -> EmResult:
    """Mixture fit with one holding pmf per cluster, shared across moves."""
    if not isinstance(data, TrajectoryBatch):
        trajectories, space, max_hold = data
        data = encode_dataset(trajectories, space, max_hold)
    shared = EmConfig(**{**config.__dict__, "shared_holding": True})
    return fit(data, shared)
