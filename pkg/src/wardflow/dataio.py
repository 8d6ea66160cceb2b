"""File formats: raw stay records, trajectory exports, fitted-model artifacts.

Three shapes of data cross the package boundary:

* raw admit/transfer/discharge records, one CSV row per ward stay with
  entry and exit timestamps, a disposition on the final stay, and any
  number of extra attribute columns;
* trajectory files, JSON lines with one patient per line, already
  expressed in whole time units;
* model artifacts, a single JSON document holding the mixture parameters
  with their state space and fit metadata under a versioned schema tag.

Durations are discretized by ceiling to whole time units with a floor of
one unit: a patient present for any fraction of a day occupied a bed that
day.  After label grouping, consecutive stays in the same grouped ward are
merged into one visit, since the transfer model has no self-loops.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, is_dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, SchemaError
from .types import SmmParams, StateSpace, Trajectory, validate_params

__all__ = [
    "WardGroupingConfig",
    "identity_grouping",
    "IngestReport",
    "IngestResult",
    "ingest",
    "load_trajectories",
    "export_trajectories",
    "model_document",
    "save_model",
    "load_model",
    "LoadedModel",
]

MODEL_SCHEMA = "wardflow-model/1"

TIME_UNITS = {"day": 86_400.0, "hour": 3_600.0, "week": 604_800.0}

# float-noise guard: 259200.0000001 seconds is still exactly 3 days
_CEIL_EPS = 1e-9


@dataclass(frozen=True)
class WardGroupingConfig:
    """Total map from raw ward labels to grouped states, plus the exits.

    Every ward label and disposition label appearing in the input must
    have an entry in ``mapping``; targets in ``absorbing`` become exit
    states, all other targets become transient wards.
    """

    mapping: dict
    absorbing: tuple

    def __post_init__(self):
        if not self.absorbing:
            raise ConfigurationError("grouping needs at least one absorbing label")
        if len(set(self.absorbing)) != len(self.absorbing):
            raise ConfigurationError("duplicate absorbing labels")


def identity_grouping(space: StateSpace) -> WardGroupingConfig:
    """Grouping that maps a space's own labels to themselves."""
    return WardGroupingConfig(
        mapping={name: name for name in space.names},
        absorbing=tuple(space.absorbing),
    )


@dataclass(frozen=True)
class IngestReport:
    """What survived ingestion and what was discarded, with reasons."""

    n_records: int                 # rows (or lines) read
    n_rejected_records: int        # rows dropped for bad timestamps/durations
    n_patients: int                # distinct patients seen
    n_dropped_single: int          # patients filtered by the one-visit rule
    n_dropped_anomalous: int       # patients dropped for structural problems
    n_retained: int                # trajectories returned
    anomalies: tuple               # (patient_id, reason) pairs, capped

    @property
    def retention(self) -> float:
        return self.n_retained / self.n_patients if self.n_patients else 0.0


@dataclass(frozen=True)
class IngestResult:
    space: StateSpace
    trajectories: list
    report: IngestReport


_MAX_ANOMALIES = 50


def _parse_ts(value: str) -> datetime:
    try:
        return datetime.fromisoformat(value.strip())
    except ValueError as exc:
        raise ValueError(f"bad timestamp {value!r}") from exc


def _discretize(seconds: float, unit_seconds: float) -> int:
    return max(1, math.ceil(seconds / unit_seconds - _CEIL_EPS))


def _merge_consecutive(visits: list) -> list:
    out: list = []
    for ward, days in visits:
        if out and out[-1][0] == ward:
            out[-1] = (ward, out[-1][1] + days)
        else:
            out.append((ward, days))
    return out


def _read_csv_patients(path: Path, unit_seconds: float):
    """Yield per-patient stay lists from an event CSV, plus rejection info.

    Returns (patients, n_records, rejected, labels_seen) where patients
    maps patient id -> (stays, disposition, attributes) and each stay is
    (raw ward label, days).
    """
    required = {"patient_id", "ward", "entry", "exit", "disposition"}
    patients: dict = {}
    rejected: list = []
    labels: set = set()
    n_records = 0
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or []))
            raise DataError(f"CSV {path} lacks required columns {missing}")
        attr_cols = [c for c in reader.fieldnames if c not in required]
        for row in reader:
            n_records += 1
            pid = row["patient_id"]
            try:
                entry, exit_ = _parse_ts(row["entry"]), _parse_ts(row["exit"])
            except ValueError as exc:
                rejected.append((pid, str(exc)))
                continue
            seconds = (exit_ - entry).total_seconds()
            if seconds < 0:
                rejected.append((pid, f"exit before entry at {row['entry']}"))
                continue
            labels.add(row["ward"])
            rec = patients.setdefault(
                pid,
                {"stays": [], "disposition": None, "attributes": None},
            )
            rec["stays"].append((entry, row["ward"], _discretize(seconds, unit_seconds)))
            if row["disposition"].strip():
                rec["disposition"] = row["disposition"].strip()
                labels.add(rec["disposition"])
            if rec["attributes"] is None and attr_cols:
                rec["attributes"] = {c: row[c] for c in attr_cols}
    return patients, n_records, rejected, labels


def _read_jsonl_patients(path: Path):
    patients: dict = {}
    rejected: list = []
    labels: set = set()
    n_records = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_records += 1
            try:
                doc = json.loads(line)
                pid = str(doc.get("id", lineno))
                stays = [(None, str(w), int(d)) for w, d in doc["visits"]]
                exit_label = str(doc["exit"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                rejected.append((f"line {lineno}", f"unreadable line: {exc}"))
                continue
            if any(d < 1 for _, _, d in stays):
                rejected.append((pid, "stay below one time unit"))
                continue
            labels.update(w for _, w, _ in stays)
            labels.add(exit_label)
            patients[pid] = {
                "stays": stays,
                "disposition": exit_label,
                "attributes": doc.get("attributes"),
            }
    return patients, n_records, rejected, labels


def ingest(
    path: str | Path,
    grouping: WardGroupingConfig,
    time_unit: str = "day",
) -> IngestResult:
    """Read stay records, group wards, and assemble filtered trajectories.

    ``path`` may be an event CSV (columns ``patient_id, ward, entry, exit,
    disposition`` plus attributes) or a trajectory JSON-lines file; the
    suffix decides.  Ward labels must all be covered by ``grouping``;
    records with unparseable timestamps or negative durations are dropped
    individually and counted, patients left with a single visit are
    filtered per the one-visit rule, and both show up in the report.
    """
    if time_unit not in TIME_UNITS:
        raise ConfigurationError(
            f"time_unit must be one of {sorted(TIME_UNITS)}, got {time_unit!r}"
        )
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {path} does not exist")
    if path.suffix in (".jsonl", ".ndjson"):
        patients, n_records, rejected, labels = _read_jsonl_patients(path)
    else:
        patients, n_records, rejected, labels = _read_csv_patients(
            path, TIME_UNITS[time_unit]
        )

    unmapped = sorted(lbl for lbl in labels if lbl not in grouping.mapping)
    if unmapped:
        raise DataError(f"ward labels without a grouping entry: {unmapped}")

    absorbing = tuple(grouping.absorbing)
    transient = tuple(
        sorted(
            {
                grouping.mapping[lbl]
                for lbl in labels
                if grouping.mapping[lbl] not in absorbing
            }
        )
    )
    if not transient:
        raise DataError("no transient ward labels present in the input")
    space = StateSpace(transient=transient, absorbing=absorbing)

    anomalies = [(pid, reason) for pid, reason in rejected]
    trajectories = []
    n_single = 0
    n_anomalous = 0
    for pid in sorted(patients):
        rec = patients[pid]
        stays = sorted(rec["stays"], key=lambda s: (s[0] is not None, s[0]))
        if rec["disposition"] is None:
            n_anomalous += 1
            anomalies.append((pid, "no disposition on any record"))
            continue
        exit_label = grouping.mapping[rec["disposition"]]
        if exit_label not in absorbing:
            n_anomalous += 1
            anomalies.append((pid, f"disposition maps to ward {exit_label!r}"))
            continue
        visits = []
        bad = None
        for _, raw, days in stays:
            target = grouping.mapping[raw]
            if target in absorbing:
                bad = f"stay recorded in absorbing state {target!r}"
                break
            visits.append((space.index(target), days))
        if bad:
            n_anomalous += 1
            anomalies.append((pid, bad))
            continue
        visits = _merge_consecutive(visits)
        if len(visits) < 2:
            n_single += 1
            continue
        trajectories.append(
            Trajectory(
                visits=tuple(visits),
                exit_state=space.index(exit_label),
                traj_id=str(pid),
                attributes=rec["attributes"],
            )
        )

    report = IngestReport(
        n_records=n_records,
        n_rejected_records=len(rejected),
        n_patients=len(patients),
        n_dropped_single=n_single,
        n_dropped_anomalous=n_anomalous,
        n_retained=len(trajectories),
        anomalies=tuple(anomalies[:_MAX_ANOMALIES]),
    )
    return IngestResult(space=space, trajectories=trajectories, report=report)


def load_trajectories(path: str | Path) -> IngestResult:
    """Trajectory JSON lines with the state space taken from the file itself.

    Visit labels become transient wards, exit labels become absorbing
    states.  A label used both ways counts as absorbing, so patients with
    recorded stays in it are dropped as anomalous.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {path} does not exist")
    if path.suffix not in (".jsonl", ".ndjson"):
        raise DataError(f"{path} is not a trajectory JSON-lines file")
    _, _, _, labels = _read_jsonl_patients(path)
    exits: set = set()
    with path.open() as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                exits.add(str(json.loads(line)["exit"]))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
    if not exits:
        raise DataError(f"{path} holds no readable trajectories")
    grouping = WardGroupingConfig(
        mapping={lbl: lbl for lbl in labels | exits},
        absorbing=tuple(sorted(exits)),
    )
    return ingest(path, grouping)


def export_trajectories(
    path: str | Path, space: StateSpace, trajectories: list
) -> None:
    """Write trajectories as JSON lines using the space's ward labels."""
    path = Path(path)
    with path.open("w") as fh:
        for traj in trajectories:
            doc = {
                "id": traj.traj_id,
                "visits": [[space.names[w], int(d)] for w, d in traj.visits],
                "exit": space.names[traj.exit_state],
            }
            if traj.attributes is not None:
                doc["attributes"] = traj.attributes
            fh.write(json.dumps(doc) + "\n")


@dataclass(frozen=True)
class LoadedModel:
    params: SmmParams
    fit_config: dict
    objective: float | None
    schema: str


def model_document(
    params: SmmParams,
    fit_config=None,
    objective: float | None = None,
) -> dict:
    """JSON-ready artifact document for a fitted model."""
    if is_dataclass(fit_config):
        fit_config = asdict(fit_config)
    return {
        "schema": MODEL_SCHEMA,
        "space": {
            "transient": list(params.space.transient),
            "absorbing": list(params.space.absorbing),
        },
        "max_hold": params.max_hold,
        "weight": params.weight.tolist(),
        "initial": params.initial.tolist(),
        "trans": params.trans.tolist(),
        "hold": params.hold.tolist(),
        "fit_config": fit_config or {},
        "objective": objective,
    }


def save_model(
    path: str | Path,
    params: SmmParams,
    fit_config=None,
    objective: float | None = None,
) -> None:
    """Persist fitted parameters plus how they were obtained.

    JSON keeps shortest-round-trip float text, so ``load_model`` restores
    the exact same array bits.
    """
    Path(path).write_text(json.dumps(model_document(params, fit_config, objective)))


def load_model(path: str | Path) -> LoadedModel:
    """Read a model artifact back; reject wrong schemas and broken models."""
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != MODEL_SCHEMA:
        raise SchemaError(
            f"model file {path} has schema {doc.get('schema')!r}, "
            f"expected {MODEL_SCHEMA!r}"
        )
    try:
        space = StateSpace(
            transient=tuple(doc["space"]["transient"]),
            absorbing=tuple(doc["space"]["absorbing"]),
        )
        params = SmmParams(
            space=space,
            weight=np.array(doc["weight"], dtype=float),
            initial=np.array(doc["initial"], dtype=float),
            trans=np.array(doc["trans"], dtype=float),
            hold=np.array(doc["hold"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"model file {path} is malformed: {exc}") from exc
    if params.max_hold != doc.get("max_hold"):
        raise SchemaError(
            f"model file {path}: stay-length support {params.hold.shape[3]} "
            f"does not match recorded max_hold {doc.get('max_hold')}"
        )
    report = validate_params(params)
    if not report.ok:
        raise SchemaError(f"model file {path} fails validation: {report}")
    if np.any(params.weight <= 0):
        raise SchemaError(f"model file {path} contains an empty cluster")
    return LoadedModel(
        params=params,
        fit_config=doc.get("fit_config") or {},
        objective=doc.get("objective"),
        schema=doc["schema"],
    )
