"""File boundary: event CSVs, trajectory JSON lines, model artifacts."""

import json

import numpy as np
import pytest

from conftest import two_ward_params
from wardflow.dataio import (
    WardGroupingConfig,
    export_trajectories,
    identity_grouping,
    ingest,
    load_model,
    load_trajectories,
    save_model,
)
from wardflow.em import EmConfig
from wardflow.errors import ConfigurationError, DataError, SchemaError
from wardflow.synth import canonical_spec, sample_dataset
from wardflow.types import StateSpace, Trajectory

GROUPING = WardGroupingConfig(
    mapping={"ICU": "ICU", "GEN": "GEN", "home": "home", "died": "died"},
    absorbing=("home", "died"),
)

HEADER = "patient_id,ward,entry,exit,disposition,age,sex\n"


def _write(tmp_path, name, body):
    p = tmp_path / name
    p.write_text(body)
    return p


def test_csv_ingest_assembles_trajectories(tmp_path):
    rows = (
        "p1,ICU,2024-01-01T00:00:00,2024-01-03T12:00:00,,61,F\n"
        "p1,GEN,2024-01-03T12:00:00,2024-01-08T12:00:00,home,61,F\n"
        "p2,GEN,2024-02-01T08:00:00,2024-02-02T08:00:00,,47,M\n"
        "p2,ICU,2024-02-02T08:00:00,2024-02-04T08:00:00,died,47,M\n"
    )
    res = ingest(_write(tmp_path, "events.csv", HEADER + rows), GROUPING)
    assert res.space.transient == ("GEN", "ICU")
    assert res.space.absorbing == ("home", "died")
    assert res.report.n_records == 4
    assert res.report.n_patients == 2
    assert res.report.n_retained == 2
    assert res.report.retention == 1.0

    t1, t2 = res.trajectories
    icu, gen = res.space.index("ICU"), res.space.index("GEN")
    assert t1.traj_id == "p1"
    assert t1.visits == ((icu, 3), (gen, 5))  # 2.5 days rounds up to 3
    assert t1.exit_state == res.space.index("home")
    assert t1.attributes == {"age": "61", "sex": "F"}
    assert t2.visits == ((gen, 1), (icu, 2))
    assert t2.exit_state == res.space.index("died")


def test_duration_ceiling_floor_and_noise(tmp_path):
    rows = (
        "a,ICU,2024-01-01T00:00:00,2024-01-01T04:48:00,,1,F\n"    # 0.2 days
        "a,GEN,2024-01-01T04:48:00,2024-01-04T04:48:00,home,1,F\n"  # 3.0 days
        "b,ICU,2024-01-01T00:00:00,2024-01-04T00:00:00.000050,,1,M\n"
        "b,GEN,2024-01-04T00:00:01,2024-01-06T00:00:00,home,1,M\n"
    )
    res = ingest(_write(tmp_path, "d.csv", HEADER + rows), GROUPING)
    by_id = {t.traj_id: t for t in res.trajectories}
    # any presence occupies at least one unit; sub-guard timestamp noise
    # (50 microseconds) does not inflate an exact three-day stay
    assert [d for _, d in by_id["a"].visits] == [1, 3]
    assert [d for _, d in by_id["b"].visits] == [3, 2]


def test_time_unit_selection(tmp_path):
    rows = "p,ICU,2024-01-01T00:00:00,2024-01-03T12:00:00,,1,F\n" \
           "p,GEN,2024-01-03T12:00:00,2024-01-10T12:00:00,home,1,F\n"
    path = _write(tmp_path, "u.csv", HEADER + rows)
    days = ingest(path, GROUPING, time_unit="day").trajectories[0]
    hours = ingest(path, GROUPING, time_unit="hour").trajectories[0]
    weeks = ingest(path, GROUPING, time_unit="week").trajectories[0]
    assert [d for _, d in days.visits] == [3, 7]
    assert [d for _, d in hours.visits] == [60, 168]
    assert [d for _, d in weeks.visits] == [1, 1]
    with pytest.raises(ConfigurationError):
        ingest(path, GROUPING, time_unit="fortnight")


def test_grouping_merges_consecutive_stays(tmp_path):
    grouping = WardGroupingConfig(
        mapping={"ICU-A": "ICU", "ICU-B": "ICU", "GEN": "GEN", "home": "home"},
        absorbing=("home",),
    )
    rows = (
        "p,ICU-A,2024-01-01T00:00:00,2024-01-02T00:00:00,,1,F\n"
        "p,ICU-B,2024-01-02T00:00:00,2024-01-04T00:00:00,,1,F\n"
        "p,GEN,2024-01-04T00:00:00,2024-01-05T00:00:00,home,1,F\n"
        "q,ICU-A,2024-01-01T00:00:00,2024-01-02T00:00:00,,1,M\n"
        "q,ICU-B,2024-01-02T00:00:00,2024-01-03T00:00:00,home,1,M\n"
    )
    res = ingest(_write(tmp_path, "g.csv", HEADER + rows), grouping)
    # p: the two ICU legs fuse into one 3-day visit; q collapses to a
    # single visit and the one-visit rule removes it
    assert res.report.n_dropped_single == 1
    assert res.report.n_retained == 1
    traj = res.trajectories[0]
    assert traj.visits == ((res.space.index("ICU"), 3), (res.space.index("GEN"), 1))


def test_row_and_patient_rejections(tmp_path):
    rows = (
        "ok,ICU,2024-01-01T00:00:00,2024-01-02T00:00:00,,1,F\n"
        "ok,GEN,2024-01-02T00:00:00,2024-01-03T00:00:00,home,1,F\n"
        "bad_ts,ICU,not-a-date,2024-01-02T00:00:00,home,1,F\n"
        "backwards,ICU,2024-01-05T00:00:00,2024-01-02T00:00:00,home,1,F\n"
        "no_dispo,ICU,2024-01-01T00:00:00,2024-01-02T00:00:00,,1,F\n"
        "no_dispo,GEN,2024-01-02T00:00:00,2024-01-03T00:00:00,,1,F\n"
        "in_exit,home,2024-01-01T00:00:00,2024-01-02T00:00:00,,1,F\n"
        "in_exit,GEN,2024-01-02T00:00:00,2024-01-03T00:00:00,home,1,F\n"
        "to_ward,ICU,2024-01-01T00:00:00,2024-01-02T00:00:00,,1,F\n"
        "to_ward,GEN,2024-01-02T00:00:00,2024-01-03T00:00:00,GEN,1,F\n"
    )
    res = ingest(_write(tmp_path, "r.csv", HEADER + rows), GROUPING)
    assert res.report.n_rejected_records == 2
    assert res.report.n_dropped_anomalous == 3
    assert res.report.n_retained == 1
    assert res.trajectories[0].traj_id == "ok"
    reasons = {pid: why for pid, why in res.report.anomalies}
    assert "timestamp" in reasons["bad_ts"]
    assert "exit before entry" in reasons["backwards"]
    assert "disposition" in reasons["no_dispo"]
    assert "absorbing" in reasons["in_exit"]
    assert "ward" in reasons["to_ward"]


def test_hard_failures(tmp_path):
    ok = HEADER + "p,ICU,2024-01-01T00:00:00,2024-01-02T00:00:00,home,1,F\n"
    with pytest.raises(DataError, match="SURGERY"):
        ingest(
            _write(tmp_path, "u.csv", ok.replace("ICU", "SURGERY")), GROUPING
        )
    with pytest.raises(DataError, match="columns"):
        ingest(_write(tmp_path, "c.csv", "patient_id,ward\np,ICU\n"), GROUPING)
    with pytest.raises(DataError, match="exist"):
        ingest(tmp_path / "nope.csv", GROUPING)
    with pytest.raises(ConfigurationError):
        WardGroupingConfig(mapping={}, absorbing=())
    with pytest.raises(ConfigurationError):
        WardGroupingConfig(mapping={}, absorbing=("out", "out"))


def test_trajectory_roundtrip(tmp_path):
    spec = canonical_spec()
    trajs, _, _ = sample_dataset(spec, 80, seed=4)
    path = tmp_path / "cohort.jsonl"
    export_trajectories(path, spec.params.space, trajs)

    back = load_trajectories(path)
    assert back.space.transient == spec.params.space.transient
    assert back.space.absorbing == spec.params.space.absorbing
    assert back.report.n_retained == len(trajs)
    by_id = {t.traj_id: t for t in back.trajectories}
    for orig in trajs:
        got = by_id[orig.traj_id]
        assert got.visits == orig.visits
        assert got.exit_state == orig.exit_state
        assert got.attributes == orig.attributes


def test_jsonl_line_rejections(tmp_path):
    lines = [
        json.dumps({"id": "good", "visits": [["A", 2], ["B", 1]], "exit": "out"}),
        "{broken json",
        json.dumps({"id": "short_stay", "visits": [["A", 0], ["B", 1]], "exit": "out"}),
        json.dumps({"id": "no_exit", "visits": [["A", 2]]}),
    ]
    path = _write(tmp_path, "lines.jsonl", "\n".join(lines) + "\n")
    res = load_trajectories(path)
    assert res.report.n_records == 4
    assert res.report.n_rejected_records == 3
    assert [t.traj_id for t in res.trajectories] == ["good"]

    empty = _write(tmp_path, "none.jsonl", "{broken\n")
    with pytest.raises(DataError, match="no readable"):
        load_trajectories(empty)
    with pytest.raises(DataError, match="JSON-lines"):
        load_trajectories(_write(tmp_path, "t.txt", ""))


def test_jsonl_label_used_both_ways(tmp_path):
    lines = [
        json.dumps({"id": "a", "visits": [["A", 2], ["B", 1]], "exit": "out"}),
        json.dumps({"id": "b", "visits": [["A", 1], ["out", 2]], "exit": "out"}),
    ]
    res = load_trajectories(_write(tmp_path, "both.jsonl", "\n".join(lines) + "\n"))
    assert res.report.n_dropped_anomalous == 1
    assert [t.traj_id for t in res.trajectories] == ["a"]


# ----------------------------------------------------------- model files


def test_model_roundtrip_is_bit_exact(tmp_path):
    params = two_ward_params()
    cfg = EmConfig(n_clusters=1, seed=9)
    path = tmp_path / "model.json"
    save_model(path, params, fit_config=cfg, objective=-123.456)

    loaded = load_model(path)
    assert loaded.schema == "wardflow-model/1"
    assert loaded.objective == -123.456
    assert loaded.fit_config["n_clusters"] == 1
    assert loaded.fit_config["seed"] == 9
    assert loaded.params.space == params.space
    for name in ("weight", "initial", "trans", "hold"):
        assert np.array_equal(getattr(loaded.params, name), getattr(params, name))


def test_model_rejections(tmp_path):
    params = two_ward_params()
    path = tmp_path / "model.json"
    save_model(path, params)

    with pytest.raises(DataError):
        load_model(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"

    bad.write_text("not json at all")
    with pytest.raises(SchemaError, match="valid JSON"):
        load_model(bad)

    doc = json.loads(path.read_text())
    doc["schema"] = "wardflow-model/0"
    bad.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="schema"):
        load_model(bad)

    doc = json.loads(path.read_text())
    doc["max_hold"] = 7
    bad.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="max_hold"):
        load_model(bad)

    doc = json.loads(path.read_text())
    del doc["trans"]
    bad.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="malformed"):
        load_model(bad)

    doc = json.loads(path.read_text())
    doc["trans"][0][0][1] = 0.9  # row no longer sums to one
    bad.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="validation"):
        load_model(bad)

    # an empty component needs an otherwise valid two-component document
    from wardflow.types import SmmParams

    twin = SmmParams(
        space=params.space,
        weight=np.array([1.0, 0.0]),
        initial=np.repeat(params.initial, 2, axis=0),
        trans=np.repeat(params.trans, 2, axis=0),
        hold=np.repeat(params.hold, 2, axis=0),
    )
    save_model(bad, twin)
    with pytest.raises(SchemaError, match="empty cluster"):
        load_model(bad)


def test_identity_grouping_matches_space():
    space = StateSpace(transient=("A", "B"), absorbing=("out",))
    g = identity_grouping(space)
    assert g.mapping == {"A": "A", "B": "B", "out": "out"}
    assert g.absorbing == ("out",)
