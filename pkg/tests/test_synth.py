"""Synthetic cohort generation: paths, attributes, the shipped generators."""

import numpy as np
import pytest

from wardflow.errors import ConfigurationError, StructuralError
from wardflow.synth import (
    AttributeSpec,
    GeneratorSpec,
    assign_attributes,
    absorption_probabilities,
    canonical_spec,
    random_spec,
    replication_spec,
    sample_dataset,
    sample_paths,
)
from wardflow.types import validate_params

# admission-attribute profile used for distribution checks: young mostly-male
# first group, older mostly-female fourth group, distinct diagnosis mixes
PROFILE = AttributeSpec(
    age_mean=(20.0, 30.0, 40.0, 50.0),
    age_sd=(3.0, 3.0, 3.0, 3.0),
    male_prob=(0.80, 0.20, 0.70, 0.30),
    diagnosis_probs=(
        (0.70, 0.20, 0.10),
        (0.20, 0.70, 0.10),
        (0.10, 0.20, 0.70),
        (0.10, 0.10, 0.80),
    ),
)


# ---------------------------------------------------------------- sampling


def test_sampling_deterministic_per_seed():
    spec = canonical_spec()
    a1, l1, r1 = sample_dataset(spec, 200, seed=3)
    a2, l2, r2 = sample_dataset(spec, 200, seed=3)
    assert [t.visits for t in a1] == [t.visits for t in a2]
    assert [t.attributes for t in a1] == [t.attributes for t in a2]
    assert np.array_equal(l1, l2)
    assert r1.n_retained == r2.n_retained
    b1, _, _ = sample_dataset(spec, 200, seed=4)
    assert [t.visits for t in a1] != [t.visits for t in b1]


def test_sampled_paths_are_storable():
    spec = canonical_spec()
    trajs, labels, rep = sample_dataset(spec, 400, seed=9)
    space, t_max = spec.params.space, spec.params.max_hold
    assert rep.n_generated == rep.n_retained + rep.dropped_single_visit
    assert rep.retention == pytest.approx(rep.n_retained / rep.n_generated)
    assert len(trajs) == rep.n_retained == labels.size
    for traj in trajs:
        assert len(traj.visits) >= 2
        assert space.is_absorbing(traj.exit_state)
        for (u, h), (v, _) in zip(traj.visits, traj.visits[1:]):
            assert u != v
        assert all(1 <= h <= t_max for _, h in traj.visits)


def test_label_frequencies_match_weights():
    spec = canonical_spec()
    _, labels, _ = sample_dataset(spec, 10_000, seed=5)
    w = spec.params.weight
    freq = np.bincount(labels, minlength=4) / labels.size
    # retention drops are not label-uniform, so allow drift on top of the
    # 3-sigma binomial band
    se = np.sqrt(w * (1 - w) / labels.size)
    assert np.all(np.abs(freq - w) < 3 * se + 0.02)


def test_attribute_edits_never_perturb_paths():
    base = canonical_spec()
    alt = GeneratorSpec(params=base.params, attributes=PROFILE)
    a, la, _ = sample_dataset(base, 300, seed=11)
    b, lb, _ = sample_dataset(alt, 300, seed=11)
    assert [t.visits for t in a] == [t.visits for t in b]
    assert np.array_equal(la, lb)
    assert [t.attributes for t in a] != [t.attributes for t in b]


def test_clusters_argument_fixes_mixture_draw():
    params = canonical_spec().params
    want = np.array([2, 2, 0, 1, 3])
    batch = sample_paths(params, 5, np.random.default_rng(0), clusters=want)
    assert np.array_equal(batch.clusters, want)
    free = sample_paths(params, 200, np.random.default_rng(0))
    assert batch.offsets[0] == 0 and batch.offsets[-1] == batch.wards.size
    assert np.all(free.exits >= params.space.n_transient)


def test_absorption_is_certain_from_every_ward():
    params = canonical_spec().params
    for k in range(params.n_clusters):
        assert absorption_probabilities(params, k) == pytest.approx(1.0)


# ---------------------------------------------------------------- attributes


def test_first_group_age_and_sex_distributions():
    n = 2000
    recs = assign_attributes(
        np.zeros(n, dtype=int), PROFILE, np.random.default_rng(17)
    )
    ages = np.array([r["age"] for r in recs])
    male = np.mean([r["sex"] == "M" for r in recs])
    assert abs(ages.mean() - 20.0) < 3 * 3.0 / np.sqrt(n)
    assert abs(ages.std() - 3.0) < 0.3
    assert abs(male - 0.80) < 3 * np.sqrt(0.8 * 0.2 / n)
    d1 = np.mean([r["diagnosis"] == "D1" for r in recs])
    assert abs(d1 - 0.70) < 3 * np.sqrt(0.7 * 0.3 / n)


def test_degenerate_attribute_spec_yields_constants():
    spec = AttributeSpec(
        age_mean=(20.0,),
        age_sd=(0.0,),
        male_prob=(1.0,),
        diagnosis_probs=((1.0, 0.0, 0.0),),
    )
    recs = assign_attributes(
        np.zeros(50, dtype=int), spec, np.random.default_rng(2)
    )
    assert all(r == {"age": 20.0, "sex": "M", "diagnosis": "D1"} for r in recs)


def test_attribute_spec_validation():
    with pytest.raises(StructuralError):
        AttributeSpec(
            age_mean=(20.0, 30.0),
            age_sd=(3.0,),
            male_prob=(0.5,),
            diagnosis_probs=((1.0, 0.0, 0.0),),
        )
    with pytest.raises(ConfigurationError):
        AttributeSpec(
            age_mean=(20.0,),
            age_sd=(3.0,),
            male_prob=(1.5,),
            diagnosis_probs=((1.0, 0.0, 0.0),),
        )
    with pytest.raises(ConfigurationError):
        AttributeSpec(
            age_mean=(20.0,),
            age_sd=(3.0,),
            male_prob=(0.5,),
            diagnosis_probs=((0.6, 0.1, 0.1),),
        )
    with pytest.raises(StructuralError):
        GeneratorSpec(
            params=canonical_spec().params,
            attributes=AttributeSpec(
                age_mean=(20.0,),
                age_sd=(3.0,),
                male_prob=(0.5,),
                diagnosis_probs=((1.0, 0.0, 0.0),),
            ),
        )


# ---------------------------------------------------------------- generators


def test_canonical_retention_band():
    _, _, rep = sample_dataset(canonical_spec(), 2000, seed=13)
    assert 0.90 <= rep.retention <= 0.97


def test_replication_family_sheds_single_visits():
    _, _, rep = sample_dataset(replication_spec(), 1000, seed=13)
    # the front-door discharge ward drops roughly a quarter on ingestion
    assert 650 <= rep.n_retained <= 800


def test_canonical_pairs_share_the_right_pieces():
    p = canonical_spec().params
    # first pair: same start and holding profile, different transfer routes
    assert np.array_equal(p.initial[0], p.initial[1])
    assert np.array_equal(p.hold[0], p.hold[1])
    assert not np.array_equal(p.trans[0], p.trans[1])
    # second pair: same routes, stays stretched apart
    assert np.array_equal(p.initial[2], p.initial[3])
    assert np.array_equal(p.trans[2], p.trans[3])
    assert not np.array_equal(p.hold[2], p.hold[3])
    # the two pairs differ in both routing and start
    assert not np.array_equal(p.trans[0], p.trans[2])


def test_random_spec_is_valid_and_deterministic():
    s1 = random_spec(3, seed=8, n_wards=5, max_hold=4)
    s2 = random_spec(3, seed=8, n_wards=5, max_hold=4)
    assert validate_params(s1.params).violations == ()
    assert s1.params.n_clusters == 3
    assert s1.params.space.n_transient == 5
    assert s1.params.max_hold == 4
    assert np.array_equal(s1.params.trans, s2.params.trans)
    s3 = random_spec(3, seed=9, n_wards=5, max_hold=4)
    assert not np.array_equal(s1.params.trans, s3.params.trans)
