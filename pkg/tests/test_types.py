import math

import numpy as np
import pytest

from wardflow.errors import StructuralError
from wardflow.types import (
    Hyperparams,
    SmmParams,
    StateSpace,
    Trajectory,
    log_trajectory_likelihood,
    validate_params,
)

from conftest import make_traj, single_exit_params, two_ward_params


class TestStateSpace:
    def test_indexing_and_sizes(self):
        sp = StateSpace(transient=("A", "B"), absorbing=("out",))
        assert sp.n_transient == 2
        assert sp.n_states == 3
        assert sp.names == ("A", "B", "out")
        assert sp.index("B") == 1
        assert sp.index("out") == 2

    def test_duplicate_labels_rejected(self):
        with pytest.raises(StructuralError):
            StateSpace(transient=("A", "A"), absorbing=("out",))
        with pytest.raises(StructuralError):
            StateSpace(transient=("A",), absorbing=("A",))

    def test_needs_both_kinds(self):
        with pytest.raises(StructuralError):
            StateSpace(transient=(), absorbing=("out",))
        with pytest.raises(StructuralError):
            StateSpace(transient=("A",), absorbing=())


class TestTrajectory:
    def test_validate_passes(self):
        sp = StateSpace(transient=("A", "B"), absorbing=("out",))
        make_traj([(0, 2), (1, 1)], 2).validate(sp, max_hold=3)

    def test_validate_rejects_bad_pieces(self):
        sp = StateSpace(transient=("A", "B"), absorbing=("out",))
        with pytest.raises(StructuralError):
            make_traj([(2, 1)], 2).validate(sp, 3)  # absorbing as visit
        with pytest.raises(StructuralError):
            make_traj([(0, 0)], 2).validate(sp, 3)  # zero holding
        with pytest.raises(StructuralError):
            make_traj([(0, 4)], 2).validate(sp, 3)  # above max_hold
        with pytest.raises(StructuralError):
            make_traj([(0, 1)], 1).validate(sp, 3)  # exit not absorbing
        with pytest.raises(StructuralError):
            make_traj([], 2).validate(sp, 3)

    def test_repeat_visit_is_storable_but_impossible(self):
        # consecutive same-ward visits pass structural checks (ingest merges
        # them) yet carry zero probability under any valid model
        sp = StateSpace(transient=("A", "B"), absorbing=("out",))
        traj = make_traj([(0, 1), (0, 1)], 2)
        traj.validate(sp, 3)
        assert log_trajectory_likelihood(traj, 0, two_ward_params()) == -math.inf


class TestParamsValidation:
    def test_valid_params_clean_report(self):
        rep = validate_params(two_ward_params())
        assert rep.violations == ()

    def test_broken_rows_reported(self):
        p = two_ward_params()
        bad_trans = p.trans.copy()
        bad_trans[0, 0, 0] = 0.5  # transient self-loop
        broken = SmmParams(
            space=p.space,
            weight=p.weight,
            initial=p.initial,
            trans=bad_trans,
            hold=p.hold,
        )
        rep = validate_params(broken)
        assert rep.violations

    def test_weight_must_normalize(self):
        p = two_ward_params()
        rep = validate_params(
            SmmParams(
                space=p.space,
                weight=np.array([0.7]),
                initial=p.initial,
                trans=p.trans,
                hold=p.hold,
            )
        )
        assert any(v[0] == "weight_sum" for v in rep.violations)

    def test_max_hold_property(self):
        assert two_ward_params(max_hold=4).max_hold == 4
        assert two_ward_params(max_hold=4).n_clusters == 1


class TestHyperparams:
    def test_epsilon_split_by_cardinality(self):
        h = Hyperparams.from_epsilon(1e-5, n_clusters=4, n_states=6, max_hold=10)
        assert h.prior_weight == pytest.approx(1e-5 / 4)
        assert h.prior_initial == pytest.approx(1e-5 / (6 * 4))
        assert h.prior_trans == pytest.approx(1e-5 / (36 * 4))
        assert h.prior_hold == pytest.approx(1e-5 / (36 * 10 * 4))


class TestLikelihood:
    def test_deterministic_path_is_certain(self):
        p = single_exit_params(hold_day=3)
        traj = make_traj([(0, 3)], 1)
        assert log_trajectory_likelihood(traj, 0, p) == pytest.approx(0.0)

    def test_impossible_path_is_minus_inf(self):
        p = single_exit_params(hold_day=3)
        traj = make_traj([(0, 2)], 1)
        assert log_trajectory_likelihood(traj, 0, p) == -math.inf

    def test_hand_computed_product(self):
        p = two_ward_params()
        # start A (0.7), stay 2 to B (0.6 * 0.3), stay 4 to home (0.55 * 0.25)
        traj = make_traj([(0, 2), (1, 4)], 2)
        expect = math.log(0.7) + math.log(0.6 * 0.3) + math.log(0.55 * 0.25)
        assert log_trajectory_likelihood(traj, 0, p) == pytest.approx(expect)
