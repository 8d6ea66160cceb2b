import itertools
import math

import numpy as np
import pytest
from scipy import stats

import wardflow.census as cs
from wardflow.errors import ConfigurationError, StructuralError

from conftest import single_exit_params, two_ward_params


class TestPoissonBinomial:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(0.05, 0.95, size=10)
        pmf, tail = cs.poisson_binomial_pmf(probs)
        exact = np.zeros(11)
        for bits in itertools.product((0, 1), repeat=10):
            pr = math.prod(p if b else 1 - p for p, b in zip(probs, bits))
            exact[sum(bits)] += pr
        assert np.allclose(pmf, exact[: pmf.size], atol=1e-12)
        assert pmf.sum() + tail == pytest.approx(1.0, abs=1e-12)

    def test_empty_and_certain(self):
        pmf, tail = cs.poisson_binomial_pmf(np.array([]))
        assert pmf.tolist() == [1.0] and tail == 0.0
        pmf, _ = cs.poisson_binomial_pmf(np.array([1.0, 1.0, 1.0]))
        assert pmf[3] == pytest.approx(1.0)

    def test_mean_additivity(self):
        probs = np.array([0.2, 0.5, 0.9, 0.33])
        pmf, _ = cs.poisson_binomial_pmf(probs)
        mean = float(np.arange(pmf.size) @ pmf)
        assert mean == pytest.approx(probs.sum(), abs=1e-12)


class TestCyclicOccupancy:
    def test_deterministic_fold(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=3), 0)
        assert np.allclose(co.folded_means(), [[1, 1, 1, 0, 0, 0, 0]])

    def test_long_stay_wraps(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=9, max_hold=9), 0)
        # days 0..8 fold onto weekdays 0,1 twice and the rest once
        assert np.allclose(co.folded_means(), [[2, 2, 1, 1, 1, 1, 1]])

    def test_total_mass_is_mean_los(self):
        p = two_ward_params()
        co = cs.cyclic_occupancy(p, 0)
        from wardflow.analytics import total_los

        los = total_los(p, 0, d_max=400, tail_tol=1e-10)
        assert co.folded_means().sum() == pytest.approx(los.mean, abs=1e-6)


class TestArrivalPlan:
    def test_validation(self):
        with pytest.raises(StructuralError):
            cs.ArrivalPlan(
                elective=np.zeros((2, 6), dtype=int),
                emergency_rates=np.zeros((2, 7)),
            )
        with pytest.raises(StructuralError):
            cs.ArrivalPlan(
                elective=np.array([[-1, 0, 0, 0, 0, 0, 0]]),
                emergency_rates=np.zeros((1, 7)),
            )
        with pytest.raises(StructuralError):
            cs.ArrivalPlan(
                elective=np.zeros((1, 7), dtype=int),
                emergency_rates=np.full((1, 7), -0.1),
            )


class TestElectiveDemand:
    def test_single_deterministic_patient(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=3), 0)
        plan = cs.ArrivalPlan(
            elective=np.array([[1, 0, 0, 0, 0, 0, 0]]),
            emergency_rates=np.zeros((1, 7)),
        )
        d = cs.elective_demand(plan, [co])
        assert d.family == "poisson-binomial"
        assert np.allclose(d.mean, [[1, 1, 1, 0, 0, 0, 0]])
        assert d.cell(0, 1).tolist() == [0.0, 1.0]

    def test_admission_day_shifts_curve(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=3), 0)
        plan = cs.ArrivalPlan(
            elective=np.array([[0, 0, 0, 0, 0, 0, 1]]),
            emergency_rates=np.zeros((1, 7)),
        )
        d = cs.elective_demand(plan, [co])
        assert np.allclose(d.mean, [[1, 1, 0, 0, 0, 0, 1]])

    def test_mean_adds_over_admissions_and_clusters(self):
        p = two_ward_params()
        co = cs.cyclic_occupancy(p, 0)
        plan1 = cs.ArrivalPlan(
            elective=np.array([[2, 0, 0, 1, 0, 0, 0]]),
            emergency_rates=np.zeros((1, 7)),
        )
        d = cs.elective_demand(plan1, [co])
        folded = co.folded_means()
        manual = 2 * folded + np.roll(folded, 3, axis=1)
        assert np.allclose(d.mean, manual, atol=1e-9)

    def test_no_hospital_marginal_for_dependent_wards(self):
        # one patient occupies exactly one ward, so ward counts are
        # dependent and no product-form hospital pmf exists
        p = two_ward_params()
        co = cs.cyclic_occupancy(p, 0)
        plan = cs.ArrivalPlan(
            elective=np.array([[1, 1, 0, 0, 0, 0, 0]]),
            emergency_rates=np.zeros((1, 7)),
        )
        assert cs.elective_demand(plan, [co]).hospital_pmf is None

    def test_emergency_hospital_marginal_matches_mean(self):
        p = two_ward_params()
        co = cs.cyclic_occupancy(p, 0)
        plan = cs.ArrivalPlan(
            elective=np.zeros((1, 7), dtype=int),
            emergency_rates=np.full((1, 7), 0.4),
        )
        d = cs.emergency_demand(plan, [co])
        hosp_mean = float(np.arange(d.hospital_pmf[0].size) @ d.hospital_pmf[0])
        assert hosp_mean == pytest.approx(d.hospital_mean[0], abs=1e-6)
        assert d.hospital_mean[0] == pytest.approx(d.mean[:, 0].sum(), abs=1e-9)


class TestEmergencyDemand:
    def test_poisson_cells(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=3), 0)
        rate = 0.3
        plan = cs.ArrivalPlan(
            elective=np.zeros((1, 7), dtype=int),
            emergency_rates=np.full((1, 7), rate),
        )
        d = cs.emergency_demand(plan, [co])
        assert d.family == "poisson"
        assert np.allclose(d.mean, rate * 3)
        lam = d.mean[0, 0]
        cell = d.cell(0, 0)
        ref = stats.poisson.pmf(np.arange(cell.size), lam)
        assert np.allclose(cell, ref, atol=1e-9)

    def test_day_varying_rates(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=2), 0)
        rates = np.array([[0.5, 0, 0, 0, 0, 0, 0]])
        plan = cs.ArrivalPlan(
            elective=np.zeros((1, 7), dtype=int), emergency_rates=rates
        )
        d = cs.emergency_demand(plan, [co])
        # arrivals only on weekday 0, stay 2 days: load on weekdays 0 and 1
        assert np.allclose(d.mean, [[0.5, 0.5, 0, 0, 0, 0, 0]])


class TestCombinedForecast:
    def test_convolution_and_exceedance(self):
        co = cs.cyclic_occupancy(single_exit_params(hold_day=3), 0)
        plan = cs.ArrivalPlan(
            elective=np.array([[2, 0, 0, 0, 0, 0, 0]]),
            emergency_rates=np.full((1, 7), 0.2),
        )
        el = cs.elective_demand(plan, [co])
        em = cs.emergency_demand(plan, [co])
        fc = cs.combined_forecast(el, em, capacities=np.array([2.0]))
        assert np.allclose(fc.mean, el.mean + em.mean, atol=1e-9)
        # weekday 0 has 2 certain electives; exceedance = P(emergency >= 1)
        lam = em.mean[0, 0]
        assert fc.exceedance[0, 0] == pytest.approx(1 - math.exp(-lam), abs=1e-9)

    def test_no_capacities_no_exceedance(self):
        co = cs.cyclic_occupancy(single_exit_params(), 0)
        plan = cs.ArrivalPlan(
            elective=np.array([[1, 0, 0, 0, 0, 0, 0]]),
            emergency_rates=np.zeros((1, 7)),
        )
        fc = cs.combined_forecast(
            cs.elective_demand(plan, [co]), cs.emergency_demand(plan, [co])
        )
        assert fc.exceedance is None

    def test_plan_cluster_count_must_match(self):
        co = cs.cyclic_occupancy(single_exit_params(), 0)
        plan = cs.ArrivalPlan(
            elective=np.zeros((2, 7), dtype=int),
            emergency_rates=np.zeros((2, 7)),
        )
        with pytest.raises((ConfigurationError, StructuralError)):
            cs.elective_demand(plan, [co])
