from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saeprop.survey import (
    SurveyDataError,
    SurveySample,
    aggregate_to_region,
    direct_estimates,
    empirical_logit,
    hajek_estimate,
    hajek_variance,
    overall_prevalence,
    perturb_unstable,
    read_areas_csv,
    read_sample_csv,
    write_areas_csv,
    write_sample_csv,
)
from conftest import toy_sample


class TestHajekEstimate:
    def test_equal_weights_is_mean(self):
        assert hajek_estimate([1, 0, 1, 0], [1.0, 1.0, 1.0, 1.0]) == 0.5

    def test_constant_outcome(self):
        w = np.array([0.5, 1.7, 0.8])
        w = w * 3 / w.sum()
        assert hajek_estimate([1, 1, 1], w) == pytest.approx(1.0)

    def test_weighted_hand_case(self):
        # raw weights (2,1,1) -> area-normalized (1.5, 0.75, 0.75)
        w_raw = np.array([2.0, 1.0, 1.0])
        w = w_raw * 3 / w_raw.sum()
        np.testing.assert_allclose(w, [1.5, 0.75, 0.75])
        assert hajek_estimate([1, 0, 0], w) == pytest.approx(0.5)

    def test_empty_area_errors(self):
        with pytest.raises(SurveyDataError, match="no records"):
            hajek_estimate([], [])


class TestHajekVariance:
    def test_constant_outcome_zero(self):
        assert hajek_variance([1, 1, 1], [1.2, 0.9, 0.9], 1.0, N_i=100) == 0.0

    def test_singleton_errors(self):
        with pytest.raises(SurveyDataError, match="singleton"):
            hajek_variance([1], [1.0], 1.0, N_i=10)

    def test_sample_larger_than_population_errors(self):
        with pytest.raises(SurveyDataError, match="exceeds population"):
            hajek_variance([1, 0, 1], [1.0, 1.0, 1.0], 2 / 3, N_i=2)

    def test_hand_case(self):
        # (1/2)(1 - 2/100)(1/1) * (0.25 + 0.25) = 0.245
        assert hajek_variance([1, 0], [1.0, 1.0], 0.5, N_i=100) == pytest.approx(0.245)

    def test_unknown_population_drops_fpc(self):
        v = hajek_variance([1, 0], [1.0, 1.0], 0.5, N_i=None)
        assert v == pytest.approx(0.25)


class TestEmpiricalLogit:
    def test_hand_case(self):
        theta, gamma = empirical_logit(0.5, 0.01)
        assert theta == pytest.approx(0.0)
        assert gamma == pytest.approx(0.16)

    @pytest.mark.parametrize("mu", [0.0, 1.0])
    def test_boundary_errors(self, mu):
        with pytest.raises(SurveyDataError, match="unstable"):
            empirical_logit(mu, 0.1)

    @given(mu=st.floats(1e-6, 1 - 1e-6), psi=st.floats(0, 0.2))
    def test_symmetry(self, mu, psi):
        t1, g1 = empirical_logit(mu, psi)
        t2, g2 = empirical_logit(1 - mu, psi)
        assert t1 == pytest.approx(-t2, abs=1e-9)
        assert g1 == pytest.approx(g2, rel=1e-9)

    @given(mu=st.floats(1e-6, 1 - 1e-6))
    def test_round_trip(self, mu):
        theta, _ = empirical_logit(mu, 0.0)
        back = 1.0 / (1.0 + np.exp(-theta))
        assert abs(back - mu) < 1e-12


class TestPerturb:
    def test_boundaries(self):
        assert perturb_unstable(0.0) == pytest.approx(0.001)
        assert perturb_unstable(1.0) == pytest.approx(0.999)

    def test_interior_unchanged(self):
        assert perturb_unstable(0.3) == 0.3

    def test_vectorized(self):
        out = perturb_unstable(np.array([0.0, 0.25, 1.0]))
        np.testing.assert_allclose(out, [0.001, 0.25, 0.999])

    def test_delta_validation(self):
        with pytest.raises(SurveyDataError):
            perturb_unstable(0.0, delta=0.7)


class TestAggregateToRegion:
    def test_equal_sizes(self):
        out = aggregate_to_region([0.2, 0.4], [100, 100], {"r": [1, 2]})
        assert out["r"] == pytest.approx(0.3)

    def test_single_area(self):
        out = aggregate_to_region([0.2, 0.4], [100, 100], {"r": [2]})
        assert out["r"] == pytest.approx(0.4)

    def test_weighted_hand_case(self):
        out = aggregate_to_region([0.1, 0.3], [100, 300], {"r": [1, 2]})
        assert out["r"] == pytest.approx(0.25)

    def test_empty_region_errors(self):
        with pytest.raises(SurveyDataError, match="empty"):
            aggregate_to_region([0.1], [10], {"r": []})


@st.composite
def weighted_binary_area(draw):
    n = draw(st.integers(2, 12))
    y = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    w_raw = draw(st.lists(st.floats(0.05, 50.0), min_size=n, max_size=n))
    return np.asarray(y, float), np.asarray(w_raw, float)


class TestWeightProperties:
    @given(weighted_binary_area())
    def test_hajek_in_unit_interval(self, area):
        y, w_raw = area
        w = w_raw * len(y) / w_raw.sum()
        assert -1e-12 <= hajek_estimate(y, w) <= 1 + 1e-12

    @given(weighted_binary_area(), st.floats(0.01, 100.0))
    def test_variance_invariant_to_weight_rescaling(self, area, c):
        y, w_raw = area
        w1 = w_raw * len(y) / w_raw.sum()
        scaled = c * w_raw
        w2 = scaled * len(y) / scaled.sum()
        mu = hajek_estimate(y, w1)
        v1 = hajek_variance(y, w1, mu, N_i=1000)
        v2 = hajek_variance(y, w2, hajek_estimate(y, w2), N_i=1000)
        assert v1 == pytest.approx(v2, rel=1e-9, abs=1e-15)

    def test_equal_weights_reduce_to_mean(self):
        y = np.array([1, 0, 0, 1, 1], float)
        w_raw = np.full(5, 3.7)
        w = w_raw * 5 / w_raw.sum()
        assert hajek_estimate(y, w) == pytest.approx(y.mean())

    def test_scaling_sums(self):
        s = toy_sample()
        for a in s.area_ids:
            idx = s.area_index[int(a)]
            assert s.w_area[idx].sum() == pytest.approx(len(idx), abs=1e-10)
        assert s.w_sample.sum() == pytest.approx(s.n, abs=1e-10)


class TestSurveySampleValidation:
    def test_nonpositive_weight_rejected(self):
        with pytest.raises(SurveyDataError, match="positive"):
            SurveySample(area_id=[1], y=[1], x_survey=[1], x_census=[0.0],
                         w_raw=[0.0], M=2)

    def test_area_id_out_of_range(self):
        with pytest.raises(SurveyDataError, match="1..M"):
            SurveySample(area_id=[5], y=[1], x_survey=[1], x_census=[0.0],
                         w_raw=[1.0], M=2)

    def test_nonbinary_outcome(self):
        with pytest.raises(SurveyDataError, match="binary"):
            SurveySample(area_id=[1], y=[2], x_survey=[1], x_census=[0.0],
                         w_raw=[1.0], M=2)


class TestDirectEstimates:
    def test_stability_classification_exact(self):
        s = toy_sample()
        d = direct_estimates(s)
        # area 2 has constant y = 1 -> unstable
        k2 = d.lookup(2)
        assert d.mu[k2] == 1.0
        assert not d.stable[k2]
        assert np.isnan(d.theta[k2])
        k1 = d.lookup(1)
        assert d.stable[k1]
        assert np.isfinite(d.gamma[k1])
        theta, gamma = empirical_logit(d.mu[k1], d.psi[k1])
        assert d.theta[k1] == pytest.approx(theta)
        assert d.gamma[k1] == pytest.approx(gamma)

    def test_gamma_identity(self):
        s = toy_sample()
        d = direct_estimates(s)
        for k in range(len(d.area_ids)):
            if d.stable[k] and np.isfinite(d.psi[k]):
                assert d.gamma[k] == pytest.approx(
                    d.psi[k] / (d.mu[k] * (1 - d.mu[k])) ** 2, rel=1e-12)

    def test_overall_prevalence_scale_invariant(self):
        s = toy_sample()
        p1 = overall_prevalence(s)
        s2 = SurveySample(area_id=s.area_id, y=s.y, x_survey=s.x_survey,
                          x_census=s.x_census, w_raw=7.3 * s.w_raw, M=s.M, N=s.N)
        assert p1 == pytest.approx(overall_prevalence(s2), rel=1e-12)


class TestCsvRoundTrip:
    def test_sample_round_trip(self, tmp_path):
        s = toy_sample()
        path = tmp_path / "sample.csv"
        write_sample_csv(path, s)
        back = read_sample_csv(path, M=s.M, N=s.N)
        np.testing.assert_array_equal(back.area_id, s.area_id)
        np.testing.assert_array_equal(back.y, s.y)
        np.testing.assert_allclose(back.w_raw, s.w_raw, rtol=0)
        np.testing.assert_allclose(back.x_census, s.x_census, rtol=0)

    def test_areas_round_trip(self, tmp_path):
        path = tmp_path / "areas.csv"
        N = np.array([10, 20, 30])
        Z = np.array([0.1, -0.4, 0.3])
        write_areas_csv(path, N, Z)
        N2, Z2 = read_areas_csv(path)
        np.testing.assert_array_equal(N, N2)
        np.testing.assert_allclose(Z, Z2, rtol=0)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(SurveyDataError, match="header"):
            read_sample_csv(path, M=2)
