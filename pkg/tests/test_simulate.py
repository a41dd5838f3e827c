from __future__ import annotations

import numpy as np
import pytest

from saeprop.simulate import (
    CensusFrame,
    ScenarioConfig,
    ScenarioError,
    area_sample_sizes,
    draw_informative_sample,
    generate_census,
    generate_suppE_census,
    read_meta_json,
    scenario_preset,
    write_census_files,
)
from saeprop.survey import direct_estimates, read_areas_csv, read_sample_csv


class TestConfigValidation:
    def test_bounds_order(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(L=0.5, U=0.2).validate()

    def test_sampling_fraction(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(sampling_fraction=1.5).validate()

    def test_m_exceeds_M(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(M=10, m=20).validate()

    def test_unknown_preset(self):
        with pytest.raises(ScenarioError, match="unknown scenario"):
            scenario_preset("sc99")


class TestGenerateCensus:
    def test_deterministic(self, small_scenario):
        c1 = generate_census(small_scenario)
        c2 = generate_census(small_scenario)
        np.testing.assert_array_equal(c1.y, c2.y)
        np.testing.assert_array_equal(c1.x_census, c2.x_census)
        np.testing.assert_array_equal(c1.N, c2.N)
        np.testing.assert_array_equal(c1.Z, c2.Z)

    def test_target_equally_spaced(self):
        cfg = ScenarioConfig(M=100, L=0.1, U=0.4, m=60, seed=5)
        c = generate_census(cfg)
        assert c.target_mu[0] == pytest.approx(0.1)
        assert c.target_mu[-1] == pytest.approx(0.4)
        np.testing.assert_allclose(np.diff(c.target_mu), np.diff(c.target_mu)[0])

    def test_true_mu_matches_counts(self, small_census):
        c = small_census
        for i in range(c.M):
            sl = c.area_slice(i + 1)
            assert c.true_mu[i] == pytest.approx(c.y[sl].mean(), abs=0)

    def test_covariate_standardization(self, small_census):
        assert small_census.x_census.mean() == pytest.approx(0.0, abs=1e-9)
        assert small_census.x_census.std() == pytest.approx(1.0, abs=1e-9)
        assert small_census.Z.mean() == pytest.approx(0.0, abs=1e-9)
        assert small_census.Z.std() == pytest.approx(1.0, abs=1e-9)

    def test_survey_covariate_levels(self, small_census):
        assert set(np.unique(small_census.x_survey)) == {1, 2, 3}

    def test_low_noise_limit_tracks_outcome(self):
        cfg = ScenarioConfig(M=8, m=4, L=0.3, U=0.6, N_min=200, N_max=300,
                             alpha_census=1e-9, seed=3)
        c = generate_census(cfg)
        corr = np.corrcoef(c.x_census, c.y)[0, 1]
        assert corr > 0.999

    def test_two_point_population_switch(self):
        cfg = ScenarioConfig(M=30, m=10, two_point_N=True, seed=4)
        c = generate_census(cfg)
        assert set(np.unique(c.N)) <= {cfg.N_min, cfg.N_max}

    def test_suppE_bounds(self, small_scenario):
        c = generate_suppE_census(small_scenario)
        assert c.target_mu[0] == pytest.approx(0.05)
        assert c.target_mu[-1] == pytest.approx(0.3)
        assert c.config.variant == "supp_e"


class TestAreaSampleSizes:
    def test_paper_scale_formula(self):
        cfg = ScenarioConfig(M=100, m=60, sampling_fraction=0.004)
        n = area_sample_sizes(cfg, np.array([3000]))
        assert n[0] == 20

    def test_rounding(self):
        cfg = ScenarioConfig(M=100, m=60, sampling_fraction=0.004)
        assert area_sample_sizes(cfg, np.array([500]))[0] == 3


class TestDrawInformativeSample:
    def test_weights_sum_to_population(self, small_scenario, small_census):
        s = draw_informative_sample(small_census, small_scenario, 7)
        for a in s.area_ids:
            idx = s.area_index[int(a)]
            assert s.w_raw[idx].sum() == pytest.approx(small_census.N[a - 1], abs=1e-9)

    def test_fixed_area_sample_sizes(self, small_scenario, small_census):
        s = draw_informative_sample(small_census, small_scenario, 7)
        expected = area_sample_sizes(small_scenario, small_census.N)
        for a in s.area_ids:
            assert len(s.area_index[int(a)]) == expected[a - 1]

    def test_replicate_determinism(self, small_scenario, small_census):
        s1 = draw_informative_sample(small_census, small_scenario, 3)
        s2 = draw_informative_sample(small_census, small_scenario, 3)
        np.testing.assert_array_equal(s1.area_id, s2.area_id)
        np.testing.assert_array_equal(s1.y, s2.y)
        np.testing.assert_allclose(s1.w_raw, s2.w_raw, rtol=0)

    def test_replicates_differ(self, small_scenario, small_census):
        s1 = draw_informative_sample(small_census, small_scenario, 3)
        s2 = draw_informative_sample(small_census, small_scenario, 4)
        assert not (len(s1.y) == len(s2.y) and np.array_equal(s1.w_raw, s2.w_raw))

    def test_mismatched_config_errors(self, small_scenario, small_census):
        other = ScenarioConfig(**{**small_scenario.__dict__, "seed": 999})
        with pytest.raises(ScenarioError, match="does not match"):
            draw_informative_sample(small_census, other, 0)

    def test_tiny_area_dropped_with_warning(self):
        cfg = ScenarioConfig(M=6, m=6, L=0.3, U=0.5, N_min=30, N_max=40,
                             sampling_fraction=0.004, seed=11)
        census = generate_census(cfg)
        with pytest.warns(UserWarning, match="dropped"):
            with pytest.raises(ScenarioError, match="no areas retained"):
                draw_informative_sample(census, cfg, 0)

    def test_oversampling_of_zeros(self):
        """Monte-Carlo inclusion frequencies against the selection rule."""
        cfg = ScenarioConfig(M=2, m=1, L=0.4, U=0.5, N_min=50, N_max=50,
                             sampling_fraction=0.2, seed=21)
        census = generate_census(cfg)
        hits = {0: np.zeros(50), 1: np.zeros(50)}
        picked_area = []
        for rep in range(1000):
            s = draw_informative_sample(census, cfg, rep)
            a = int(s.area_ids[0])
            picked_area.append(a)
            sl = census.area_slice(a)
            w_lookup = {tuple(np.round([census.x_census[sl][j]], 10)): j for j in range(50)}
            for xc in s.x_census:
                j = w_lookup[tuple(np.round([xc], 10))]
                hits[a - 1][j] += 1
        for a in (0, 1):
            n_rep = sum(1 for v in picked_area if v == a + 1)
            if n_rep < 50:
                continue
            sl = census.area_slice(a + 1)
            y = census.y[sl]
            rate = hits[a] / n_rep
            assert rate[y == 0].mean() > rate[y == 1].mean()


class TestEmpiricalInformativeness:
    def test_unweighted_biased_weighted_unbiased(self):
        """Over 500 replicates the naive mean underestimates while the
        weighted estimate stays within Monte-Carlo error of the truth."""
        cfg = ScenarioConfig(M=5, m=3, L=0.3, U=0.6, N_min=150, N_max=250,
                             sampling_fraction=0.08, seed=33)
        census = generate_census(cfg)
        reps = 500
        naive = {a: [] for a in range(1, 6)}
        hajek = {a: [] for a in range(1, 6)}
        for rep in range(reps):
            s = draw_informative_sample(census, cfg, rep)
            d = direct_estimates(s)
            for k, a in enumerate(d.area_ids):
                idx = s.area_index[int(a)]
                naive[int(a)].append(s.y[idx].mean())
                hajek[int(a)].append(d.mu[k])
        checked = 0
        for a in range(1, 6):
            if len(naive[a]) < 100:
                continue
            truth = census.true_mu[a - 1]
            naive_mean = np.mean(naive[a])
            haj = np.asarray(hajek[a])
            mc_se = haj.std(ddof=1) / np.sqrt(len(haj))
            assert naive_mean < truth, f"area {a}: naive mean should underestimate"
            assert abs(haj.mean() - truth) < 4 * mc_se, f"area {a}: weighted estimate biased"
            checked += 1
        assert checked >= 3


class TestCensusFiles:
    def test_round_trip(self, tmp_path, small_scenario, small_census):
        write_census_files(tmp_path, small_census)
        cfg, true_mu = read_meta_json(tmp_path / "meta.json")
        assert cfg == small_scenario
        np.testing.assert_allclose(true_mu, small_census.true_mu, rtol=0)
        N, Z = read_areas_csv(tmp_path / "areas.csv")
        np.testing.assert_array_equal(N, small_census.N)
        back = read_sample_csv(tmp_path / "census.csv", M=small_census.M, N=N)
        np.testing.assert_array_equal(back.y, small_census.y)

    def test_emission_deterministic(self, tmp_path, small_scenario, small_census):
        write_census_files(tmp_path / "a", small_census)
        write_census_files(tmp_path / "b", small_census)
        for name in ("census.csv", "areas.csv", "meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
