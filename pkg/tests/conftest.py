from __future__ import annotations

import warnings

import numpy as np
import pytest

from saeprop.engine import EngineConfig
from saeprop.simulate import ScenarioConfig, draw_informative_sample, generate_census
from saeprop.survey import SurveySample


@pytest.fixture(autouse=True)
def _quiet_numerics():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", category=RuntimeWarning)
        yield


def toy_sample(M: int = 4, N=None) -> SurveySample:
    """Three sampled areas out of M, hand-sized for arithmetic checks."""
    return SurveySample(
        area_id=[1, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 3],
        y=[1, 0, 1, 0, 1, 1, 1, 0, 0, 1, 0, 1],
        x_survey=[1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3],
        x_census=[0.1, -0.2, 0.5, 0.3, -1.0, 0.4, 0.2, -0.3, 0.8, -0.5, 0.0, 1.2],
        w_raw=[2.0, 1.0, 1.5, 0.5, 3.0, 1.0, 2.0, 1.0, 1.0, 2.0, 1.5, 0.5],
        M=M,
        N=N if N is not None else [50, 40, 80, 30][:M],
    )


@pytest.fixture
def small_scenario() -> ScenarioConfig:
    """Quick-to-fit scenario with realistic per-area sample sizes."""
    return ScenarioConfig(
        M=12, m=8, L=0.15, U=0.5, N_min=120, N_max=500,
        alpha_survey=0.5, alpha_census=1.0, u=0.02,
        sampling_fraction=0.05, seed=314,
    )


@pytest.fixture
def small_census(small_scenario):
    return generate_census(small_scenario)


@pytest.fixture
def small_sample(small_scenario, small_census):
    return draw_informative_sample(small_census, small_scenario, replicate_seed=1)


@pytest.fixture
def fast_engine() -> EngineConfig:
    return EngineConfig(chains=2, warmup=300, draws=300, seed=99)


@pytest.fixture
def full_engine() -> EngineConfig:
    return EngineConfig(chains=4, warmup=500, draws=500, seed=7)
