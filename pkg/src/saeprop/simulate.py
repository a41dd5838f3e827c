"""Synthetic census generation and informative survey sampling.

A census is built once per scenario seed: equally spaced true proportions,
binomial area counts uncounted into binary records, noisy individual and area
covariates.  Surveys are then drawn repeatedly from the fixed census with a
two-stage informative design: areas selected proportional to population size,
and within each area individuals with ``y = 0`` oversampled.  Raw weights are
rescaled to sum to the area population.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .survey import SurveySample, write_areas_csv, write_sample_csv


class ScenarioError(ValueError):
    """Raised for invalid scenario configurations."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of a synthetic census + survey design.

    ``L``/``U`` bound the true area proportions; ``alpha_survey`` and
    ``alpha_census`` scale the noise on the two individual covariates (smaller
    means more predictive); ``u`` scales the noise on the area covariate.
    ``two_point_N`` draws populations from {N_min, N_max} instead of the
    uniform integer range.
    """

    M: int = 40
    L: float = 0.1
    U: float = 0.4
    N_min: int = 500
    N_max: int = 3000
    alpha_survey: float = 0.5
    alpha_census: float = 1.0
    u: float = 0.01
    sampling_fraction: float = 0.004
    m: int = 24
    seed: int = 20240401
    variant: str = "main"  # "main" | "supp_e"
    two_point_N: bool = False

    def validate(self) -> None:
        if not (0.0 < self.L < self.U < 1.0):
            raise ScenarioError("need 0 < L < U < 1")
        if not (0.0 < self.sampling_fraction < 1.0):
            raise ScenarioError("sampling fraction must lie in (0, 1)")
        if not (1 <= self.m <= self.M):
            raise ScenarioError("need 1 <= m <= M")
        if self.N_min < 2 or self.N_max < self.N_min:
            raise ScenarioError("bad population range")
        if self.variant not in ("main", "supp_e"):
            raise ScenarioError(f"unknown variant {self.variant!r}")
        if self.alpha_survey < 0 or self.alpha_census < 0 or self.u < 0:
            raise ScenarioError("noise scales must be nonnegative")


@dataclass
class CensusFrame:
    """Full synthetic population with per-area truths.

    ``pi`` holds the fixed within-area selection probabilities (one entry per
    individual, summing to 1 within each area).  They are part of the census:
    repeated survey draws reuse the same selection pressures, so only the
    area selection and the within-area draws vary across replicates.
    """

    area_id: np.ndarray   # (N_total,) 1-based
    y: np.ndarray         # (N_total,) int8
    x_survey: np.ndarray  # (N_total,) int levels {1,2,3}
    x_census: np.ndarray  # (N_total,) float, standardized
    N: np.ndarray         # (M,)
    true_mu: np.ndarray   # (M,)
    Z: np.ndarray         # (M,) standardized
    config: ScenarioConfig | None = None
    target_mu: np.ndarray | None = None  # equally spaced binomial means
    pi: np.ndarray | None = None

    @property
    def M(self) -> int:
        return len(self.N)

    @property
    def total(self) -> int:
        return len(self.y)

    def area_slice(self, area: int) -> slice:
        start = int(self.N[: area - 1].sum())
        return slice(start, start + int(self.N[area - 1]))


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    if sd == 0:
        raise ScenarioError("degenerate covariate: zero variance")
    return (x - x.mean()) / sd


def generate_census(config: ScenarioConfig) -> CensusFrame:
    """Build the synthetic census for a scenario (deterministic in the seed)."""
    config.validate()
    rng = rngmod.stream(config.seed, 0)
    M = config.M
    target = np.linspace(config.L, config.U, M)
    if config.two_point_N:
        N = rng.choice(np.array([config.N_min, config.N_max], dtype=np.int64), size=M)
    else:
        N = rng.integers(config.N_min, config.N_max + 1, size=M)
    counts = rng.binomial(N, target)

    # Uncount: within each area the first Y_i records carry y = 1.
    area_id = np.repeat(np.arange(1, M + 1), N)
    offsets = np.concatenate([[0], np.cumsum(N)])
    y = np.zeros(int(N.sum()), dtype=np.int8)
    for i in range(M):
        y[offsets[i]: offsets[i] + counts[i]] = 1

    e_survey = rng.standard_normal(len(y))
    e_census = rng.standard_normal(len(y))
    x_survey_raw = y + config.alpha_survey * e_survey
    x_census_raw = y + config.alpha_census * e_census
    cuts = np.quantile(x_survey_raw, [1 / 3, 2 / 3])
    x_survey = (np.digitize(x_survey_raw, cuts, right=True) + 1).astype(np.int64)
    x_census = _standardize(x_census_raw)

    true_mu = np.array([y[offsets[i]: offsets[i + 1]].mean() for i in range(M)])
    if np.any(true_mu <= 0.0) or np.any(true_mu >= 1.0):
        raise ScenarioError("census produced a degenerate area proportion")
    g = rng.standard_normal(M)
    Z = _standardize(np.log(true_mu / (1 - true_mu)) + config.u * g)

    return CensusFrame(
        area_id=area_id, y=y, x_survey=x_survey, x_census=x_census,
        N=N, true_mu=true_mu, Z=Z, config=config, target_mu=target,
    )


def generate_suppE_census(config: ScenarioConfig) -> CensusFrame:
    """Census for the fixed-residual-error experiment: proportions 0.05..0.3."""
    cfg = ScenarioConfig(**{**asdict(config), "L": 0.05, "U": 0.3, "variant": "supp_e"})
    return generate_census(cfg)


def area_sample_sizes(config: ScenarioConfig, N: np.ndarray) -> np.ndarray:
    """Fixed per-area sample sizes: round((M/m) * f * N_i)."""
    raw = (config.M / config.m) * config.sampling_fraction * np.asarray(N, dtype=float)
    return np.rint(raw).astype(np.int64)


def _pps_select_areas(rng: np.random.Generator, N: np.ndarray, m: int) -> np.ndarray:
    """Draw m areas without replacement, proportional to N, by successive
    draws with renormalization.  Returns 1-based ids in draw order."""
    probs = N.astype(float).copy()
    chosen: list[int] = []
    for _ in range(m):
        p = probs / probs.sum()
        pick = int(rng.choice(len(N), p=p))
        chosen.append(pick + 1)
        probs[pick] = 0.0
    return np.asarray(chosen, dtype=np.int64)


def _systematic_pps(rng: np.random.Generator, incl: np.ndarray, n: int) -> np.ndarray:
    """Systematic PPS without replacement on a randomly permuted list.

    ``incl`` are target inclusion probabilities summing to n.  Returns the
    selected indices.
    """
    order = rng.permutation(len(incl))
    cum = np.cumsum(incl[order])
    start = rng.uniform(0.0, 1.0)
    points = start + np.arange(n)
    pos = np.searchsorted(cum, points, side="left")
    pos = np.minimum(pos, len(incl) - 1)
    if len(np.unique(pos)) != n:
        # Numerically possible only when some n*pi > 1; spread duplicates.
        pos = np.unique(pos)
        extra = np.setdiff1d(np.arange(len(incl)), pos)
        pos = np.concatenate([pos, extra[: n - len(pos)]])
    return order[pos]


def draw_informative_sample(
    census: CensusFrame,
    config: ScenarioConfig,
    replicate_seed: int,
) -> SurveySample:
    """Draw one informative survey from a fixed census.

    Within each PPS-selected area, selection pressure follows
    ``z = 1(y=0) + 0.8 * Exp(1)``; inclusion probabilities are proportional
    to ``z`` and the resulting weights ``1 / (n_i * pi)`` are rescaled to sum
    to ``N_i`` per area.
    """
    if census.M != config.M or (census.config is not None and census.config.seed != config.seed):
        raise ScenarioError("census does not match configuration")
    rng = rngmod.stream(config.seed, 1, replicate_seed)
    n_by_area = area_sample_sizes(config, census.N)
    selected = _pps_select_areas(rng, census.N, config.m)

    rec_area, rec_y, rec_xs, rec_xc, rec_w = [], [], [], [], []
    for a in selected:
        n_i = int(n_by_area[a - 1])
        N_i = int(census.N[a - 1])
        if n_i < 1:
            warnings.warn(f"area {a} dropped: rounded sample size is zero")
            continue
        if n_i > N_i:
            raise ScenarioError(f"area {a}: sample size {n_i} exceeds population {N_i}")
        sl = census.area_slice(int(a))
        y_a = census.y[sl]
        h = rng.exponential(1.0, size=N_i)
        z = (y_a == 0).astype(float) + 0.8 * h
        z = np.maximum(z, 1e-12)
        pi = z / z.sum()
        take = _systematic_pps(rng, np.minimum(n_i * pi, 1.0), n_i)
        w = 1.0 / (n_i * pi[take])
        w *= N_i / w.sum()
        rec_area.append(np.full(n_i, a, dtype=np.int64))
        rec_y.append(y_a[take])
        rec_xs.append(census.x_survey[sl][take])
        rec_xc.append(census.x_census[sl][take])
        rec_w.append(w)

    if not rec_area:
        raise ScenarioError("no areas retained in sample")
    return SurveySample(
        area_id=np.concatenate(rec_area),
        y=np.concatenate(rec_y),
        x_survey=np.concatenate(rec_xs),
        x_census=np.concatenate(rec_xc),
        w_raw=np.concatenate(rec_w),
        M=census.M,
        N=census.N,
    )


# -- file emission -----------------------------------------------------------


def write_census_files(outdir: str | Path, census: CensusFrame) -> None:
    """Emit census.csv, areas.csv and meta.json into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sample_like = SurveySample(
        area_id=census.area_id,
        y=census.y,
        x_survey=census.x_survey,
        x_census=census.x_census,
        w_raw=np.ones(census.total),
        M=census.M,
        N=census.N,
    )
    write_sample_csv(outdir / "census.csv", sample_like)
    write_areas_csv(outdir / "areas.csv", census.N, census.Z)
    meta = {"config": asdict(census.config), "true_mu": [repr(v) for v in census.true_mu]}
    with open(outdir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_meta_json(path: str | Path) -> tuple[ScenarioConfig, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = ScenarioConfig(**meta["config"])
    true_mu = np.array([float(v) for v in meta["true_mu"]])
    return cfg, true_mu


# Scenario presets; the paper-scale variants use M=100, m=60.
_PRESETS = {
    "sc1": dict(L=0.35, U=0.65, alpha_survey=0.5, u=0.05),
    "sc2": dict(L=0.35, U=0.65, alpha_survey=1.0, u=0.05),
    "sc3": dict(L=0.10, U=0.40, alpha_survey=0.5, u=0.01),
    "sc4": dict(L=0.10, U=0.40, alpha_survey=1.0, u=0.01),
    "sc5": dict(L=0.60, U=0.90, alpha_survey=0.5, u=0.01),
    "sc6": dict(L=0.60, U=0.90, alpha_survey=1.0, u=0.01),
    "suppe": dict(L=0.05, U=0.30, alpha_survey=0.5, u=0.01, variant="supp_e"),
}


def scenario_preset(name: str, seed: int = 20240401, full_scale: bool = False) -> ScenarioConfig:
    """Named scenario configurations (desk scale by default)."""
    key = name.lower()
    if key not in _PRESETS:
        raise ScenarioError(f"unknown scenario {name!r}; choose from {sorted(_PRESETS)}")
    base = dict(M=40, m=24, seed=seed)
    if full_scale:
        base = dict(M=100, m=60, seed=seed)
    base.update(_PRESETS[key])
    return ScenarioConfig(**base)
