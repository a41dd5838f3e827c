"""Survey data model, weight scalings and direct (design-based) estimation.

A survey sample holds unit records ``(area_id, y, x_survey, x_census, w_raw)``
for ``m`` sampled areas out of ``M``.  Three weight scalings coexist and are
derived lazily from the raw weights, never stored:

* area-normalized ``w_area = w_raw * n_i / sum_{j in area i} w_raw`` (sums to
  ``n_i`` within each area) -- used by the direct estimator and its variance;
* sample-scaled ``w_sample = w_raw * n / sum(w_raw)`` (sums to ``n`` overall)
  -- used by pseudo-likelihood models.

The direct estimator of an area proportion is the weighted ratio

    mu_D_i = sum_j w_area_ij * y_ij / n_i,

with design-based variance

    psi_D_i = (1/n_i) (1 - n_i/N_i) (1/(n_i-1)) sum_j w_area_ij^2 (y_ij - mu_D_i)^2.

An area is *unstable* when its direct estimate collapses to exactly 0 or 1,
which invalidates the logit transform and the logit-scale variance.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class SurveyDataError(ValueError):
    """Raised for malformed survey inputs."""


def _as_array(x, dtype=float) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


@dataclass
class SurveySample:
    """Unit-level survey records plus area frame metadata.

    ``area_id`` uses 1-based ids in ``1..M``.  ``N`` gives per-area population
    sizes for all ``M`` areas (index ``i-1`` for area ``i``); it may be None
    when population sizes are unknown, in which case finite-population
    corrections default to 1.
    """

    area_id: np.ndarray
    y: np.ndarray
    x_survey: np.ndarray
    x_census: np.ndarray
    w_raw: np.ndarray
    M: int
    N: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.area_id = _as_array(self.area_id, dtype=np.int64)
        self.y = _as_array(self.y, dtype=np.int8)
        self.x_survey = _as_array(self.x_survey, dtype=np.int64)
        self.x_census = _as_array(self.x_census, dtype=float)
        self.w_raw = _as_array(self.w_raw, dtype=float)
        if self.N is not None:
            self.N = _as_array(self.N, dtype=np.int64)
            if len(self.N) != self.M:
                raise SurveyDataError(f"N has {len(self.N)} entries, expected M={self.M}")
        n = len(self.y)
        for name in ("area_id", "x_survey", "x_census", "w_raw"):
            if len(getattr(self, name)) != n:
                raise SurveyDataError(f"column {name!r} has wrong length")
        if n == 0:
            raise SurveyDataError("empty sample")
        if np.any(self.w_raw <= 0):
            raise SurveyDataError("all raw weights must be positive")
        if np.any((self.y != 0) & (self.y != 1)):
            raise SurveyDataError("y must be binary")
        if self.area_id.min() < 1 or self.area_id.max() > self.M:
            raise SurveyDataError("area ids must lie in 1..M")

    # -- derived structure ------------------------------------------------

    @cached_property
    def area_ids(self) -> np.ndarray:
        """Sorted ids of sampled areas."""
        return np.unique(self.area_id)

    @property
    def m(self) -> int:
        return len(self.area_ids)

    @property
    def n(self) -> int:
        return len(self.y)

    @cached_property
    def area_index(self) -> dict[int, np.ndarray]:
        """Map of area id to record indices."""
        order = np.argsort(self.area_id, kind="stable")
        ids = self.area_id[order]
        bounds = np.searchsorted(ids, self.area_ids, side="left")
        bounds = np.append(bounds, len(ids))
        return {
            int(a): order[bounds[k]:bounds[k + 1]]
            for k, a in enumerate(self.area_ids)
        }

    def n_in_area(self, area: int) -> int:
        return len(self.area_index[int(area)])

    def pop_size(self, area: int) -> int | None:
        if self.N is None:
            return None
        return int(self.N[int(area) - 1])

    # -- weight scalings ---------------------------------------------------

    @cached_property
    def w_area(self) -> np.ndarray:
        """Area-normalized weights; sum to n_i within each area."""
        w = np.empty_like(self.w_raw)
        for a, idx in self.area_index.items():
            w[idx] = self.w_raw[idx] * len(idx) / self.w_raw[idx].sum()
        return w

    @cached_property
    def w_sample(self) -> np.ndarray:
        """Sample-scaled weights; sum to n over the whole sample."""
        return self.w_raw * (self.n / self.w_raw.sum())


# -- direct estimation -----------------------------------------------------


def hajek_estimate(y: np.ndarray, w_area: np.ndarray) -> float:
    """Weighted ratio estimate of an area proportion.

    ``w_area`` must be area-normalized (sums to the record count), which
    guarantees the estimate lies in [0, 1] for binary ``y``.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w_area, dtype=float)
    if y.size == 0:
        raise SurveyDataError("no records for area")
    return float(np.dot(w, y) / y.size)


def hajek_variance(
    y: np.ndarray,
    w_area: np.ndarray,
    mu: float,
    N_i: int | None = None,
) -> float:
    """Design-based sampling variance of the direct proportion estimate.

    Uses the finite-population correction ``1 - n_i/N_i`` when ``N_i`` is
    known and 1 otherwise (conservative for small sampling fractions).
    """
    return weighted_mean_variance(np.asarray(y, dtype=float), w_area, mu, N_i)


def weighted_mean_variance(
    values: np.ndarray,
    w_area: np.ndarray,
    center: float,
    N_i: int | None = None,
) -> float:
    """Variance estimator for a weighted mean ``sum(w*values)/n`` of fixed values.

    ``center`` must be the weighted mean of ``values`` under ``w_area``.  This
    single form serves both the direct estimate (values = y) and the stage-1
    smoothing-bias term (values = p - y).
    """
    values = np.asarray(values, dtype=float)
    w = np.asarray(w_area, dtype=float)
    n_i = values.size
    if n_i == 0:
        raise SurveyDataError("no records for area")
    if n_i == 1:
        raise SurveyDataError("variance undefined for singleton sample")
    if N_i is None:
        fpc = 1.0
    else:
        if n_i > N_i:
            raise SurveyDataError(f"sample size {n_i} exceeds population {N_i}")
        fpc = 1.0 - n_i / N_i
    resid = values - center
    s = float(np.dot(w * w, resid * resid))
    return (1.0 / n_i) * fpc * (1.0 / (n_i - 1.0)) * s


def empirical_logit(mu: float, psi: float) -> tuple[float, float]:
    """Logit transform of an estimate and delta-method variance.

    Returns ``(theta, gamma)`` with ``theta = logit(mu)`` and
    ``gamma = psi / (mu (1 - mu))^2``.  Undefined for unstable estimates.
    """
    if not 0.0 < mu < 1.0:
        raise SurveyDataError("unstable estimate; transform undefined")
    if psi < 0:
        raise SurveyDataError("negative variance")
    theta = float(np.log(mu) - np.log1p(-mu))
    gamma = float(psi / (mu * (1.0 - mu)) ** 2)
    return theta, gamma


def perturb_unstable(mu: np.ndarray | float, delta: float = 0.001):
    """Nudge boundary estimates into (0, 1): 0 -> delta, 1 -> 1 - delta."""
    if not 0.0 < delta < 0.5:
        raise SurveyDataError("delta must lie in (0, 0.5)")
    mu_arr = np.asarray(mu, dtype=float)
    out = np.where(mu_arr == 0.0, delta, np.where(mu_arr == 1.0, 1.0 - delta, mu_arr))
    if np.isscalar(mu) or out.ndim == 0:
        return float(out)
    return out


def aggregate_to_region(
    mu_by_area: np.ndarray,
    N: np.ndarray,
    region_membership: dict[str, np.ndarray],
) -> dict[str, float]:
    """Population-weighted aggregation of per-area values to regions.

    ``region_membership`` maps a region label to the 1-based area ids it
    contains; the ids must partition (a subset of) ``1..M``.
    """
    mu_by_area = np.asarray(mu_by_area, dtype=float)
    N = np.asarray(N, dtype=float)
    out: dict[str, float] = {}
    for region, ids in region_membership.items():
        idx = np.asarray(ids, dtype=np.int64) - 1
        if idx.size == 0:
            raise SurveyDataError(f"region {region!r} is empty")
        out[region] = float(np.dot(mu_by_area[idx], N[idx]) / N[idx].sum())
    return out


@dataclass
class DirectEstimates:
    """Per sampled area: direct estimate, variance, stability and transforms.

    ``theta``/``gamma`` hold NaN for unstable areas (and for areas where the
    variance is undefined, i.e. singleton samples).
    """

    area_ids: np.ndarray
    n: np.ndarray
    mu: np.ndarray
    psi: np.ndarray
    stable: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray

    def lookup(self, area: int) -> int:
        k = int(np.searchsorted(self.area_ids, area))
        if k >= len(self.area_ids) or self.area_ids[k] != area:
            raise KeyError(f"area {area} not in direct estimates")
        return k


def direct_estimates(sample: SurveySample) -> DirectEstimates:
    """Compute direct estimates for every sampled area.

    Singleton areas get ``psi = NaN`` (variance undefined); their stability
    flag still reflects the point estimate.
    """
    ids = sample.area_ids
    w_area = sample.w_area
    n = np.zeros(len(ids), dtype=np.int64)
    mu = np.zeros(len(ids))
    psi = np.full(len(ids), np.nan)
    theta = np.full(len(ids), np.nan)
    gamma = np.full(len(ids), np.nan)
    stable = np.zeros(len(ids), dtype=bool)
    for k, a in enumerate(ids):
        idx = sample.area_index[int(a)]
        n[k] = len(idx)
        y_a, w_a = sample.y[idx], w_area[idx]
        mu[k] = hajek_estimate(y_a, w_a)
        if n[k] >= 2:
            psi[k] = hajek_variance(y_a, w_a, mu[k], sample.pop_size(int(a)))
        stable[k] = 0.0 < mu[k] < 1.0
        if stable[k] and np.isfinite(psi[k]):
            theta[k], gamma[k] = empirical_logit(mu[k], psi[k])
    return DirectEstimates(area_ids=ids, n=n, mu=mu, psi=psi, stable=stable, theta=theta, gamma=gamma)


def overall_prevalence(sample: SurveySample) -> float:
    """Weighted overall prevalence (ratio estimator over the whole sample)."""
    return float(np.dot(sample.w_raw, sample.y) / sample.w_raw.sum())


# -- file formats ------------------------------------------------------------

SAMPLE_HEADER = ["area_id", "y", "x_survey", "x_census", "w_raw"]
AREAS_HEADER = ["area_id", "N", "Z"]


def write_sample_csv(path: str | Path, sample: SurveySample) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_HEADER)
        for k in range(sample.n):
            writer.writerow([
                int(sample.area_id[k]),
                int(sample.y[k]),
                int(sample.x_survey[k]),
                repr(float(sample.x_census[k])),
                repr(float(sample.w_raw[k])),
            ])


def read_sample_csv(path: str | Path, M: int, N: np.ndarray | None = None) -> SurveySample:
    cols: dict[str, list] = {name: [] for name in SAMPLE_HEADER}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != SAMPLE_HEADER:
            raise SurveyDataError(f"bad sample header in {path}: {reader.fieldnames}")
        for row in reader:
            for name in SAMPLE_HEADER:
                cols[name].append(row[name])
    return SurveySample(
        area_id=np.array(cols["area_id"], dtype=np.int64),
        y=np.array(cols["y"], dtype=np.int8),
        x_survey=np.array(cols["x_survey"], dtype=np.int64),
        x_census=np.array(cols["x_census"], dtype=float),
        w_raw=np.array(cols["w_raw"], dtype=float),
        M=M,
        N=N,
    )


def write_areas_csv(path: str | Path, N: np.ndarray, Z: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AREAS_HEADER)
        for i in range(len(N)):
            writer.writerow([i + 1, int(N[i]), repr(float(Z[i]))])


def read_areas_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read area metadata; returns (N, Z) indexed by area id - 1."""
    ids, Ns, Zs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != AREAS_HEADER:
            raise SurveyDataError(f"bad areas header in {path}: {reader.fieldnames}")
        for row in reader:
            ids.append(int(row["area_id"]))
            Ns.append(int(row["N"]))
            Zs.append(float(row["Z"]))
    order = np.argsort(ids)
    ids_arr = np.asarray(ids)[order]
    if not np.array_equal(ids_arr, np.arange(1, len(ids) + 1)):
        raise SurveyDataError("area metadata must cover ids 1..M exactly")
    return np.asarray(Ns, dtype=np.int64)[order], np.asarray(Zs, dtype=float)[order]


def read_benchmark_json(path: str | Path) -> dict:
    """Benchmark spec: {region: {"areas": [...], "C_hat": x, "var": v}}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = {}
    for region, entry in raw.items():
        out[region] = {
            "areas": np.asarray(entry["areas"], dtype=np.int64),
            "C_hat": float(entry["C_hat"]),
            "var": float(entry["var"]),
        }
    return out
