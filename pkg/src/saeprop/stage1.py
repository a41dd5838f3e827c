"""First-stage individual-level model and its area-level summaries.

The model is a survey-weighted (pseudo-likelihood) Bayesian logistic mixed
model: each record's Bernoulli log likelihood is multiplied by its
sample-scaled weight.  Posterior draws of the record-level probabilities are
aggregated into smoothed area estimates

    mu_i^t = sum_j w_ij p_ij^t / n_i,

whose sampling variance adds the direct-estimate variance to the variance of
the smoothing shift B_i^t = sum_j w_ij (p_ij^t - y_ij) / n_i.  Because the
aggregated values are probabilities, the smoothed estimates never collapse to
0 or 1.  Two smoothing diagnostics are provided: the area linear comparison
(weighted least squares slope of smoothed on direct log odds) and the
smoothing ratio (individual-level residual comparison).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .components import (
    half_normal_lpdf_grad_logscale,
    student_t3_lpdf_grad,
)
from .diagnostics import rhat_many
from .engine import EngineConfig, Layout, LogDensityModel, LOG, PosteriorMatrix, sample
from .survey import (
    DirectEstimates,
    SurveySample,
    direct_estimates,
    empirical_logit,
    weighted_mean_variance,
)


@dataclass(frozen=True)
class Stage1Spec:
    """Configuration of the first-stage model.

    ``fixed_unit_scale`` adds a non-centered individual-level error with the
    given (known) standard deviation instead of estimating a residual scale;
    this is the fixed-residual-error variant used to dial smoothing up or
    down.  ``saturated()`` is the overfit probe: per-record free effects with
    a wide prior and no pooling.
    """

    use_x_survey: bool = True
    use_x_census: bool = True
    use_z: bool = True
    include_area_effect: bool = True
    fixed_unit_scale: float | None = None
    coef_sd: float = 2.0
    area_scale_prior: float = 1.0

    @staticmethod
    def saturated(scale: float = 15.0) -> "Stage1Spec":
        return Stage1Spec(use_x_survey=False, use_x_census=False, use_z=False,
                          include_area_effect=False, fixed_unit_scale=scale)

    @staticmethod
    def intercept_only() -> "Stage1Spec":
        return Stage1Spec(use_x_survey=False, use_x_census=False, use_z=False,
                          include_area_effect=False, fixed_unit_scale=None)


def build_design(sample: SurveySample, Z: np.ndarray | None, spec: Stage1Spec) -> tuple[np.ndarray, list[str]]:
    """Mean-centered fixed-effect design (no intercept column)."""
    cols: list[np.ndarray] = []
    names: list[str] = []
    if spec.use_x_survey:
        levels = np.unique(sample.x_survey)
        for lev in levels[:-1]:  # last present level is the reference
            cols.append((sample.x_survey == lev).astype(float))
            names.append(f"x_survey_{int(lev)}")
    if spec.use_x_census:
        cols.append(sample.x_census.astype(float))
        names.append("x_census")
    if spec.use_z:
        if Z is None:
            raise ValueError("area covariate requested but not provided")
        cols.append(np.asarray(Z, dtype=float)[sample.area_id - 1])
        names.append("z")
    if not cols:
        return np.zeros((sample.n, 0)), []
    X = np.column_stack(cols)
    X = X - X.mean(axis=0, keepdims=True)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("stage-1 design matrix is rank deficient")
    return X, names


class Stage1Model(LogDensityModel):
    """Pseudo-likelihood logistic mixed model on the unconstrained scale."""

    def __init__(self, sample: SurveySample, Z: np.ndarray | None, spec: Stage1Spec):
        self.spec = spec
        self.sample = sample
        self.X, self.coef_names = build_design(sample, Z, spec)
        self.w = sample.w_sample
        self.y = sample.y.astype(float)
        # map records to a compact 0..m-1 area code
        self.area_ids = sample.area_ids
        self.code = np.searchsorted(self.area_ids, sample.area_id)
        self.m = len(self.area_ids)
        self.n = sample.n

        layout = Layout()
        self.sl_alpha = layout.add("intercept", 1)
        self.sl_coef = layout.add("coef", self.X.shape[1],
                                  labels=[f"coef[{c}]" for c in self.coef_names])
        if spec.include_area_effect:
            self.sl_araw = layout.add("area_raw", self.m)
            self.sl_lsig = layout.add("sigma_area", 1, kind=LOG)
        if spec.fixed_unit_scale is not None:
            self.sl_uraw = layout.add("unit_raw", self.n)
        layout.finalize()
        self.layout = layout

    def _eta(self, z: np.ndarray) -> np.ndarray:
        eta = np.full(self.n, z[self.sl_alpha][0])
        if self.X.shape[1]:
            eta += self.X @ z[self.sl_coef]
        if self.spec.include_area_effect:
            sigma = np.exp(z[self.sl_lsig][0])
            eta += sigma * z[self.sl_araw][self.code]
        if self.spec.fixed_unit_scale is not None:
            eta += self.spec.fixed_unit_scale * z[self.sl_uraw]
        return eta

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.dim)
        eta = self._eta(z)
        if not np.all(np.isfinite(eta)):
            return -np.inf, grad
        # weighted Bernoulli log likelihood: sum w (y*eta - log(1 + e^eta))
        val = float(np.dot(self.w, self.y * eta - np.logaddexp(0.0, eta)))
        d_eta = self.w * (self.y - expit(eta))

        alpha = z[self.sl_alpha][0]
        v, g = student_t3_lpdf_grad(alpha)
        val += v
        grad[self.sl_alpha] += g + d_eta.sum()

        if self.X.shape[1]:
            coef = z[self.sl_coef]
            val += float(-0.5 * np.dot(coef, coef) / self.spec.coef_sd**2)
            grad[self.sl_coef] += -coef / self.spec.coef_sd**2 + self.X.T @ d_eta

        if self.spec.include_area_effect:
            raw = z[self.sl_araw]
            sigma = np.exp(z[self.sl_lsig][0])
            per_area = np.bincount(self.code, weights=d_eta, minlength=self.m)
            val += float(-0.5 * np.dot(raw, raw))
            grad[self.sl_araw] += -raw + sigma * per_area
            v, g = half_normal_lpdf_grad_logscale(sigma, self.spec.area_scale_prior)
            val += v
            grad[self.sl_lsig] += g + sigma * float(np.dot(raw, per_area))

        if self.spec.fixed_unit_scale is not None:
            uraw = z[self.sl_uraw]
            val += float(-0.5 * np.dot(uraw, uraw))
            grad[self.sl_uraw] += -uraw + self.spec.fixed_unit_scale * d_eta
        return val, grad

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        z = 0.1 * rng.standard_normal(self.dim)
        prev = float(np.clip(np.dot(self.w, self.y) / self.w.sum(), 1e-3, 1 - 1e-3))
        z[self.sl_alpha] += np.log(prev / (1 - prev))
        if self.spec.include_area_effect:
            z[self.sl_lsig] = np.log(0.5) + 0.1 * rng.standard_normal()
        return z

    def prob_draws(self, matrix: PosteriorMatrix) -> np.ndarray:
        """Record-level probabilities per draw: (chains, draws, n)."""
        vals = matrix.values
        eta = np.zeros(vals.shape[:2] + (self.n,))
        eta += vals[..., self.sl_alpha]
        if self.X.shape[1]:
            eta += vals[..., self.sl_coef] @ self.X.T
        if self.spec.include_area_effect:
            sigma = vals[..., self.sl_lsig]
            eta += sigma * vals[..., self.sl_araw][..., self.code]
        if self.spec.fixed_unit_scale is not None:
            eta += self.spec.fixed_unit_scale * vals[..., self.sl_uraw]
        return expit(eta)


@dataclass
class Stage1Fit:
    matrix: PosteriorMatrix
    model: Stage1Model
    p_chains: np.ndarray        # (chains, draws, n)
    mu_area_chains: np.ndarray  # (chains, draws, m)
    max_rhat: float
    converged: bool


def fit_stage1(
    sample: SurveySample,
    Z: np.ndarray | None,
    spec: Stage1Spec | None = None,
    engine: EngineConfig | None = None,
    rhat_threshold: float = 1.02,
) -> Stage1Fit:
    """Fit the first-stage model and monitor the smoothed area estimates."""
    spec = spec or Stage1Spec()
    engine = engine or EngineConfig()
    model = Stage1Model(sample, Z, spec)
    matrix = sample_model(model, engine)
    p = model.prob_draws(matrix)
    w_area = sample.w_area
    mu_area = np.empty(p.shape[:2] + (model.m,))
    for k, a in enumerate(model.area_ids):
        idx = sample.area_index[int(a)]
        mu_area[..., k] = p[..., idx] @ w_area[idx] / len(idx)
    monitored = rhat_many(mu_area)
    if np.any(np.isfinite(monitored)):
        max_rhat = float(np.nanmax(monitored))
    else:
        max_rhat = matrix.max_rhat()
    return Stage1Fit(
        matrix=matrix,
        model=model,
        p_chains=p,
        mu_area_chains=mu_area,
        max_rhat=max_rhat,
        converged=bool(max_rhat <= rhat_threshold),
    )


def sample_model(model: LogDensityModel, engine: EngineConfig) -> PosteriorMatrix:
    return sample(model, engine)


@dataclass
class S1Summaries:
    """Per-area posterior summaries of the smoothed estimates.

    Draw-indexed arrays have shape (T, m) where T counts post-warmup draws
    pooled over chains and m the included sampled areas (those with at least
    two records).  ``theta_subset`` holds the without-replacement subset used
    by the second stage.
    """

    area_ids: np.ndarray
    n: np.ndarray
    mu: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    bias: np.ndarray
    gamma_bar: np.ndarray
    var_theta: np.ndarray
    theta_subset: np.ndarray
    subset_index: np.ndarray
    mu_direct: np.ndarray
    psi_direct: np.ndarray
    theta_direct: np.ndarray
    gamma_direct: np.ndarray
    stable: np.ndarray

    @property
    def T(self) -> int:
        return self.mu.shape[0]

    def mu_median(self) -> np.ndarray:
        return np.median(self.mu, axis=0)

    def theta_median(self) -> np.ndarray:
        return np.median(self.theta, axis=0)

    def write_draws_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["area_id", "draw", "mu", "psi", "theta", "gamma"])
            for k, a in enumerate(self.area_ids):
                for t in range(self.T):
                    writer.writerow([int(a), t,
                                     repr(float(self.mu[t, k])), repr(float(self.psi[t, k])),
                                     repr(float(self.theta[t, k])), repr(float(self.gamma[t, k]))])

    def write_summary_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["area_id", "n", "gamma_bar", "var_theta",
                             "theta_s1_median", "theta_direct", "psi_direct", "stable"])
            med = self.theta_median()
            for k, a in enumerate(self.area_ids):
                writer.writerow([int(a), int(self.n[k]),
                                 repr(float(self.gamma_bar[k])), repr(float(self.var_theta[k])),
                                 repr(float(med[k])), repr(float(self.theta_direct[k])),
                                 repr(float(self.psi_direct[k])), int(self.stable[k])])


def build_s1_estimates(
    p_draws: np.ndarray,
    sample: SurveySample,
    direct: DirectEstimates | None = None,
    subset_fraction: float = 0.5,
    seed: int = 0,
) -> S1Summaries:
    """Aggregate record probabilities into smoothed area estimates per draw.

    Enforces the variance decomposition psi_s1 = psi_direct + v(B) exactly,
    and the logit-scale transforms.  Areas with a single record are dropped
    with a warning (their sampling variance is undefined).
    """
    p_draws = np.asarray(p_draws, dtype=float)
    if p_draws.ndim == 3:
        p_draws = p_draws.reshape(-1, p_draws.shape[2])
    T = p_draws.shape[0]
    direct = direct or direct_estimates(sample)
    w_area = sample.w_area

    keep: list[int] = []
    for k, a in enumerate(direct.area_ids):
        if len(sample.area_index[int(a)]) >= 2:
            keep.append(k)
        else:
            warnings.warn(f"area {a} excluded from stage-1 summaries: single record")
    m = len(keep)
    mu = np.empty((T, m)); psi = np.empty((T, m)); bias = np.empty((T, m))
    theta = np.empty((T, m)); gamma = np.empty((T, m))
    for j, k in enumerate(keep):
        a = int(direct.area_ids[k])
        idx = sample.area_index[a]
        n_i = len(idx)
        N_i = sample.pop_size(a)
        w = w_area[idx]
        y = sample.y[idx].astype(float)
        P = p_draws[:, idx]
        mu[:, j] = P @ w / n_i
        d = P - y
        bias[:, j] = d @ w / n_i
        fpc = 1.0 if N_i is None else 1.0 - n_i / N_i
        c = (1.0 / n_i) * fpc * (1.0 / (n_i - 1.0))
        resid = d - bias[:, j][:, None]
        vB = c * (resid * resid) @ (w * w)
        psi[:, j] = direct.psi[k] + vB
        theta[:, j] = np.log(mu[:, j]) - np.log1p(-mu[:, j])
        gamma[:, j] = psi[:, j] / (mu[:, j] * (1.0 - mu[:, j])) ** 2

    t_sub = max(1, int(round(subset_fraction * T)))
    sub_idx = np.sort(rngmod.stream(seed, 42).choice(T, size=t_sub, replace=False))
    keep_arr = np.asarray(keep, dtype=np.int64)
    return S1Summaries(
        area_ids=direct.area_ids[keep_arr],
        n=direct.n[keep_arr],
        mu=mu, psi=psi, theta=theta, gamma=gamma, bias=bias,
        gamma_bar=gamma.mean(axis=0),
        var_theta=theta.var(axis=0),
        theta_subset=theta[sub_idx],
        subset_index=sub_idx,
        mu_direct=direct.mu[keep_arr],
        psi_direct=direct.psi[keep_arr],
        theta_direct=direct.theta[keep_arr],
        gamma_direct=direct.gamma[keep_arr],
        stable=direct.stable[keep_arr],
    )


def alc(theta_s1_median: np.ndarray, theta_direct: np.ndarray, psi_direct: np.ndarray) -> float:
    """Area linear comparison: WLS slope of smoothed on direct log odds.

    Weights are inverse direct variances; only areas with finite direct
    transforms (stable, non-singleton) contribute.  A slope near 1 means
    little smoothing.
    """
    y = np.asarray(theta_s1_median, dtype=float)
    x = np.asarray(theta_direct, dtype=float)
    w = 1.0 / np.asarray(psi_direct, dtype=float)
    ok = np.isfinite(x) & np.isfinite(w) & (w > 0) & np.isfinite(y)
    x, y, w = x[ok], y[ok], w[ok]
    if len(x) < 3:
        raise ValueError("need at least 3 stable areas for the ALC")
    xbar = np.dot(w, x) / w.sum()
    ybar = np.dot(w, y) / w.sum()
    sxx = np.dot(w, (x - xbar) ** 2)
    if sxx == 0.0:
        raise ValueError("no variation in direct estimates")
    return float(np.dot(w, (x - xbar) * (y - ybar)) / sxx)


def smoothing_ratio(
    p_draws: np.ndarray,
    sample: SurveySample,
    mu_overall: float,
) -> np.ndarray:
    """Per-draw smoothing ratio comparing model residuals to overall-mean
    residuals; 1 means no smoothing (fit reproduces the data), 0 means
    smoothing all the way to the overall prevalence."""
    p_draws = np.asarray(p_draws, dtype=float)
    if p_draws.ndim == 3:
        p_draws = p_draws.reshape(-1, p_draws.shape[2])
    w = sample.w_area
    y = sample.y.astype(float)
    num = np.zeros(p_draws.shape[0])
    den = 0.0
    for a in sample.area_ids:
        idx = sample.area_index[int(a)]
        n_i = len(idx)
        num += np.abs((y[idx] - p_draws[:, idx]) @ w[idx] / n_i)
        den += abs(float(np.dot(w[idx], y[idx] - mu_overall)) / n_i)
    if den == 0.0:
        raise ValueError("degenerate sample: zero overall-residual denominator")
    return 1.0 - num / den
