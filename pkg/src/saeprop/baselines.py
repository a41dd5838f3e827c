"""Comparison models: LOG, BIN, BETA and ELN.

* LOG: survey-weighted logistic mixed model on the sampled records (census
  covariates only), aggregated over observed and unobserved individuals.
* BIN: binomial model for area sample counts; deliberately ignores the
  weights, serving as the design-naive baseline.
* BETA: area-level Beta likelihood with a variance-matching precision
  parameter; requires a variance function over every area to keep the shape
  parameters positive, and the mean is constrained to (0.03, 0.97).
* ELN: Gaussian model for the empirical-logit direct estimates; shares the
  linking-model implementation with the second stage.

Unstable direct estimates are perturbed by 0.001 before modeling; their
invalid variances are imputed through the jointly fitted variance function.
"""
from __future__ import annotations

import warnings

import numpy as np
from scipy.special import digamma, expit, gammaln

from .components import (
    GvfBlock,
    LOG2PI,
    half_normal_lpdf_grad_logscale,
    normal_lpdf,
    student_t3_lpdf_grad,
)
from .engine import EngineConfig, Layout, LogDensityModel, LOG, PosteriorMatrix, sample
from .results import AreaFit, convergence_gate
from .simulate import CensusFrame
from .stage2 import CovariateLinking, UnstructuredEffect
from .survey import (
    DirectEstimates,
    SurveySample,
    direct_estimates,
    perturb_unstable,
)

BETA_MU_LO, BETA_MU_HI = 0.03, 0.97


# -- LOG ----------------------------------------------------------------------


class LogModel(LogDensityModel):
    """Pseudo-likelihood logistic mixed model with effects for all M areas."""

    def __init__(self, sample: SurveySample, Z: np.ndarray,
                 coef_sd: float = 2.0, area_scale_prior: float = 1.0):
        self.sample = sample
        self.M = sample.M
        Z = np.asarray(Z, dtype=float)
        X = np.column_stack([sample.x_census.astype(float), Z[sample.area_id - 1]])
        self.col_means = X.mean(axis=0)
        self.X = X - self.col_means
        self.w = sample.w_sample
        self.y = sample.y.astype(float)
        self.area0 = sample.area_id - 1
        self.Z = Z
        self.coef_sd = coef_sd
        self.area_scale_prior = area_scale_prior

        layout = Layout()
        self.sl_alpha = layout.add("intercept", 1)
        self.sl_coef = layout.add("coef", 2, labels=["coef[x_census]", "coef[z]"])
        self.sl_araw = layout.add("area_raw", self.M)
        self.sl_lsig = layout.add("sigma_area", 1, kind=LOG)
        layout.finalize()
        self.layout = layout

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.dim)
        sigma = np.exp(z[self.sl_lsig][0])
        eta = z[self.sl_alpha][0] + self.X @ z[self.sl_coef] + sigma * z[self.sl_araw][self.area0]
        val = float(np.dot(self.w, self.y * eta - np.logaddexp(0.0, eta)))
        d_eta = self.w * (self.y - expit(eta))

        alpha = z[self.sl_alpha][0]
        v, g = student_t3_lpdf_grad(alpha)
        val += v
        grad[self.sl_alpha] += g + d_eta.sum()

        coef = z[self.sl_coef]
        val += float(-0.5 * np.dot(coef, coef) / self.coef_sd ** 2)
        grad[self.sl_coef] += -coef / self.coef_sd ** 2 + self.X.T @ d_eta

        raw = z[self.sl_araw]
        per_area = np.bincount(self.area0, weights=d_eta, minlength=self.M)
        val += float(-0.5 * np.dot(raw, raw))
        grad[self.sl_araw] += -raw + sigma * per_area
        v, g = half_normal_lpdf_grad_logscale(sigma, self.area_scale_prior)
        val += v
        grad[self.sl_lsig] += g + sigma * float(np.dot(raw, per_area))
        return val, grad

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        z = 0.1 * rng.standard_normal(self.dim)
        prev = float(np.clip(self.y.mean(), 1e-3, 1 - 1e-3))
        z[self.sl_alpha] += np.log(prev / (1 - prev))
        z[self.sl_lsig] = np.log(0.5) + 0.1 * rng.standard_normal()
        return z

    def predict_mu(self, matrix: PosteriorMatrix, census: CensusFrame,
                   chunk: int = 64) -> np.ndarray:
        """Aggregate observed outcomes and predicted probabilities per area.

        mu_i = (sum_{sampled} y + sum_{unsampled} p) / N_i, computed by
        predicting every census individual and subtracting the predictions
        for the sampled records' covariate values.
        """
        s = self.sample
        C, D, _ = matrix.values.shape
        flat = matrix.values.reshape(C * D, -1)
        alpha = flat[:, self.sl_alpha][:, 0]
        coef = flat[:, self.sl_coef]
        sigma = flat[:, self.sl_lsig][:, 0]
        raw = flat[:, self.sl_araw]

        order = np.argsort(census.area_id, kind="stable")
        cen_area0 = census.area_id[order] - 1
        Xcen = np.column_stack([
            census.x_census.astype(float)[order],
            self.Z[cen_area0],
        ]) - self.col_means
        bounds = np.searchsorted(cen_area0, np.arange(self.M))
        bounds = np.append(bounds, len(cen_area0))

        y_obs = np.bincount(self.area0, weights=self.y, minlength=self.M)
        Nvec = census.N.astype(float)
        T = C * D
        mu = np.empty((T, self.M))
        for start in range(0, T, chunk):
            end = min(start + chunk, T)
            e_area = sigma[start:end, None] * raw[start:end]
            eta_cen = alpha[start:end, None] + coef[start:end] @ Xcen.T + e_area[:, cen_area0]
            p_cen = expit(eta_cen)
            sums = np.add.reduceat(p_cen, bounds[:-1], axis=1)
            sums[:, np.diff(bounds) == 0] = 0.0
            eta_obs = alpha[start:end, None] + coef[start:end] @ self.X.T + e_area[:, self.area0]
            p_obs = expit(eta_obs)
            obs_sums = np.zeros((end - start, self.M))
            for i in range(end - start):
                obs_sums[i] = np.bincount(self.area0, weights=p_obs[i], minlength=self.M)
            mu[start:end] = (y_obs[None, :] + sums - obs_sums) / Nvec[None, :]
        return np.clip(mu, 1e-12, 1 - 1e-12).reshape(C, D, self.M)


def fit_log(sample_data: SurveySample, census: CensusFrame,
            engine: EngineConfig | None = None,
            rhat_threshold: float = 1.02) -> AreaFit:
    engine = engine or EngineConfig()
    if census.M != sample_data.M:
        raise ValueError("census and sample disagree on the number of areas")
    model = LogModel(sample_data, census.Z)
    matrix = sample(model, engine)
    mu = model.predict_mu(matrix, census)
    max_rhat, ok = convergence_gate(matrix, mu, rhat_threshold)
    direct = direct_estimates(sample_data)
    return AreaFit(
        model_tag="LOG",
        mu_chains=mu,
        sampled=_sampled_mask(sample_data),
        stable=_stable_mask(sample_data, direct),
        max_rhat=max_rhat,
        converged=ok,
        matrix=matrix,
    )


# -- BIN ----------------------------------------------------------------------


class BinModel(LogDensityModel):
    """Binomial counts model; weights are deliberately ignored."""

    def __init__(self, sample: SurveySample, Z: np.ndarray, sigma_scale: float = 1.0):
        self.M = sample.M
        ids = sample.area_ids
        self.sampled_idx = ids - 1
        self.counts = np.array([sample.y[sample.area_index[int(a)]].sum() for a in ids], dtype=float)
        self.n = np.array([len(sample.area_index[int(a)]) for a in ids], dtype=float)
        self.lchoose = gammaln(self.n + 1) - gammaln(self.counts + 1) - gammaln(self.n - self.counts + 1)
        self.linking = CovariateLinking(Z, UnstructuredEffect(self.M, sigma_scale))
        layout = Layout()
        self.linking.register(layout)
        layout.finalize()
        self.layout = layout

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.dim)
        eta = self.linking.eta(z)
        es = eta[self.sampled_idx]
        val = float(np.sum(self.lchoose + self.counts * es - self.n * np.logaddexp(0.0, es)))
        d_eta = np.zeros(self.M)
        np.add.at(d_eta, self.sampled_idx, self.counts - self.n * expit(es))
        val += self.linking.logp_grad(z, d_eta, grad)
        return val, grad

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self.dim)
        prev = float(np.clip(self.counts.sum() / self.n.sum(), 1e-3, 1 - 1e-3))
        self.linking.init(z, rng, center=np.log(prev / (1 - prev)))
        return z

    def mu_draws(self, matrix: PosteriorMatrix) -> np.ndarray:
        return expit(self.linking.eta_draws(matrix.values))


def fit_bin(sample_data: SurveySample, Z: np.ndarray,
            engine: EngineConfig | None = None,
            rhat_threshold: float = 1.02) -> AreaFit:
    engine = engine or EngineConfig()
    model = BinModel(sample_data, Z)
    matrix = sample(model, engine)
    mu = model.mu_draws(matrix)
    max_rhat, ok = convergence_gate(matrix, mu, rhat_threshold)
    direct = direct_estimates(sample_data)
    return AreaFit(
        model_tag="BIN",
        mu_chains=mu,
        sampled=_sampled_mask(sample_data),
        stable=_stable_mask(sample_data, direct),
        max_rhat=max_rhat,
        converged=ok,
        matrix=matrix,
    )


# -- BETA ---------------------------------------------------------------------


def beta_mean_bounds(psi: float) -> tuple[float, float]:
    """Admissible mean interval keeping both shape parameters positive."""
    if psi >= 0.25:
        raise ValueError("bounds collapse: variance must be below 0.25")
    root = np.sqrt(1.0 - 4.0 * psi)
    return (1.0 - root) / 2.0, (1.0 + root) / 2.0


class BetaModel(LogDensityModel):
    """Area-level Beta likelihood with variance-matching precision.

    phi_i = mu_i (1 - mu_i) / psi_i - 1 is recomputed from the current mean,
    so the likelihood variance always equals the supplied sampling variance;
    positivity of the shapes is enforced by rejection, and the fixed mean
    constraint (0.03, 0.97) keeps the sampler off the boundaries.  The
    variance function imputes psi for every area without a valid direct
    variance (including all nonsampled areas, whose bounds must still hold).
    """

    def __init__(self, sample: SurveySample, direct: DirectEstimates, Z: np.ndarray,
                 sigma_scale: float = 2.0):
        self.M = sample.M
        self.N = sample.N if sample.N is not None else np.full(self.M, np.nan)
        if sample.N is None:
            raise ValueError("Beta model needs area population sizes for its variance function")
        ids = direct.area_ids
        self.sampled_idx = ids - 1
        self.mu_d = perturb_unstable(direct.mu)
        valid = direct.stable & np.isfinite(direct.psi) & (direct.psi > 0) & (direct.psi < 0.25)
        if np.any(direct.stable & np.isfinite(direct.psi) & (direct.psi >= 0.25)):
            warnings.warn("areas with sampling variance >= 0.25 use imputed variances")
        self.valid = valid
        self.pos_valid = np.nonzero(valid)[0]
        self.pos_invalid = np.nonzero(~valid)[0]
        if len(self.pos_valid) < 2:
            raise ValueError("too few valid direct variances to fit the Beta variance function")
        self.psi_valid = direct.psi[self.pos_valid]

        logN = np.log(self.N.astype(float))
        # invalid sampled areas first, then all nonsampled areas
        nonsampled = np.setdiff1d(np.arange(self.M), self.sampled_idx)
        self.imp_targets = np.concatenate([self.sampled_idx[self.pos_invalid], nonsampled])
        g_obs = np.log(self.psi_valid / (0.25 + self.psi_valid))
        self.gvf = GvfBlock(
            g_obs=g_obs,
            L_obs=np.column_stack([np.ones(len(self.pos_valid)), logN[self.sampled_idx[self.pos_valid]]]),
            L_imp=np.column_stack([np.ones(len(self.imp_targets)), logN[self.imp_targets]])
            if len(self.imp_targets) else np.zeros((0, 2)),
            style="quarter_logit",
        )
        self.linking = CovariateLinking(Z, UnstructuredEffect(self.M, sigma_scale))
        layout = Layout()
        self.linking.register(layout)
        self.gvf.register(layout)
        layout.finalize()
        self.layout = layout

    def _mu_all(self, eta: np.ndarray) -> np.ndarray:
        return BETA_MU_LO + (BETA_MU_HI - BETA_MU_LO) * expit(eta)

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.dim)
        eta = self.linking.eta(z)
        sig = expit(eta)
        mu = BETA_MU_LO + (BETA_MU_HI - BETA_MU_LO) * sig
        dmu_deta = (BETA_MU_HI - BETA_MU_LO) * sig * (1.0 - sig)

        psi = np.empty(self.M)
        psi.fill(np.nan)
        psi[self.sampled_idx[self.pos_valid]] = self.psi_valid
        imputed = None
        if len(self.imp_targets):
            imputed = self.gvf.impute(z)
            if not np.all(np.isfinite(imputed)) or np.any(imputed <= 0):
                return -np.inf, grad
            psi[self.imp_targets] = imputed

        t = mu * (1.0 - mu)
        phi = t / psi - 1.0
        if np.any(phi <= 0.0):
            # a shape parameter would go nonpositive; reject this point
            return -np.inf, grad

        d_eta = np.zeros(self.M)
        # Beta likelihood over sampled areas only
        si = self.sampled_idx
        mu_s, phi_s, psi_s = mu[si], phi[si], psi[si]
        a = mu_s * phi_s
        b = phi_s - a
        d = self.mu_d
        val = float(np.sum((a - 1.0) * np.log(d) + (b - 1.0) * np.log1p(-d)
                           - gammaln(a) - gammaln(b) + gammaln(phi_s)))
        La = np.log(d) - digamma(a) + digamma(phi_s)
        Lb = np.log1p(-d) - digamma(b) + digamma(phi_s)
        dphi_dmu = (1.0 - 2.0 * mu_s) / psi_s
        dL_dmu = La * (phi_s + mu_s * dphi_dmu) + Lb * (-phi_s + (1.0 - mu_s) * dphi_dmu)
        d_eta[si] += dL_dmu * dmu_deta[si]

        # chain through imputed variances on sampled invalid areas
        if len(self.pos_invalid):
            inv = self.pos_invalid
            mu_i, psi_i = mu_s[inv], psi_s[inv]
            dL_dpsi = (La[inv] * mu_i + Lb[inv] * (1 - mu_i)) * (-(mu_i * (1 - mu_i)) / psi_i ** 2)
            d_omega, d_lsg = self.gvf.impute_grads(z, imputed)
            k = np.arange(len(inv))  # invalid sampled areas lead imp_targets
            grad[self.gvf.sl_omega] += d_omega[k].T @ dL_dpsi
            grad[self.gvf.sl_lsg] += float(np.dot(d_lsg[k], dL_dpsi))

        val += self.linking.logp_grad(z, d_eta, grad)
        val += self.gvf.logp_grad(z, grad)
        return val, grad

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self.dim)
        mu0 = float(np.clip(np.mean(self.mu_d), 0.05, 0.95))
        u = (mu0 - BETA_MU_LO) / (BETA_MU_HI - BETA_MU_LO)
        self.linking.init(z, rng, center=np.log(u / (1 - u)))
        omega0, lsg0 = self.gvf.init_values()
        z[self.gvf.sl_omega] = omega0 + 0.05 * rng.standard_normal(self.gvf.q)
        z[self.gvf.sl_lsg] = lsg0 + 0.05 * rng.standard_normal()
        return z

    def mu_draws(self, matrix: PosteriorMatrix) -> np.ndarray:
        return self._mu_all(self.linking.eta_draws(matrix.values))


def fit_beta(sample_data: SurveySample, Z: np.ndarray,
             engine: EngineConfig | None = None,
             rhat_threshold: float = 1.02) -> AreaFit:
    engine = engine or EngineConfig()
    direct = direct_estimates(sample_data)
    model = BetaModel(sample_data, direct, Z)
    matrix = sample(model, engine)
    mu = model.mu_draws(matrix)
    max_rhat, ok = convergence_gate(matrix, mu, rhat_threshold)
    return AreaFit(
        model_tag="BETA",
        mu_chains=mu,
        sampled=_sampled_mask(sample_data),
        stable=_stable_mask(sample_data, direct),
        max_rhat=max_rhat,
        converged=ok,
        matrix=matrix,
    )


# -- ELN ----------------------------------------------------------------------


class ElnModel(LogDensityModel):
    """Gaussian model for empirical-logit direct estimates.

    Shares the linking implementation with the second-stage model; logit-scale
    variances for unstable areas come from the same half-log variance
    function with log sample size as the covariate.
    """

    def __init__(self, sample: SurveySample, direct: DirectEstimates, Z: np.ndarray,
                 sigma_scale: float = 2.0, gvf_corrected: bool = True):
        self.M = sample.M
        ids = direct.area_ids
        self.sampled_idx = ids - 1
        mu_pert = perturb_unstable(direct.mu)
        self.theta_d = np.log(mu_pert) - np.log1p(-mu_pert)
        valid = direct.stable & np.isfinite(direct.gamma) & (direct.gamma > 0)
        self.pos_valid = np.nonzero(valid)[0]
        self.pos_invalid = np.nonzero(~valid)[0]
        if len(self.pos_invalid) and not len(self.pos_valid):
            raise ValueError("cannot fit variance function: no stable areas")
        self.gamma_valid = direct.gamma[self.pos_valid]
        log_n = np.log(direct.n.astype(float))
        self.gvf = GvfBlock(
            g_obs=0.5 * np.log(self.gamma_valid),
            L_obs=np.column_stack([np.ones(len(self.pos_valid)), log_n[self.pos_valid]]),
            L_imp=np.column_stack([np.ones(len(self.pos_invalid)), log_n[self.pos_invalid]])
            if len(self.pos_invalid) else np.zeros((0, 2)),
            style="half_log",
            corrected=gvf_corrected,
        )
        self.linking = CovariateLinking(Z, UnstructuredEffect(self.M, sigma_scale))
        layout = Layout()
        self.linking.register(layout)
        self.gvf.register(layout)
        layout.finalize()
        self.layout = layout

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.dim)
        eta = self.linking.eta(z)
        gamma = np.empty(len(self.sampled_idx))
        gamma[self.pos_valid] = self.gamma_valid
        if len(self.pos_invalid):
            imputed = self.gvf.impute(z)
            if not np.all(np.isfinite(imputed)) or np.any(imputed <= 0):
                return -np.inf, grad
            gamma[self.pos_invalid] = imputed
        resid = self.theta_d - eta[self.sampled_idx]
        val = float(np.sum(-0.5 * (resid * resid / gamma + np.log(gamma) + LOG2PI)))
        d_eta = np.zeros(self.M)
        np.add.at(d_eta, self.sampled_idx, resid / gamma)
        if len(self.pos_invalid):
            r_u = resid[self.pos_invalid]
            g_u = gamma[self.pos_invalid]
            d_gamma = 0.5 * (r_u * r_u) / (g_u * g_u) - 0.5 / g_u
            d_omega, d_lsg = self.gvf.impute_grads(z, g_u)
            grad[self.gvf.sl_omega] += d_omega.T @ d_gamma
            grad[self.gvf.sl_lsg] += float(np.dot(d_lsg, d_gamma))
        val += self.linking.logp_grad(z, d_eta, grad)
        val += self.gvf.logp_grad(z, grad)
        return val, grad

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self.dim)
        self.linking.init(z, rng, center=float(np.median(self.theta_d)))
        omega0, lsg0 = self.gvf.init_values()
        z[self.gvf.sl_omega] = omega0 + 0.05 * rng.standard_normal(self.gvf.q)
        z[self.gvf.sl_lsg] = lsg0 + 0.05 * rng.standard_normal()
        return z

    def mu_draws(self, matrix: PosteriorMatrix) -> np.ndarray:
        return expit(self.linking.eta_draws(matrix.values))


def fit_eln(sample_data: SurveySample, Z: np.ndarray,
            engine: EngineConfig | None = None,
            rhat_threshold: float = 1.02,
            gvf_corrected: bool = True) -> AreaFit:
    engine = engine or EngineConfig()
    direct = direct_estimates(sample_data)
    model = ElnModel(sample_data, direct, Z, gvf_corrected=gvf_corrected)
    matrix = sample(model, engine)
    mu = model.mu_draws(matrix)
    max_rhat, ok = convergence_gate(matrix, mu, rhat_threshold)
    return AreaFit(
        model_tag="ELN",
        mu_chains=mu,
        sampled=_sampled_mask(sample_data),
        stable=_stable_mask(sample_data, direct),
        max_rhat=max_rhat,
        converged=ok,
        matrix=matrix,
    )


# -- helpers -------------------------------------------------------------------


def _sampled_mask(sample_data: SurveySample) -> np.ndarray:
    mask = np.zeros(sample_data.M, dtype=bool)
    mask[sample_data.area_ids - 1] = True
    return mask


def _stable_mask(sample_data: SurveySample, direct: DirectEstimates) -> np.ndarray:
    mask = np.zeros(sample_data.M, dtype=bool)
    mask[direct.area_ids - 1] = direct.stable
    return mask
