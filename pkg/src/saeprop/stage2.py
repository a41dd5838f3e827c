"""Second-stage area-level model and its spatial/benchmarking extensions.

The model links the first stage's smoothed log-odds draws to a covariate
model over all M areas through three Gaussian layers:

* measurement: each retained draw of an area's smoothed log odds is a noisy
  observation of a latent per-area mean, with the empirical draw variance;
  the contribution is downscaled by 1 / (number of retained draws) so that
  posterior uncertainty does not depend on how many draws are kept;
* sampling: the latent mean is centered on the linking predictor with the
  (mean) logit-scale sampling variance -- taken from the smoothed estimates
  for areas whose direct estimate is stable, and imputed through a jointly
  fitted generalized variance function otherwise;
* linking: intercept + area covariates + random effect over all M areas,
  optionally spatially structured (scaled ICAR + unstructured mixture).

Estimates for every area, sampled or not, are the inverse-logit of the
linking predictor.  Aggregates can be softly benchmarked inside the model or
ratio-adjusted exactly after the fact.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .components import (
    GvfBlock,
    LOG2PI,
    beta_lpdf_grad_logit,
    half_normal_lpdf_grad_logscale,
    normal_lpdf,
    student_t3_lpdf_grad,
)
from .engine import (
    EngineConfig,
    INTERVAL,
    LOG,
    Layout,
    LogDensityModel,
    PosteriorMatrix,
    sample,
)
from .results import AreaFit, convergence_gate
from .stage1 import S1Summaries, Stage1Fit, Stage1Spec, build_s1_estimates, fit_stage1
from .survey import SurveySample, aggregate_to_region, direct_estimates


# -- spatial scaffolding -----------------------------------------------------


def _connected_components(W: np.ndarray) -> list[np.ndarray]:
    M = W.shape[0]
    seen = np.zeros(M, dtype=bool)
    comps = []
    for start in range(M):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        comp = []
        while stack:
            i = stack.pop()
            comp.append(i)
            for k in np.nonzero(W[i] > 0)[0]:
                if not seen[k]:
                    seen[k] = True
                    stack.append(int(k))
        comps.append(np.asarray(sorted(comp)))
    return comps


def check_adjacency(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("adjacency must be square")
    if W.shape[0] == 0:
        raise ValueError("empty graph")
    if not np.allclose(W, W.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(W) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    if np.any(W < 0):
        raise ValueError("adjacency weights must be nonnegative")
    return W


def compute_icar_scaling(adjacency: np.ndarray) -> float:
    """Scaling factor for the structured effect: geometric mean of the
    marginal variances (diagonal of the sum-to-zero generalized inverse of
    the graph Laplacian), computed per connected component.  Isolated areas
    carry no structured effect and are excluded."""
    W = check_adjacency(adjacency)
    diag: list[float] = []
    for comp in _connected_components(W):
        if len(comp) < 2:
            continue
        sub = W[np.ix_(comp, comp)]
        Q = np.diag(sub.sum(axis=1)) - sub
        diag.extend(np.diag(np.linalg.pinv(Q)).tolist())
    if not diag:
        raise ValueError("graph has no edges")
    return float(np.exp(np.mean(np.log(np.asarray(diag)))))


def bym2_contribution(
    s: np.ndarray,
    v: np.ndarray,
    rho: float,
    sigma_delta: float,
    adjacency: np.ndarray,
    kappa: float,
) -> tuple[np.ndarray, dict[str, float]]:
    """Combined spatial/unstructured effect and its log-prior terms.

    delta_i = sigma_delta * (s_i sqrt(rho/kappa) + v_i sqrt(1-rho)); isolated
    areas have their structured part zeroed.  Returns (delta, terms) where
    terms holds the ICAR quadratic, the soft sum-to-zero penalty and the
    standard normal prior on v.
    """
    W = check_adjacency(adjacency)
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    s = np.asarray(s, dtype=float)
    v = np.asarray(v, dtype=float)
    M = W.shape[0]
    degree = W.sum(axis=1)
    s_eff = np.where(degree > 0, s, 0.0)
    delta = sigma_delta * (s_eff * np.sqrt(rho / kappa) + v * np.sqrt(1.0 - rho))
    ii, kk = np.nonzero(np.triu(W) > 0)
    icar = -0.5 * float(np.sum((s_eff[ii] - s_eff[kk]) ** 2))
    sz_sd = 0.001 * M
    sum_zero = float(normal_lpdf(s_eff.sum(), 0.0, sz_sd * sz_sd))
    v_prior = float(-0.5 * np.dot(v, v) - 0.5 * M * LOG2PI)
    return delta, {"icar": icar, "sum_zero": sum_zero, "v_prior": v_prior}


class UnstructuredEffect:
    """Non-centered iid area effect: delta = sigma * raw."""

    def __init__(self, M: int, sigma_scale: float = 2.0):
        self.M = M
        self.sigma_scale = sigma_scale

    def register(self, layout: Layout) -> None:
        self.sl_raw = layout.add("area_raw", self.M)
        self.sl_lsig = layout.add("sigma_area", 1, kind=LOG)

    def delta(self, z: np.ndarray) -> np.ndarray:
        return np.exp(z[self.sl_lsig][0]) * z[self.sl_raw]

    def logp_grad(self, z: np.ndarray, d_eta: np.ndarray, grad: np.ndarray) -> float:
        raw = z[self.sl_raw]
        sigma = np.exp(z[self.sl_lsig][0])
        val = float(-0.5 * np.dot(raw, raw) - 0.5 * self.M * LOG2PI)
        grad[self.sl_raw] += -raw + sigma * d_eta
        v, g = half_normal_lpdf_grad_logscale(sigma, self.sigma_scale)
        val += v
        grad[self.sl_lsig] += g + sigma * float(np.dot(raw, d_eta))
        return val

    def init(self, z: np.ndarray, rng: np.random.Generator) -> None:
        z[self.sl_raw] = 0.1 * rng.standard_normal(self.M)
        z[self.sl_lsig] = np.log(0.3) + 0.1 * rng.standard_normal()

    def delta_draws(self, values: np.ndarray) -> np.ndarray:
        return values[..., self.sl_lsig] * values[..., self.sl_raw]


class Bym2Effect:
    """Mixture of scaled ICAR and unstructured effects with mixing fraction.

    Isolated areas (no neighbors) contribute no structured component; their
    effect is purely unstructured.
    """

    def __init__(self, adjacency: np.ndarray, sigma_scale: float = 2.0,
                 rho_prior: str = "beta", rho_fixed: float | None = None):
        self.W = check_adjacency(adjacency)
        self.M = self.W.shape[0]
        self.kappa = compute_icar_scaling(self.W)
        degree = self.W.sum(axis=1)
        self.nonsingleton = np.nonzero(degree > 0)[0]
        self.s_pos = -np.ones(self.M, dtype=np.int64)
        self.s_pos[self.nonsingleton] = np.arange(len(self.nonsingleton))
        ii, kk = np.nonzero(np.triu(self.W) > 0)
        self.edge_i = self.s_pos[ii]
        self.edge_k = self.s_pos[kk]
        self.sigma_scale = sigma_scale
        if rho_prior not in ("beta", "uniform"):
            raise ValueError("rho_prior must be 'beta' or 'uniform'")
        self.rho_prior = rho_prior
        if rho_fixed is not None and not 0.0 <= rho_fixed <= 1.0:
            raise ValueError("fixed mixing fraction must lie in [0, 1]")
        self.rho_fixed = rho_fixed
        self.sz_sd = 0.001 * self.M

    def register(self, layout: Layout) -> None:
        self.sl_raw = layout.add("area_raw", self.M)
        self.sl_lsig = layout.add("sigma_area", 1, kind=LOG)
        self.sl_s = layout.add("spatial_raw", len(self.nonsingleton))
        if self.rho_fixed is None:
            self.sl_lrho = layout.add("mix_frac", 1, kind=INTERVAL, lo=0.0, hi=1.0)
        else:
            self.sl_lrho = None

    def _pieces(self, z: np.ndarray):
        sigma = np.exp(z[self.sl_lsig][0])
        if self.rho_fixed is None:
            rho = float(expit(z[self.sl_lrho][0]))
        else:
            rho = float(self.rho_fixed)
        s_full = np.zeros(self.M)
        s_full[self.nonsingleton] = z[self.sl_s]
        return sigma, rho, s_full

    def delta(self, z: np.ndarray) -> np.ndarray:
        sigma, rho, s_full = self._pieces(z)
        return sigma * (s_full * np.sqrt(rho / self.kappa) + z[self.sl_raw] * np.sqrt(1.0 - rho))

    def logp_grad(self, z: np.ndarray, d_eta: np.ndarray, grad: np.ndarray) -> float:
        sigma, rho, s_full = self._pieces(z)
        raw = z[self.sl_raw]
        s = z[self.sl_s]
        a = np.sqrt(rho / self.kappa)
        b = np.sqrt(1.0 - rho)

        val = float(-0.5 * np.dot(raw, raw) - 0.5 * self.M * LOG2PI)
        grad[self.sl_raw] += -raw + sigma * b * d_eta

        # ICAR quadratic over edges plus a soft sum-to-zero constraint
        ds = s[self.edge_i] - s[self.edge_k]
        val += -0.5 * float(np.dot(ds, ds))
        icar_grad = np.zeros(len(s))
        np.add.at(icar_grad, self.edge_i, -ds)
        np.add.at(icar_grad, self.edge_k, ds)
        ssum = s.sum()
        val += float(normal_lpdf(ssum, 0.0, self.sz_sd ** 2))
        icar_grad += -ssum / self.sz_sd ** 2
        grad[self.sl_s] += icar_grad + sigma * a * d_eta[self.nonsingleton]

        v, g = half_normal_lpdf_grad_logscale(sigma, self.sigma_scale)
        val += v
        delta = sigma * (s_full * a + raw * b)
        grad[self.sl_lsig] += g + float(np.dot(delta, d_eta))

        if self.rho_fixed is None:
            if self.rho_prior == "beta":
                pv, pg = beta_lpdf_grad_logit(rho, 3.05, 1.65)
            else:
                pv, pg = beta_lpdf_grad_logit(rho, 1.0, 1.0)
            val += pv
            d_delta_d_rho = sigma * (s_full / (2.0 * np.sqrt(rho * self.kappa))
                                     - raw / (2.0 * b))
            grad[self.sl_lrho] += pg + float(np.dot(d_delta_d_rho, d_eta)) * rho * (1.0 - rho)
        return val

    def init(self, z: np.ndarray, rng: np.random.Generator) -> None:
        z[self.sl_raw] = 0.1 * rng.standard_normal(self.M)
        z[self.sl_lsig] = np.log(0.3) + 0.1 * rng.standard_normal()
        z[self.sl_s] = 0.1 * rng.standard_normal(len(self.nonsingleton))
        if self.rho_fixed is None:
            z[self.sl_lrho] = 0.4 + 0.1 * rng.standard_normal()

    def delta_draws(self, values: np.ndarray) -> np.ndarray:
        sigma = values[..., self.sl_lsig]
        if self.rho_fixed is None:
            rho = values[..., self.sl_lrho]
        else:
            rho = np.full_like(sigma, self.rho_fixed)
        raw = values[..., self.sl_raw]
        s_full = np.zeros(values.shape[:2] + (self.M,))
        s_full[..., self.nonsingleton] = values[..., self.sl_s]
        return sigma * (s_full * np.sqrt(rho / self.kappa) + raw * np.sqrt(1.0 - rho))


class CovariateLinking:
    """Intercept + centered covariates + area effect; the single linking-model
    implementation used by the second stage and the area-level baselines."""

    def __init__(self, Z: np.ndarray, effect, coef_sd: float = 2.0):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        self.M = Z.shape[0]
        self.Zc = Z - Z.mean(axis=0, keepdims=True)
        if self.Zc.shape[1] and np.linalg.matrix_rank(self.Zc) < self.Zc.shape[1]:
            raise ValueError("area design matrix is rank deficient")
        self.q = self.Zc.shape[1]
        self.coef_sd = coef_sd
        self.effect = effect

    def register(self, layout: Layout) -> None:
        self.sl_alpha = layout.add("intercept", 1)
        if self.q:
            self.sl_coef = layout.add("coef", self.q,
                                      labels=[f"coef[z{j}]" for j in range(self.q)])
        self.effect.register(layout)

    def eta(self, z: np.ndarray) -> np.ndarray:
        eta = np.full(self.M, z[self.sl_alpha][0])
        if self.q:
            eta += self.Zc @ z[self.sl_coef]
        return eta + self.effect.delta(z)

    def logp_grad(self, z: np.ndarray, d_eta: np.ndarray, grad: np.ndarray) -> float:
        alpha = z[self.sl_alpha][0]
        val, g = student_t3_lpdf_grad(alpha)
        grad[self.sl_alpha] += g + d_eta.sum()
        if self.q:
            coef = z[self.sl_coef]
            val += float(-0.5 * np.dot(coef, coef) / self.coef_sd ** 2
                         - self.q * (np.log(self.coef_sd) + 0.5 * LOG2PI))
            grad[self.sl_coef] += -coef / self.coef_sd ** 2 + self.Zc.T @ d_eta
        val += self.effect.logp_grad(z, d_eta, grad)
        return val

    def init(self, z: np.ndarray, rng: np.random.Generator, center: float) -> None:
        z[self.sl_alpha] = center + 0.1 * rng.standard_normal()
        if self.q:
            z[self.sl_coef] = 0.1 * rng.standard_normal(self.q)
        self.effect.init(z, rng)

    def eta_draws(self, values: np.ndarray) -> np.ndarray:
        eta = values[..., self.sl_alpha] + self.effect.delta_draws(values)
        if self.q:
            eta += values[..., self.sl_coef] @ self.Zc.T
        return eta


# -- GVF imputation (module-level op, mirrored inside the models) ------------


def gvf_impute(omega: np.ndarray, sigma_gvf: float, n_i, corrected: bool = True):
    """Back-transform of the half-log variance regression at covariate
    (1, log n): exp(2 L w + 2 sigma^2), the lognormal-mean correction applied
    on the implied log-variance scale.  ``corrected=False`` drops the
    correction term."""
    omega = np.asarray(omega, dtype=float)
    u = omega[0] + omega[1] * np.log(np.asarray(n_i, dtype=float))
    bump = 2.0 * sigma_gvf ** 2 if corrected else 0.0
    return np.exp(2.0 * u + bump)


# -- benchmarking -------------------------------------------------------------


def exact_benchmark(
    mu_draws: np.ndarray,
    N: np.ndarray,
    memberships: dict[str, np.ndarray],
    C_hat: dict[str, float],
) -> tuple[np.ndarray, dict]:
    """Post-hoc ratio benchmarking of proportion draws.

    Per draw and region, divides by R = aggregate(mu) / C_hat so that the
    population-weighted re-aggregate matches the benchmark exactly.  Draws
    pushed above 1 are clamped just below 1 and counted.
    """
    mu = np.array(mu_draws, dtype=float, copy=True)
    N = np.asarray(N, dtype=float)
    clamped = 0
    for region, ids in memberships.items():
        target = float(C_hat[region])
        if not 0.0 < target < 1.0:
            raise ValueError(f"benchmark for region {region!r} must lie in (0, 1)")
        idx = np.asarray(ids, dtype=np.int64) - 1
        N_k = N[idx].sum()
        agg = mu[:, idx] @ N[idx] / (target * N_k)
        mu[:, idx] = mu[:, idx] / agg[:, None]
        over = mu[:, idx] > 1.0
        clamped += int(over.sum())
        if np.any(over):
            block = mu[:, idx]
            block[over] = 1.0 - 1e-9
            mu[:, idx] = block
    return mu, {"clamped_draws": clamped}


# -- the model ----------------------------------------------------------------


@dataclass(frozen=True)
class Stage2Spec:
    """Options for the second-stage fit."""

    spatial: bool = False
    adjacency: Optional[np.ndarray] = None
    rho_prior: str = "beta"
    rho_fixed: Optional[float] = None
    gvf_corrected: bool = True
    benchmark: Optional[dict] = None     # {region: {"areas", "C_hat", "var"}}
    epsilon: float = 0.3
    sigma_scale: float = 2.0
    coef_sd: float = 2.0

    def validate(self) -> None:
        if self.spatial and self.adjacency is None:
            raise ValueError("spatial model requested but no adjacency given")
        if self.benchmark is not None and not 0.0 < self.epsilon <= 1.0:
            raise ValueError("benchmark epsilon must lie in (0, 1]")


class Stage2Model(LogDensityModel):
    """Joint measurement/sampling/linking model with embedded GVF."""

    def __init__(self, s1: S1Summaries, Z: np.ndarray, N: np.ndarray, spec: Stage2Spec):
        spec.validate()
        self.spec = spec
        self.s1 = s1
        self.N = np.asarray(N, dtype=float)
        self.M = len(self.N)

        self.sampled_idx = np.asarray(s1.area_ids, dtype=np.int64) - 1
        self.m = len(self.sampled_idx)
        sub = s1.theta_subset
        self.t_sub = sub.shape[0]
        self.m1 = sub.mean(axis=0)
        self.m2 = (sub * sub).mean(axis=0)
        self.V = np.maximum(s1.var_theta, 1e-12)

        self.stable = np.asarray(s1.stable, dtype=bool)
        self.pos_stable = np.nonzero(self.stable)[0]
        self.pos_unstable = np.nonzero(~self.stable)[0]
        if len(self.pos_unstable) and not len(self.pos_stable):
            raise ValueError("cannot fit variance function: no stable areas")
        self.gamma_stable = s1.gamma_bar[self.pos_stable]

        log_n = np.log(s1.n.astype(float))
        if len(self.pos_unstable):
            lo, hi = log_n[self.pos_stable].min(), log_n[self.pos_stable].max()
            outside = (log_n[self.pos_unstable] < lo) | (log_n[self.pos_unstable] > hi)
            if np.any(outside):
                bad = s1.area_ids[self.pos_unstable[outside]]
                warnings.warn(
                    f"unstable areas {bad.tolist()} have sample sizes outside the "
                    "variance-function training support; imputation extrapolates")
        self.gvf = GvfBlock(
            g_obs=0.5 * np.log(self.gamma_stable),
            L_obs=np.column_stack([np.ones(len(self.pos_stable)), log_n[self.pos_stable]]),
            L_imp=np.column_stack([np.ones(len(self.pos_unstable)), log_n[self.pos_unstable]])
            if len(self.pos_unstable) else np.zeros((0, 2)),
            style="half_log",
            corrected=spec.gvf_corrected,
        )

        effect = (Bym2Effect(spec.adjacency, spec.sigma_scale, spec.rho_prior, spec.rho_fixed)
                  if spec.spatial else UnstructuredEffect(self.M, spec.sigma_scale))
        self.linking = CovariateLinking(Z, effect, spec.coef_sd)

        if spec.benchmark is not None:
            self.bench = []
            for region, entry in spec.benchmark.items():
                idx = np.asarray(entry["areas"], dtype=np.int64) - 1
                sd = spec.epsilon * np.sqrt(float(entry["var"]))
                if sd <= 0:
                    raise ValueError(f"benchmark region {region!r} needs positive variance")
                self.bench.append((region, idx, float(entry["C_hat"]), sd))
        else:
            self.bench = None

        layout = Layout()
        self.sl_tb = layout.add("s1_logodds", self.m,
                                labels=[f"s1_logodds[{int(a)}]" for a in s1.area_ids])
        self.linking.register(layout)
        self.gvf.register(layout)
        layout.finalize()
        self.layout = layout

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.dim)
        tb = z[self.sl_tb]
        eta = self.linking.eta(z)
        d_eta = np.zeros(self.M)

        # measurement model, downscaled to a per-draw average
        val = float(np.sum(-(self.m2 - 2.0 * tb * self.m1 + tb * tb) / (2.0 * self.V)
                           - 0.5 * (np.log(self.V) + LOG2PI)))
        grad[self.sl_tb] += (self.m1 - tb) / self.V

        # sampling model with per-area variances (imputed where unstable)
        gamma = np.empty(self.m)
        gamma[self.pos_stable] = self.gamma_stable
        if len(self.pos_unstable):
            imputed = self.gvf.impute(z)
            if not np.all(np.isfinite(imputed)) or np.any(imputed <= 0):
                return -np.inf, grad
            gamma[self.pos_unstable] = imputed
        resid = tb - eta[self.sampled_idx]
        val += float(np.sum(-0.5 * (resid * resid / gamma + np.log(gamma) + LOG2PI)))
        grad[self.sl_tb] += -resid / gamma
        np.add.at(d_eta, self.sampled_idx, resid / gamma)
        if len(self.pos_unstable):
            r_u = resid[self.pos_unstable]
            g_u = gamma[self.pos_unstable]
            d_gamma = 0.5 * (r_u * r_u) / (g_u * g_u) - 0.5 / g_u
            d_omega, d_lsg = self.gvf.impute_grads(z, g_u)
            grad[self.gvf.sl_omega] += d_omega.T @ d_gamma
            grad[self.gvf.sl_lsg] += float(np.dot(d_lsg, d_gamma))

        # soft benchmarking on population-weighted aggregates
        if self.bench is not None:
            mu = expit(eta)
            for _, idx, target, sd in self.bench:
                N_k = self.N[idx].sum()
                c_tilde = float(np.dot(mu[idx], self.N[idx]) / N_k)
                val += float(normal_lpdf(c_tilde, target, sd * sd))
                dc = -(c_tilde - target) / (sd * sd)
                d_eta[idx] += dc * (self.N[idx] / N_k) * mu[idx] * (1.0 - mu[idx])

        val += self.linking.logp_grad(z, d_eta, grad)
        val += self.gvf.logp_grad(z, grad)
        return val, grad

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self.dim)
        z[self.sl_tb] = self.m1 + 0.05 * rng.standard_normal(self.m)
        self.linking.init(z, rng, center=float(np.mean(self.m1)))
        omega0, lsg0 = self.gvf.init_values()
        z[self.gvf.sl_omega] = omega0 + 0.05 * rng.standard_normal(self.gvf.q)
        z[self.gvf.sl_lsg] = lsg0 + 0.05 * rng.standard_normal()
        return z

    def mu_draws(self, matrix: PosteriorMatrix) -> np.ndarray:
        """(chains, draws, M) posterior proportion draws."""
        return expit(self.linking.eta_draws(matrix.values))


def fit_stage2(
    s1: S1Summaries,
    Z: np.ndarray,
    N: np.ndarray,
    spec: Stage2Spec | None = None,
    engine: EngineConfig | None = None,
    rhat_threshold: float = 1.02,
) -> AreaFit:
    spec = spec or Stage2Spec()
    engine = engine or EngineConfig()
    model = Stage2Model(s1, Z, N, spec)
    matrix = sample(model, engine)
    mu = model.mu_draws(matrix)
    max_rhat, ok = convergence_gate(matrix, mu, rhat_threshold)
    sampled = np.zeros(model.M, dtype=bool)
    sampled[model.sampled_idx] = True
    stable = np.zeros(model.M, dtype=bool)
    stable[model.sampled_idx[model.stable]] = True
    return AreaFit(
        model_tag="TSLN",
        mu_chains=mu,
        sampled=sampled,
        stable=stable,
        max_rhat=max_rhat,
        converged=ok,
        matrix=matrix,
        extras={"divergences": matrix.divergences},
    )


@dataclass
class TslnResult:
    fit: AreaFit
    stage1: Stage1Fit
    s1: S1Summaries
    converged: bool


def fit_tsln(
    sample_data: SurveySample,
    Z: np.ndarray,
    N: np.ndarray,
    stage1_spec: Stage1Spec | None = None,
    stage2_spec: Stage2Spec | None = None,
    engine1: EngineConfig | None = None,
    engine2: EngineConfig | None = None,
    subset_fraction: float = 0.5,
    s1_seed: int = 0,
) -> TslnResult:
    """End-to-end two-stage pipeline: individual model, smoothed estimates,
    area model.  The overall convergence flag requires both stages to pass
    the R-hat gate."""
    s1_fit = fit_stage1(sample_data, Z, stage1_spec, engine1)
    direct = direct_estimates(sample_data)
    s1 = build_s1_estimates(s1_fit.p_chains, sample_data, direct,
                            subset_fraction=subset_fraction, seed=s1_seed)
    fit = fit_stage2(s1, Z, N, stage2_spec, engine2)
    converged = bool(s1_fit.converged and fit.converged)
    fit.converged = converged
    fit.extras["stage1_max_rhat"] = s1_fit.max_rhat
    return TslnResult(fit=fit, stage1=s1_fit, s1=s1, converged=converged)
