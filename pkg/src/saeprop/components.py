"""Shared building blocks for the area-level models.

``LinkingBlock`` is the single implementation of the covariate linking model
``eta_i = intercept + Z_i @ coef + effect_i`` used by the second-stage model
and by every area-level baseline.  ``GvfBlock`` carries the jointly fitted
generalized variance function: a Gaussian regression of transformed sampling
variances on a covariate, plus back-transformed imputation for areas whose
observed variance is invalid.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

LOG2PI = float(np.log(2.0 * np.pi))


def normal_lpdf(x, mean, var):
    """Elementwise Gaussian log density (full constants kept so density
    values can be checked term by term)."""
    return -0.5 * ((x - mean) ** 2 / var + np.log(var) + LOG2PI)


_T3_NORM = float(np.log(2.0) - np.log(np.pi) - 0.5 * np.log(3.0))


def student_t3_lpdf_grad(x: float) -> tuple[float, float]:
    """Student-t(df=3, 0, 1) log density and derivative."""
    val = _T3_NORM - 2.0 * np.log1p(x * x / 3.0)
    grad = -4.0 * x / (3.0 + x * x)
    return val, grad


def half_normal_lpdf_grad_logscale(sigma: float, scale: float) -> tuple[float, float]:
    """Half-normal prior on sigma = exp(z), including the log Jacobian.

    Returns (value, d/dz).  value = log 2 - log(scale) - 0.5 log(2 pi)
    - sigma^2/(2 scale^2) + z.
    """
    const = float(np.log(2.0) - np.log(scale) - 0.5 * LOG2PI)
    val = const - sigma * sigma / (2.0 * scale * scale) + np.log(sigma)
    grad = -sigma * sigma / (scale * scale) + 1.0
    return val, grad


def half_cauchy_lpdf_grad_logscale(sigma: float, scale: float) -> tuple[float, float]:
    """Half-Cauchy prior on sigma = exp(z), including the log Jacobian."""
    r2 = (sigma / scale) ** 2
    val = float(np.log(2.0 / (np.pi * scale)) - np.log1p(r2) + np.log(sigma))
    grad = -2.0 * r2 / (1.0 + r2) + 1.0
    return val, grad


def beta_lpdf_grad_logit(rho: float, a: float, b: float) -> tuple[float, float]:
    """Beta(a, b) prior on rho = expit(z), including the log Jacobian.

    Returns (value, d/dz) with the normalizing constant dropped.
    """
    val = (a - 1.0) * np.log(rho) + (b - 1.0) * np.log1p(-rho) + np.log(rho) + np.log1p(-rho)
    grad = (a - 1.0) * (1.0 - rho) - (b - 1.0) * rho + (1.0 - 2.0 * rho)
    return float(val), float(grad)


class LinkingBlock:
    """Linear predictor over all M areas with an unstructured random effect.

    Parameters are (intercept, coef, effect_raw, log sigma); the effect is
    non-centered: effect = sigma * effect_raw.  Priors: student-t(3,0,1)
    intercept, N(0,2) coefficients, half-normal(sigma_scale) scale, standard
    normal raw effects.
    """

    def __init__(self, Z: np.ndarray, sigma_scale: float = 2.0, coef_sd: float = 2.0):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.ndim != 2:
            raise ValueError("Z must be 2-D (M x q)")
        self.M = Z.shape[0]
        self.Zc = Z - Z.mean(axis=0, keepdims=True)
        if self.Zc.shape[1] and np.linalg.matrix_rank(self.Zc) < self.Zc.shape[1]:
            raise ValueError("area design matrix is rank deficient")
        self.q = Z.shape[1]
        self.sigma_scale = sigma_scale
        self.coef_sd = coef_sd

    def register(self, layout, prefix: str = "") -> None:
        from .engine import IDENTITY, LOG
        self.sl_alpha = layout.add(prefix + "intercept", 1)
        self.sl_coef = layout.add(prefix + "coef", self.q)
        self.sl_raw = layout.add(prefix + "area_raw", self.M)
        self.sl_lsig = layout.add(prefix + "sigma_area", 1, kind=LOG)

    def eta(self, z: np.ndarray) -> np.ndarray:
        alpha = z[self.sl_alpha][0]
        coef = z[self.sl_coef]
        raw = z[self.sl_raw]
        sigma = np.exp(z[self.sl_lsig][0])
        return alpha + self.Zc @ coef + sigma * raw

    def logp_grad(self, z: np.ndarray, d_eta: np.ndarray, grad: np.ndarray) -> float:
        """Accumulate priors and chain d_eta = dlogp/d eta into grad.

        Returns the prior contribution to the log density.
        """
        alpha = z[self.sl_alpha][0]
        coef = z[self.sl_coef]
        raw = z[self.sl_raw]
        lsig = z[self.sl_lsig][0]
        sigma = np.exp(lsig)

        val = 0.0
        v, g = student_t3_lpdf_grad(alpha)
        val += v
        grad[self.sl_alpha] += g + d_eta.sum()

        val += float(-0.5 * np.dot(coef, coef) / self.coef_sd**2
                     - self.q * (np.log(self.coef_sd) + 0.5 * LOG2PI))
        grad[self.sl_coef] += -coef / self.coef_sd**2 + self.Zc.T @ d_eta

        val += float(-0.5 * np.dot(raw, raw) - 0.5 * self.M * LOG2PI)
        grad[self.sl_raw] += -raw + sigma * d_eta

        v, g = half_normal_lpdf_grad_logscale(sigma, self.sigma_scale)
        val += v
        grad[self.sl_lsig] += g + sigma * float(np.dot(raw, d_eta))
        return val

    def eta_draws(self, values: np.ndarray) -> np.ndarray:
        """Linear predictor per draw from constrained draws (..., dim)."""
        alpha = values[..., self.sl_alpha][..., 0]
        coef = values[..., self.sl_coef]
        raw = values[..., self.sl_raw]
        sigma = values[..., self.sl_lsig][..., 0]
        return alpha[..., None] + coef @ self.Zc.T + sigma[..., None] * raw


class GvfBlock:
    """Joint generalized variance function on a transformed scale.

    The observed transformed variances ``g_obs = f(variance)`` over areas
    with valid variances follow N(L @ omega, sigma_gvf^2); invalid areas get
    an imputed variance from the back-transform.  Two link styles:

    * ``half_log`` (f(x) = log sqrt(x)): imputation exp(2 L w + 2 sigma^2)
      when ``corrected`` (lognormal-mean correction on the implied log scale)
      or exp(2 L w) otherwise;
    * ``quarter_logit`` (f(x) = log(x / (0.25 + x))): plain inverse
      0.25 e^u / (1 - e^u), requiring u < 0.
    """

    def __init__(self, g_obs: np.ndarray, L_obs: np.ndarray, L_imp: np.ndarray,
                 style: str = "half_log", corrected: bool = True,
                 coef_sd: float = 2.0, scale_prior: float = 2.0):
        self.g_obs = np.asarray(g_obs, dtype=float)
        self.L_obs = np.atleast_2d(np.asarray(L_obs, dtype=float))
        self.L_imp = np.atleast_2d(np.asarray(L_imp, dtype=float)) if len(L_imp) else np.zeros((0, 2))
        self.style = style
        self.corrected = corrected
        self.coef_sd = coef_sd
        self.scale_prior = scale_prior
        self.q = self.L_obs.shape[1] if self.L_obs.size else 2

    def register(self, layout, prefix: str = "") -> None:
        from .engine import LOG
        self.sl_omega = layout.add(prefix + "gvf_coef", self.q)
        self.sl_lsg = layout.add(prefix + "gvf_scale", 1, kind=LOG)

    def init_values(self) -> tuple[np.ndarray, float]:
        omega = np.zeros(self.q)
        if len(self.g_obs):
            omega[0] = float(np.mean(self.g_obs))
        else:
            omega[0] = -2.0
        return omega, float(np.log(0.3))

    def logp_grad(self, z: np.ndarray, grad: np.ndarray) -> float:
        omega = z[self.sl_omega]
        lsg = z[self.sl_lsg][0]
        sig = np.exp(lsg)
        val = float(-0.5 * np.dot(omega, omega) / self.coef_sd**2
                    - self.q * (np.log(self.coef_sd) + 0.5 * LOG2PI))
        grad[self.sl_omega] += -omega / self.coef_sd**2
        v, g = half_cauchy_lpdf_grad_logscale(sig, self.scale_prior)
        val += v
        grad[self.sl_lsg] += g
        if len(self.g_obs):
            resid = self.g_obs - self.L_obs @ omega
            var = sig * sig
            val += float(np.sum(-0.5 * (resid**2 / var + np.log(var) + LOG2PI)))
            grad[self.sl_omega] += self.L_obs.T @ (resid / var)
            grad[self.sl_lsg] += float(np.sum(resid**2 / var - 1.0))
        return val

    def impute(self, z: np.ndarray) -> np.ndarray:
        """Imputed variances for the invalid areas at the current parameters."""
        if not len(self.L_imp):
            return np.zeros(0)
        omega = z[self.sl_omega]
        sig = np.exp(z[self.sl_lsg][0])
        u = self.L_imp @ omega
        if self.style == "half_log":
            return np.exp(2.0 * u + (2.0 * sig * sig if self.corrected else 0.0))
        if self.style == "quarter_logit":
            if np.any(u >= 0.0):
                return np.full(len(u), np.nan)
            eu = np.exp(u)
            return 0.25 * eu / (1.0 - eu)
        raise ValueError(f"unknown gvf style {self.style!r}")

    def impute_grads(self, z: np.ndarray, imputed: np.ndarray):
        """d imputed_k / d omega (rows) and d imputed_k / d log sigma."""
        sig = np.exp(z[self.sl_lsg][0])
        if self.style == "half_log":
            d_omega = 2.0 * imputed[:, None] * self.L_imp
            d_lsg = (4.0 * sig * sig * imputed) if self.corrected else np.zeros_like(imputed)
            return d_omega, d_lsg
        if self.style == "quarter_logit":
            u = self.L_imp @ z[self.sl_omega]
            # d/du [0.25 e^u / (1 - e^u)] = imputed / (1 - e^u)
            d_u = imputed / (1.0 - np.exp(u))
            return d_u[:, None] * self.L_imp, np.zeros_like(imputed)
        raise ValueError(f"unknown gvf style {self.style!r}")
