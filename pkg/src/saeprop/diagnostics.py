"""Posterior diagnostics: split R-hat, effective sample size, HDI."""
from __future__ import annotations

import numpy as np


class DiagnosticError(ValueError):
    pass


def split_chains(values: np.ndarray) -> np.ndarray:
    """Halve every chain, doubling the chain count. values: (chains, draws)."""
    c, t = values.shape
    half = t // 2
    return np.concatenate([values[:, :half], values[:, half: 2 * half]], axis=0)


def split_rhat(values: np.ndarray) -> float:
    """Split-R̂: between/within variance ratio sqrt(V̂ / W) on halved chains.

    ``values`` has shape (chains, draws) with at least 2 chains and 4 draws
    per chain.  Returns a value >= 1 - 1e-6 for non-degenerate chains.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise DiagnosticError("expected (chains, draws)")
    c, t = values.shape
    if c < 2 or t < 4:
        raise DiagnosticError("need at least 2 chains of 4 draws")
    s = split_chains(values)
    n = s.shape[1]
    chain_means = s.mean(axis=1)
    within = s.var(axis=1, ddof=1).mean()
    if within == 0.0:
        raise DiagnosticError("degenerate chains")
    between = n * chain_means.var(ddof=1)
    vhat = (n - 1) / n * within + between / n
    return float(np.sqrt(vhat / within))


def rhat_many(values: np.ndarray) -> np.ndarray:
    """Vectorized split-R̂ over the trailing parameter axis.

    ``values``: (chains, draws, dim).  Parameters with zero within-chain
    variance yield NaN rather than raising, so constant derived quantities do
    not poison a whole fit.
    """
    c, t, d = values.shape
    half = t // 2
    s = np.concatenate([values[:, :half, :], values[:, half: 2 * half, :]], axis=0)
    n = s.shape[1]
    chain_means = s.mean(axis=1)
    within = s.var(axis=1, ddof=1).mean(axis=0)
    between = n * chain_means.var(axis=0, ddof=1)
    out = np.full(d, np.nan)
    ok = within > 0
    vhat = (n - 1) / n * within[ok] + between[ok] / n
    out[ok] = np.sqrt(vhat / within[ok])
    return out


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of one chain via FFT."""
    n = len(x)
    xc = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def ess(values: np.ndarray) -> float:
    """Effective sample size with Geyer initial-monotone truncation.

    ``values``: (chains, draws).  Combines within-chain autocovariances with
    the pooled variance, matching the usual multi-chain estimator.
    """
    values = np.asarray(values, dtype=float)
    c, t = values.shape
    if t < 4:
        raise DiagnosticError("need at least 4 draws")
    acov = np.stack([_autocovariance(values[i]) for i in range(c)])
    chain_means = values.mean(axis=1)
    mean_var = acov[:, 0].mean() * t / (t - 1.0)
    var_plus = mean_var * (t - 1.0) / t
    if c > 1:
        var_plus += chain_means.var(ddof=1)
    if var_plus == 0.0:
        raise DiagnosticError("degenerate chains")

    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    # Geyer: sum consecutive pairs while positive, enforce monotone decrease.
    max_pairs = (t - 1) // 2
    pair_sums = []
    for k in range(max_pairs):
        s = rho[2 * k] + rho[2 * k + 1]
        if s <= 0:
            break
        pair_sums.append(s)
    mono = []
    for s in pair_sums:
        if mono and s > mono[-1]:
            s = mono[-1]
        mono.append(s)
    tau = -1.0 + 2.0 * sum(mono) if mono else 1.0
    tau = max(tau, 1.0 / np.log10(t + 10))
    return float(c * t / tau)


def hdi(draws: np.ndarray, mass: float = 0.95) -> tuple[float, float]:
    """Shortest contiguous interval containing ``ceil(mass * T)`` sorted draws.

    Ties are broken toward the lowest lower bound.
    """
    if not 0.0 < mass < 1.0:
        raise DiagnosticError("mass must lie in (0, 1)")
    draws = np.sort(np.asarray(draws, dtype=float).ravel())
    t = len(draws)
    if t < 20:
        raise DiagnosticError("need at least 20 draws for an HDI")
    k = int(np.ceil(mass * t))
    widths = draws[k - 1:] - draws[: t - k + 1]
    i = int(np.argmin(widths))
    return float(draws[i]), float(draws[i + k - 1])


def hdi_many(draws: np.ndarray, mass: float = 0.95) -> np.ndarray:
    """HDIs for a (T, d) matrix of draws; returns (d, 2)."""
    draws = np.asarray(draws, dtype=float)
    out = np.empty((draws.shape[1], 2))
    for j in range(draws.shape[1]):
        out[j] = hdi(draws[:, j], mass)
    return out
