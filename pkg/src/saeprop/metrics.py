"""Evaluation metrics for repeated-sampling experiments.

Bayesian metrics use the full posterior draws and are computed per (area,
replicate); frequentist bias/variance/MSE operate on posterior medians across
replicates.  Monte-Carlo moments over draws use the 1/T population
convention; the across-replicate variance uses 1/(D-1).
"""
from __future__ import annotations

import numpy as np

from .stage1 import S1Summaries, alc
from .survey import DirectEstimates


class MetricError(ValueError):
    pass


def arb(draws: np.ndarray, truth: float) -> float:
    """Absolute relative bias of posterior draws: |mean(draws - truth)| / truth."""
    if truth <= 0:
        raise MetricError("relative metric undefined for nonpositive truth")
    draws = np.asarray(draws, dtype=float)
    return float(abs(draws.mean() - truth) / truth)


def rrmse(draws: np.ndarray, truth: float) -> float:
    """Relative root mean squared error: sqrt(mean((draws - truth)^2)) / truth."""
    if truth <= 0:
        raise MetricError("relative metric undefined for nonpositive truth")
    draws = np.asarray(draws, dtype=float)
    return float(np.sqrt(np.mean((draws - truth) ** 2)) / truth)


def coverage(lo: np.ndarray, hi: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of intervals containing the truth (closed endpoints)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if lo.shape != hi.shape or lo.shape != truth.shape:
        raise MetricError("interval and truth shapes disagree")
    if lo.size == 0:
        raise MetricError("no intervals")
    return float(np.mean((lo <= truth) & (truth <= hi)))


def freq_mse(
    medians: np.ndarray,
    truth: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[float, float, float]:
    """Frequentist (bias, variance, MSE) of replicate posterior medians.

    ``medians`` is (replicates, areas).  Bias averages the per-area
    replicate-mean error; variance averages the per-area across-replicate
    variance (1/(D-1)); MSE = bias^2 + variance.  An optional boolean mask of
    the same shape restricts which (replicate, area) cells count; areas need
    at least two qualifying replicates.
    """
    med = np.asarray(medians, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if med.ndim != 2 or med.shape[1] != len(truth):
        raise MetricError("medians must be (replicates, areas)")
    if mask is None:
        mask = np.ones(med.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    use = counts >= 2
    if not np.any(use):
        raise MetricError("no area has two or more qualifying replicates")
    biases, variances = [], []
    for i in np.nonzero(use)[0]:
        vals = med[mask[:, i], i]
        biases.append(vals.mean() - truth[i])
        variances.append(vals.var(ddof=1))
    bias = float(np.mean(biases))
    variance = float(np.mean(variances))
    return bias, variance, bias * bias + variance


def table4_summaries(
    direct: DirectEstimates,
    s1: S1Summaries,
    truth: np.ndarray,
) -> tuple[float, float, float, float]:
    """Per-replicate stage-1 summary statistics.

    Returns (percent unstable sampled areas, ALC, median percent increase of
    the smoothed logit-scale variance over the direct one, percent reduction
    in mean absolute bias of smoothed vs direct estimates).
    """
    truth = np.asarray(truth, dtype=float)
    pct_unstable = 100.0 * float(np.mean(~direct.stable))

    alc_value = alc(s1.theta_median(), s1.theta_direct, s1.psi_direct)

    ok = s1.stable & np.isfinite(s1.gamma_direct) & (s1.gamma_direct > 0)
    if not np.any(ok):
        raise MetricError("no stable areas with valid logit-scale variance")
    ratio = 100.0 * ((s1.gamma_bar[ok] + s1.var_theta[ok]) / s1.gamma_direct[ok] - 1.0)
    pct_var_increase = float(np.median(ratio))

    truth_s1 = truth[s1.area_ids - 1]
    mab_direct = float(np.mean(np.abs(s1.mu_direct - truth_s1)))
    mab_s1 = float(np.mean(np.abs(s1.mu_median() - truth_s1)))
    if mab_direct == 0.0:
        raise MetricError("direct estimates match the truth exactly; ratio undefined")
    pct_mab_reduction = 100.0 * (1.0 - mab_s1 / mab_direct)
    return pct_unstable, alc_value, pct_var_increase, pct_mab_reduction


def overlap_probability(
    model_interval: tuple[float, float],
    direct_interval: tuple[float, float],
) -> float:
    """Share of the model interval contained in the direct interval."""
    mlo, mhi = model_interval
    dlo, dhi = direct_interval
    if mhi < mlo or dhi < dlo:
        raise MetricError("intervals must be ordered")
    inter = min(mhi, dhi) - max(mlo, dlo)
    width = mhi - mlo
    if width == 0.0:
        return 1.0 if dlo <= mlo <= dhi else 0.0
    return float(np.clip(inter / width, 0.0, 1.0))


def overlap_summary(
    model_intervals: np.ndarray,
    direct_intervals: np.ndarray,
    direct_sd: np.ndarray,
) -> float:
    """Weighted mean overlap, weights = inverse direct standard deviations."""
    model_intervals = np.asarray(model_intervals, dtype=float)
    direct_intervals = np.asarray(direct_intervals, dtype=float)
    w = 1.0 / np.asarray(direct_sd, dtype=float)
    probs = np.array([
        overlap_probability(tuple(mi), tuple(di))
        for mi, di in zip(model_intervals, direct_intervals)
    ])
    return float(np.dot(w, probs) / w.sum())


def odds_ratio_ep(mu_draws: np.ndarray, mu_overall: float) -> tuple[np.ndarray, float]:
    """Odds ratios against the overall prevalence and the exceedance
    probability P(OR > 1), strict inequality."""
    if not 0.0 < mu_overall < 1.0:
        raise MetricError("overall prevalence must lie in (0, 1)")
    mu = np.asarray(mu_draws, dtype=float)
    base = mu_overall / (1.0 - mu_overall)
    orr = (mu / (1.0 - mu)) / base
    ep = float(np.mean(orr > 1.0))
    return orr, ep


EP_SIGNIFICANT_HI = 0.8
EP_SIGNIFICANT_LO = 0.2


def ep_flag(ep: float) -> str:
    """Reporting flag for an exceedance probability."""
    if ep > EP_SIGNIFICANT_HI:
        return "high"
    if ep < EP_SIGNIFICANT_LO:
        return "low"
    return "none"
