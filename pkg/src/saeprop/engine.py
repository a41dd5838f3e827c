"""Gradient-based MCMC engine.

Models expose a differentiable log density on an unconstrained space; bounded
parameters are handled by transform-with-Jacobian (log for positive scales,
scaled logit for interval parameters), never by rejection.  The sampler is
plain Hamiltonian Monte Carlo with a jittered fixed path length, dual-averaging
step-size adaptation targeting 0.8 acceptance, and windowed estimation of a
diagonal metric during warmup.  Runs are deterministic for a fixed
(model, config, seed): every chain draws from its own counter-based stream.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .diagnostics import ess, rhat_many

IDENTITY, LOG, INTERVAL = 0, 1, 2

_DIVERGENCE_DELTA = 1000.0


class EngineError(RuntimeError):
    pass


class Layout:
    """Named parameter blocks with per-coordinate transforms."""

    def __init__(self) -> None:
        self.names: list[str] = []
        self._kinds: list[int] = []
        self._lo: list[float] = []
        self._hi: list[float] = []
        self._slices: dict[str, slice] = {}

    def add(self, block: str, size: int = 1, kind: int = IDENTITY,
            lo: float = 0.0, hi: float = 1.0, labels: list[str] | None = None) -> slice:
        start = len(self.names)
        if labels is not None:
            if len(labels) != size:
                raise ValueError("labels length mismatch")
            self.names.extend(labels)
        elif size == 1:
            self.names.append(block)
        else:
            self.names.extend(f"{block}[{i}]" for i in range(size))
        self._kinds.extend([kind] * size)
        self._lo.extend([lo] * size)
        self._hi.extend([hi] * size)
        sl = slice(start, start + size)
        self._slices[block] = sl
        return sl

    def finalize(self) -> None:
        self.kinds = np.asarray(self._kinds, dtype=np.int8)
        self.lo = np.asarray(self._lo)
        self.hi = np.asarray(self._hi)

    @property
    def dim(self) -> int:
        return len(self.names)

    def sl(self, block: str) -> slice:
        return self._slices[block]

    def constrain(self, z: np.ndarray) -> np.ndarray:
        """Map unconstrained values to the constrained scale (vectorized over
        leading axes)."""
        x = np.array(z, dtype=float, copy=True)
        is_log = self.kinds == LOG
        is_int = self.kinds == INTERVAL
        if np.any(is_log):
            x[..., is_log] = np.exp(z[..., is_log])
        if np.any(is_int):
            lo, hi = self.lo[is_int], self.hi[is_int]
            x[..., is_int] = lo + (hi - lo) / (1.0 + np.exp(-z[..., is_int]))
        return x


class LogDensityModel:
    """Differentiable unnormalized log posterior.

    Subclasses fill ``layout`` and implement ``logp_grad`` on the
    unconstrained space (Jacobian terms included).
    """

    layout: Layout

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def names(self) -> list[str]:
        return self.layout.names

    def logp_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def constrain(self, z: np.ndarray) -> np.ndarray:
        return self.layout.constrain(z)

    def initial_position(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, self.dim)


def gradient_check(model: LogDensityModel, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between central finite differences and the analytic
    gradient, over all coordinates.  Relative to max(1, |gradient|)."""
    if eps <= 0:
        raise EngineError("eps must be positive")
    z = np.asarray(point, dtype=float)
    lp, grad = model.logp_grad(z)
    if not np.isfinite(lp):
        raise EngineError("log density not finite at check point")
    worst = 0.0
    for k in range(model.dim):
        zp, zm = z.copy(), z.copy()
        zp[k] += eps
        zm[k] -= eps
        fp, _ = model.logp_grad(zp)
        fm, _ = model.logp_grad(zm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EngineError(f"log density not finite near check point (coord {k})")
        fd = (fp - fm) / (2.0 * eps)
        err = abs(fd - grad[k]) / max(1.0, abs(grad[k]))
        worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class EngineConfig:
    chains: int = 4
    warmup: int = 500
    draws: int = 500
    seed: int = 0
    target_accept: float = 0.8
    path_length: float = 2.0
    max_steps: int = 128
    check_gradients: bool = True
    gradient_tol: float = 1e-4


@dataclass
class PosteriorMatrix:
    """Constrained posterior draws with per-parameter diagnostics."""

    names: list[str]
    values: np.ndarray          # (chains, draws, dim)
    rhat: np.ndarray
    ess: np.ndarray
    divergences: int
    step_size: np.ndarray       # per chain
    accept_rate: np.ndarray     # per chain
    flags: list[str] = field(default_factory=list)

    @property
    def chains(self) -> int:
        return self.values.shape[0]

    @property
    def draws_per_chain(self) -> int:
        return self.values.shape[1]

    def flat(self, block: slice | int | None = None) -> np.ndarray:
        """Draws flattened over chains: (chains*draws, dim) or a slice of it."""
        out = self.values.reshape(-1, self.values.shape[2])
        return out if block is None else out[:, block]

    def block(self, sl: slice) -> np.ndarray:
        """(chains, draws, k) view of a layout slice."""
        return self.values[:, :, sl]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain"] + self.names)
            for c in range(self.chains):
                for t in range(self.draws_per_chain):
                    writer.writerow([c] + [repr(float(v)) for v in self.values[c, t]])

    def diagnostics(self) -> dict:
        return {
            "parameters": {
                name: {"rhat": _jsonable(self.rhat[k]), "ess": _jsonable(self.ess[k])}
                for k, name in enumerate(self.names)
            },
            "divergences": int(self.divergences),
            "step_size": [float(s) for s in self.step_size],
            "accept_rate": [float(a) for a in self.accept_rate],
            "flags": list(self.flags),
        }

    def diagnostics_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.diagnostics(), fh, indent=2, sort_keys=True)

    def max_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else float("nan")


def _jsonable(v) -> float | None:
    return float(v) if np.isfinite(v) else None


def _find_reasonable_epsilon(model, z0, lp0, grad0, inv_metric, rng) -> float:
    """Double or halve the step size until the one-step acceptance crosses 1/2."""
    eps = 1.0
    p0 = rng.standard_normal(model.dim) / np.sqrt(inv_metric)
    h0 = -lp0 + 0.5 * np.dot(inv_metric, p0 * p0)

    def one_step(e):
        p = p0 + 0.5 * e * grad0
        z = z0 + e * inv_metric * p
        lp, grad = model.logp_grad(z)
        p = p + 0.5 * e * grad
        if not np.isfinite(lp):
            return -np.inf
        return -(-lp + 0.5 * np.dot(inv_metric, p * p)) + h0

    log_ratio = one_step(eps)
    direction = 1.0 if log_ratio > np.log(0.5) else -1.0
    for _ in range(40):
        eps *= 2.0 ** direction
        log_ratio = one_step(eps)
        if not np.isfinite(log_ratio):
            log_ratio = -np.inf
        if direction * log_ratio <= direction * np.log(0.5):
            break
        if eps > 1e6 or eps < 1e-10:
            break
    return float(np.clip(eps, 1e-8, 1e4))


def _metric_windows(warmup: int) -> list[tuple[int, int]]:
    """(start, end) iteration spans whose draws feed metric updates."""
    if warmup < 60:
        return []
    init_buf = max(10, int(0.15 * warmup))
    term_buf = max(10, int(0.10 * warmup))
    windows = []
    pos = init_buf
    size = max(15, (warmup - init_buf - term_buf) // 8)
    end_limit = warmup - term_buf
    while pos < end_limit:
        end = min(pos + size, end_limit)
        if end_limit - end < size:  # absorb the remainder into the last window
            end = end_limit
        windows.append((pos, end))
        pos = end
        size *= 2
    return windows


def _run_chain(model, cfg: EngineConfig, chain: int):
    # Warmup exploration legitimately visits regions where scale parameters
    # overflow exp(); those proposals score -inf and are rejected.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _run_chain_inner(model, cfg, chain)


def _run_chain_inner(model, cfg: EngineConfig, chain: int):
    rng = rngmod.stream(cfg.seed, 7001, chain)
    dim = model.dim
    z = np.asarray(model.initial_position(rng), dtype=float)
    lp, grad = model.logp_grad(z)
    if not np.isfinite(lp):
        raise EngineError("initial position has non-finite log density")
    inv_metric = np.ones(dim)

    windows = _metric_windows(cfg.warmup)
    window_buf: list[np.ndarray] = []
    eps = _find_reasonable_epsilon(model, z, lp, grad, inv_metric, rng)

    # Dual averaging state
    mu = np.log(10.0 * eps)
    log_eps_bar, h_bar, m_adapt = 0.0, 0.0, 0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    total = cfg.warmup + cfg.draws
    out = np.empty((cfg.draws, dim))
    divergences = 0
    accepted = 0

    for it in range(total):
        warming = it < cfg.warmup
        sqrt_inv = np.sqrt(inv_metric)
        p0 = rng.standard_normal(dim) / sqrt_inv
        h0 = -lp + 0.5 * np.dot(inv_metric, p0 * p0)

        n_base = int(np.clip(round(cfg.path_length / eps), 1, cfg.max_steps))
        lo_steps = max(1, int(np.floor(0.6 * n_base)))
        n_steps = int(rng.integers(lo_steps, n_base + 1))

        z_new, p_new, lp_new, grad_new = z, p0, lp, grad
        diverged = False
        p_new = p0 + 0.5 * eps * grad
        for step in range(n_steps):
            z_new = z_new + eps * inv_metric * p_new
            lp_new, grad_new = model.logp_grad(z_new)
            if not np.isfinite(lp_new):
                diverged = True
                break
            if step < n_steps - 1:
                p_new = p_new + eps * grad_new
        if not diverged:
            p_new = p_new + 0.5 * eps * grad_new
            h1 = -lp_new + 0.5 * np.dot(inv_metric, p_new * p_new)
            delta_h = h0 - h1
            if not np.isfinite(delta_h) or delta_h < -_DIVERGENCE_DELTA:
                diverged = True

        if diverged:
            alpha = 0.0
        else:
            alpha = min(1.0, float(np.exp(min(delta_h, 0.0))))
            if rng.uniform() < alpha:
                z, lp, grad = z_new, lp_new, grad_new
                if not warming:
                    accepted += 1

        if warming:
            m_adapt += 1
            eta = 1.0 / (m_adapt + t0)
            h_bar = (1.0 - eta) * h_bar + eta * (cfg.target_accept - alpha)
            log_eps = mu - np.sqrt(m_adapt) / gamma * h_bar
            w = m_adapt ** (-kappa)
            log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar
            eps = float(np.clip(np.exp(log_eps), 1e-8, 1e4))

            for (ws, we) in windows:
                if ws <= it < we:
                    window_buf.append(z.copy())
                    if it == we - 1:
                        buf = np.asarray(window_buf)
                        nbuf = len(buf)
                        var = buf.var(axis=0, ddof=1) if nbuf > 1 else np.ones(dim)
                        inv_metric = (nbuf / (nbuf + 5.0)) * var + (5.0 / (nbuf + 5.0)) * 1e-3
                        inv_metric = np.maximum(inv_metric, 1e-10)
                        window_buf = []
                        eps = _find_reasonable_epsilon(model, z, lp, grad, inv_metric, rng)
                        mu = np.log(10.0 * eps)
                        log_eps_bar, h_bar, m_adapt = 0.0, 0.0, 0
                    break
            if it == cfg.warmup - 1:
                eps = float(np.clip(np.exp(log_eps_bar), 1e-8, 1e4)) if m_adapt > 0 else eps
        else:
            if diverged:
                divergences += 1
            out[it - cfg.warmup] = z

    if cfg.draws > 0 and accepted == 0:
        raise EngineError(f"chain {chain}: every post-warmup proposal was rejected")
    return out, eps, accepted / max(1, cfg.draws), divergences


def sample(model: LogDensityModel, config: EngineConfig | None = None, **overrides) -> PosteriorMatrix:
    """Run multi-chain HMC and assemble diagnostics.

    Raises EngineError if the gradient gate fails (analytic vs finite
    differences at 10 random points) or a chain rejects every proposal.
    Divergent transitions beyond 1% of post-warmup iterations are flagged,
    not fatal.
    """
    cfg = config or EngineConfig()
    if overrides:
        cfg = EngineConfig(**{**cfg.__dict__, **overrides})

    if cfg.check_gradients:
        grng = rngmod.stream(cfg.seed, 7919)
        worst = 0.0
        for _ in range(10):
            pt = model.initial_position(grng)
            worst = max(worst, gradient_check(model, pt))
        if worst >= cfg.gradient_tol:
            raise EngineError(f"gradient check failed: max relative error {worst:.3e}")

    chains_out, eps_list, acc_list, div_total = [], [], [], 0
    for c in range(cfg.chains):
        draws_c, eps_c, acc_c, div_c = _run_chain(model, cfg, c)
        chains_out.append(draws_c)
        eps_list.append(eps_c)
        acc_list.append(acc_c)
        div_total += div_c

    unconstrained = np.stack(chains_out)          # (chains, draws, dim)
    values = model.constrain(unconstrained)

    flags: list[str] = []
    total_post = cfg.chains * cfg.draws
    if total_post > 0 and div_total / total_post > 0.01:
        flags.append("divergent_fraction_exceeded")

    rhat = rhat_many(values)
    ess_vals = np.full(model.dim, np.nan)
    for k in range(model.dim):
        col = values[:, :, k]
        if np.ptp(col) > 0:
            try:
                ess_vals[k] = ess(col)
            except Exception:
                pass

    return PosteriorMatrix(
        names=list(model.names),
        values=values,
        rhat=rhat,
        ess=ess_vals,
        divergences=div_total,
        step_size=np.asarray(eps_list),
        accept_rate=np.asarray(acc_list),
        flags=flags,
    )
