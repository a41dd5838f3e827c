"""Common container for area-level model fits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import hdi, rhat_many
from .engine import PosteriorMatrix


@dataclass
class AreaFit:
    """Posterior proportion estimates for all M areas from one model fit.

    ``mu_chains`` keeps the chain structure (chains, draws, M) so convergence
    of the parameters of interest can be assessed; ``converged`` reflects the
    R-hat gate over both raw parameters and the per-area proportions.
    """

    model_tag: str
    mu_chains: np.ndarray
    sampled: np.ndarray
    stable: np.ndarray
    max_rhat: float
    converged: bool
    median: np.ndarray = field(init=False)
    hdi_lo: np.ndarray = field(init=False)
    hdi_hi: np.ndarray = field(init=False)
    matrix: PosteriorMatrix | None = None
    extras: dict = field(default_factory=dict)
    hdi_mass: float = 0.95

    def __post_init__(self) -> None:
        flat = self.mu_flat()
        self.median = np.median(flat, axis=0)
        self.hdi_lo = np.empty(self.M)
        self.hdi_hi = np.empty(self.M)
        for i in range(self.M):
            self.hdi_lo[i], self.hdi_hi[i] = hdi(flat[:, i], self.hdi_mass)

    @property
    def M(self) -> int:
        return self.mu_chains.shape[2]

    def mu_flat(self) -> np.ndarray:
        """(T, M) draws pooled over chains."""
        return self.mu_chains.reshape(-1, self.mu_chains.shape[2])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["area_id", "median", "hdi_lo", "hdi_hi", "sampled", "stable"])
            for i in range(self.M):
                writer.writerow([
                    i + 1,
                    repr(float(self.median[i])),
                    repr(float(self.hdi_lo[i])),
                    repr(float(self.hdi_hi[i])),
                    int(self.sampled[i]),
                    int(self.stable[i]),
                ])


def convergence_gate(matrix: PosteriorMatrix, mu_chains: np.ndarray,
                     threshold: float = 1.02) -> tuple[float, bool]:
    """R-hat gate on the parameters of interest: the per-area proportions.

    Raw parameters keep their diagnostics for reporting, but the discard rule
    applies to the monitored proportion draws.
    """
    derived = rhat_many(mu_chains)
    if not np.any(np.isfinite(derived)):
        return float("nan"), False
    max_rhat = float(np.nanmax(derived))
    return max_rhat, bool(max_rhat <= threshold)
