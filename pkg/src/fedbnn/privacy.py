"""zCDP accounting and the Gaussian mechanism for released output matrices.

All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import SeededRng

SIMPLEX_SENSITIVITY_SQ = 2.0
SIMPLEX_TOL = 1e-6


class UnboundedSensitivity(ValueError):
    pass


@dataclass(frozen=True)
class DpParams:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def log_inv_delta(self) -> float:
        return math.log(1.0 / self.delta)


@dataclass(frozen=True)
class ZcdpBudget:
    rho: float

    def __post_init__(self):
        if not (self.rho >= 0 and math.isfinite(self.rho)):
            raise ValueError(f"rho must be finite and non-negative, got {self.rho}")


@dataclass(frozen=True)
class SensitivityBound:
    delta2_squared: float = SIMPLEX_SENSITIVITY_SQ

    def __post_init__(self):
        if not self.delta2_squared > 0:
            raise ValueError("squared sensitivity must be positive")


@dataclass(frozen=True)
class AccountantConfig:
    global_rounds: int
    queries_per_round: int

    def __post_init__(self):
        for name in ("global_rounds", "queries_per_round"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")


@dataclass(frozen=True)
class NoiseScale:
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")


def dp_to_zcdp(dp: DpParams) -> ZcdpBudget:
    """Smallest rho whose zCDP guarantee is sufficient for (eps, delta)-DP."""
    return ZcdpBudget(dp.epsilon**2 / (4.0 * dp.log_inv_delta))


def zcdp_to_dp(budget: ZcdpBudget, delta: float) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rho = budget.rho
    return rho + math.sqrt(4.0 * rho * math.log(1.0 / delta))


def per_round_per_query_budget(dp: DpParams, cfg: AccountantConfig) -> ZcdpBudget:
    ek = cfg.global_rounds * cfg.queries_per_round
    return ZcdpBudget(dp.epsilon**2 / (4.0 * ek * dp.log_inv_delta))


def compose_sequential(budgets: Sequence[ZcdpBudget]) -> ZcdpBudget:
    if len(budgets) == 0:
        raise ValueError("cannot compose an empty list of budgets")
    return ZcdpBudget(math.fsum(b.rho for b in budgets))


def compose_parallel(budgets: Sequence[ZcdpBudget]) -> ZcdpBudget:
    if len(budgets) == 0:
        raise ValueError("cannot compose an empty list of budgets")
    return ZcdpBudget(max(b.rho for b in budgets))


def gaussian_rho(sens: SensitivityBound, noise: NoiseScale) -> ZcdpBudget:
    return ZcdpBudget(sens.delta2_squared / (2.0 * noise.sigma**2))


def sigma_for_budget(sens: SensitivityBound, budget: ZcdpBudget) -> NoiseScale:
    if budget.rho == 0:
        raise ValueError("infinite noise required")
    return NoiseScale(math.sqrt(sens.delta2_squared / (2.0 * budget.rho)))


def check_simplex_rows(rows: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise UnboundedSensitivity("unbounded sensitivity: expected a 2-d matrix of rows")
    if (not np.all(np.isfinite(rows)) or np.any(rows < -tol)
            or np.any(np.abs(rows.sum(axis=1) - 1.0) > tol)):
        raise UnboundedSensitivity("unbounded sensitivity: rows are not on the probability simplex")


def privatize_output(output: np.ndarray, noise: NoiseScale, rng: SeededRng) -> np.ndarray:
    """Gaussian mechanism on every coordinate; no renormalization afterwards."""
    check_simplex_rows(output)
    out = np.asarray(output, dtype=np.float64)
    return out + noise.sigma * rng.normal(out.shape)


@dataclass
class SensitivityReport:
    max_dist_sq: float
    pairs_checked: int
    worst_pair: tuple[int, int]

    @property
    def within_bound(self) -> bool:
        return self.max_dist_sq <= SIMPLEX_SENSITIVITY_SQ


def assert_simplex_sensitivity(rows: np.ndarray, max_pairs: int | None = None,
                               rng: SeededRng | None = None) -> SensitivityReport:
    """Largest squared L2 distance between rows (all pairs, or a random sample)."""
    rows = np.asarray(rows, dtype=np.float64)
    check_simplex_rows(rows)
    n = rows.shape[0]
    if n < 2:
        return SensitivityReport(0.0, 0, (0, 0))
    if max_pairs is None or max_pairs >= n * (n - 1) // 2:
        sq = np.sum(rows * rows, axis=1)
        d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T, 0.0)
        iu = np.triu_indices(n, 1)
        flat = d[iu]
        k = int(np.argmax(flat))
        return SensitivityReport(float(flat[k]), flat.size, (int(iu[0][k]), int(iu[1][k])))
    g = (rng or SeededRng(0)).generator
    a = g.integers(0, n, max_pairs)
    b = (a + g.integers(1, n, max_pairs)) % n
    dist = np.sum((rows[a] - rows[b]) ** 2, axis=1)
    k = int(np.argmax(dist))
    return SensitivityReport(float(dist[k]), max_pairs, (int(a[k]), int(b[k])))


def accountant_row(dp: DpParams, cfg: AccountantConfig,
                   sens: SensitivityBound = SensitivityBound()) -> dict:
    """One row of the accountant table: per-query and total rho, sigma, eps'."""
    rho_q = per_round_per_query_budget(dp, cfg)
    total = ZcdpBudget(rho_q.rho * cfg.global_rounds * cfg.queries_per_round)
    return {
        "epsilon": dp.epsilon,
        "delta": dp.delta,
        "E": cfg.global_rounds,
        "K": cfg.queries_per_round,
        "rho_per_query": rho_q.rho,
        "rho_total": total.rho,
        "sigma": sigma_for_budget(sens, rho_q).sigma,
        "epsilon_roundtrip": zcdp_to_dp(total, dp.delta),
    }


def strict_epsilon(noise: NoiseScale, rounds: int, releases_per_round: int, delta: float,
                   sens: SensitivityBound = SensitivityBound()) -> float:
    """eps' actually delivered by ``noise`` when every released row counts as a query."""
    per = gaussian_rho(sens, noise)
    return zcdp_to_dp(ZcdpBudget(per.rho * rounds * releases_per_round), delta)
