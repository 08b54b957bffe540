"""Portfolio and risk-factor value types plus closed-form count moments.

Deaths per cell are Poisson mixed over gamma risk factors with unit mean,
so unconditional counts are negative binomial and counts sharing a factor
are positively correlated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

DEGENERATE_VARIANCE = 1e-12

__all__ = [
    "DEGENERATE_VARIANCE",
    "RiskFactorSpec",
    "EcrpPortfolio",
    "death_count_moments",
    "cross_covariance",
    "unconditional_pmf_negbin",
]


@dataclass(frozen=True)
class RiskFactorSpec:
    """Variances of the gamma risk factors for causes 1..K.

    Each factor has mean one and variance ``variances[k-1]``, i.e. shape and
    inverse scale ``1 / variances[k-1]``.  A variance at or below
    ``DEGENERATE_VARIANCE`` means the factor is constant at 1.
    """

    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variances", np.atleast_1d(np.asarray(self.variances, dtype=float)))
        if np.any(self.variances < 0.0):
            raise ValueError("risk-factor variances must be non-negative")

    @property
    def K(self) -> int:
        return self.variances.size

    def is_degenerate(self, k: int) -> bool:
        """True when factor k (1-based) is constant at 1."""
        return self.variances[k - 1] <= DEGENERATE_VARIANCE


@dataclass(frozen=True)
class EcrpPortfolio:
    """Policyholders with death intensities, factor weights and severities.

    Attributes
    ----------
    m : ndarray, shape (E,)
        Central death rates (Poisson intensities) per policyholder.
    weights : ndarray, shape (E, K+1)
        Per-policyholder simplex over causes, column 0 idiosyncratic.
    severities : list of ndarray
        One pmf per policyholder over integer multiples of the loss unit;
        entry j is the probability of a loss of j units upon death.
    """

    m: np.ndarray
    weights: np.ndarray
    severities: list

    def __post_init__(self):
        object.__setattr__(self, "m", np.atleast_1d(np.asarray(self.m, dtype=float)))
        object.__setattr__(self, "weights", np.atleast_2d(np.asarray(self.weights, dtype=float)))
        if np.any(self.m < 0.0):
            raise ValueError("death intensities must be non-negative")
        if self.weights.shape[0] != self.m.size:
            raise ValueError("one weight row per policyholder required")
        if np.any(self.weights < 0.0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("weight rows must be simplex vectors")
        if len(self.severities) != self.m.size:
            raise ValueError("one severity pmf per policyholder required")
        for q in self.severities:
            q = np.asarray(q, dtype=float)
            if np.any(q < 0.0) or abs(q.sum() - 1.0) > 1e-9:
                raise ValueError("severity pmfs must be non-negative and sum to 1")

    @property
    def size(self) -> int:
        return self.m.size

    @property
    def n_causes(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def homogeneous(cls, n: int, m: float, weights, severity=(0.0, 1.0)) -> "EcrpPortfolio":
        """Portfolio of ``n`` identical policyholders."""
        weights = np.asarray(weights, dtype=float)
        sev = np.asarray(severity, dtype=float)
        return cls(
            m=np.full(n, m),
            weights=np.tile(weights, (n, 1)),
            severities=[sev] * n,
        )

    def mean_loss(self) -> float:
        """Expected aggregate loss in units: sum of m_i E[Y_i]."""
        return float(
            sum(m * np.dot(np.arange(len(q)), q) for m, q in zip(self.m, self.severities))
        )


def death_count_moments(exposure, m, w, sigma2) -> tuple[float, float]:
    """Mean and variance of a cell's death count.

    The mean is ``rho = exposure * m * w``.  With a degenerate factor the
    count is Poisson (variance = mean); otherwise the gamma mixture gives
    variance ``rho (1 + rho sigma2)``.
    """
    rho = exposure * m * w
    if sigma2 <= DEGENERATE_VARIANCE:
        return rho, rho
    return rho, rho * (1.0 + rho * sigma2)


def cross_covariance(cell_a, cell_b, sigma2) -> float:
    """Covariance of death counts of two distinct cells sharing a factor.

    Each cell is an ``(exposure, m, w)`` triple for the common cause; the
    result is ``E E' m m' w w' sigma2``.
    """
    (e1, m1, w1), (e2, m2, w2) = cell_a, cell_b
    return e1 * e2 * m1 * m2 * w1 * w2 * sigma2


def unconditional_pmf_negbin(rho: float, sigma2: float, n_max: int) -> np.ndarray:
    """Negative binomial pmf of a gamma-mixed Poisson count on 0..n_max.

    Parameters are shape ``r = 1/sigma2`` and success probability
    ``p = r / (r + rho)``, giving mean ``rho`` and variance
    ``rho (1 + rho sigma2)``.  Degenerate variances must branch to a Poisson
    pmf at the caller.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    if sigma2 <= DEGENERATE_VARIANCE:
        raise ValueError("degenerate variance: use a Poisson pmf instead")
    r = 1.0 / sigma2
    p = r / (r + rho)
    return stats.nbinom.pmf(np.arange(n_max + 1), r, p)
