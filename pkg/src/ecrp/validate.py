"""Model validation: variance back-tests against simulated bands,
independence and serial-correlation tests on normalized counts, a
Kolmogorov-Smirnov test for the factor law, and information criteria.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .data import TransformedCounts

__all__ = [
    "TestReport",
    "cross_variance_check",
    "independence_test",
    "independence_test_grid",
    "serial_correlation_test",
    "ks_gamma_test",
    "information_criteria",
]


@dataclass(frozen=True)
class TestReport:
    """Outcome of one validation test.

    ``reject`` is True when the statistic exceeds its critical value at the
    stated level; ``meta`` carries test-specific context (cells, bands).
    """

    name: str
    statistic: float
    critical: float
    reject: bool
    level: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        consistent = self.reject == bool(self.statistic > self.critical)
        if not consistent and np.isfinite(self.statistic):
            raise ValueError("decision inconsistent with statistic vs critical value")


def cross_variance_check(
    tc: TransformedCounts,
    sigma2_samples,
    seed: int = 0,
    n_rep: int = 1,
    band: tuple = (0.05, 0.95),
) -> list[TestReport]:
    """Compare observed cause-total variances with model-simulated bands.

    For every parameter sample the stationary model is simulated ``n_rep``
    times (factor draw, then Poisson counts at the frozen intensities) and
    the sample variance of the cause totals over years recorded; the test
    passes when the observed variance lies inside the requested quantile
    band of those replicates.
    """
    sigma2_samples = np.atleast_2d(np.asarray(sigma2_samples, dtype=float))
    K = tc.n_causes - 1
    if sigma2_samples.shape[1] != K:
        raise ValueError(f"sigma2 samples must have {K} columns")
    rng = np.random.default_rng(seed)
    T = tc.n_years
    rho_k = tc.intensity_ref().sum(axis=(0, 1))  # (K+1,)
    observed = tc.cause_totals().var(axis=1, ddof=1)  # (K+1,)

    reports = []
    for k in range(1, K + 1):
        sims = []
        for s2_row in sigma2_samples:
            s2 = s2_row[k - 1]
            for _ in range(n_rep):
                if s2 > 1e-12:
                    lam = rng.gamma(1.0 / s2, size=T) * s2
                else:
                    lam = np.ones(T)
                counts = rng.poisson(rho_k[k] * lam)
                sims.append(counts.var(ddof=1))
        lo, hi = np.quantile(sims, band)
        # signed distance outside the band: <= 0 means the variance is inside
        excess = max(lo - observed[k], observed[k] - hi)
        reports.append(
            TestReport(
                name=f"cross_variance[k={k}]",
                statistic=float(excess),
                critical=0.0,
                reject=bool(excess > 0.0),
                level=band[1] - band[0],
                meta={
                    "observed_variance": float(observed[k]),
                    "band_low": float(lo),
                    "band_high": float(hi),
                    "cause": k,
                },
            )
        )
    return reports


def independence_test(x, y, level: float = 0.05, name: str = "independence") -> TestReport:
    """t-test of zero correlation between two normalized series.

    Rejects when ``|R| / sqrt((1 - R^2) / (T - 2))`` exceeds the two-sided
    critical value of the t distribution with T - 2 degrees of freedom.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    T = x.size
    if y.size != T or T < 3:
        raise ValueError("series must share a length of at least 3")
    sx = x - x.mean()
    sy = y - y.mean()
    denom = np.sqrt((sx**2).sum() * (sy**2).sum())
    if denom == 0.0:
        raise ValueError("zero-variance series")
    r = float(np.clip((sx * sy).sum() / denom, -1.0, 1.0))
    if abs(r) == 1.0:
        stat = np.inf
    else:
        stat = abs(r) / np.sqrt((1.0 - r**2) / (T - 2))
    crit = float(stats.t.ppf(1.0 - level / 2.0, T - 2))
    return TestReport(
        name=name,
        statistic=float(stat),
        critical=crit,
        reject=bool(stat > crit),
        level=level,
        meta={"correlation": r, "T": T},
    )


def independence_test_grid(nstar: np.ndarray, level: float = 0.05) -> list[TestReport]:
    """Pairwise zero-correlation tests across all cells with different causes.

    ``nstar`` has shape (A+1, 2, K+1, T); every unordered pair of cells with
    ``k != k'`` is tested.
    """
    A1, G, K1, T = nstar.shape
    cells = [(a, g, k) for a in range(A1) for g in range(G) for k in range(K1)]
    reports = []
    for i, (a, g, k) in enumerate(cells):
        for a2, g2, k2 in cells[i + 1 :]:
            if k == k2:
                continue
            reports.append(
                independence_test(
                    nstar[a, g, k],
                    nstar[a2, g2, k2],
                    level=level,
                    name=f"independence[({a},{g},{k}),({a2},{g2},{k2})]",
                )
            )
    return reports


def serial_correlation_test(series, p: int, level: float = 0.05, name: str = "breusch_godfrey") -> TestReport:
    """Breusch-Godfrey test for autocorrelation up to lag ``p``.

    Residuals from the mean are regressed (with intercept) on their first
    ``p`` lags; ``(T - p) R^2`` is compared to the chi-squared critical
    value with ``p`` degrees of freedom.
    """
    x = np.asarray(series, dtype=float)
    T = x.size
    if T <= p + 2:
        raise ValueError("series too short for the requested lag order")
    e = x - x.mean()
    if np.allclose(e, 0.0):
        raise ValueError("zero-variance series")
    rows = T - p
    X = np.column_stack([np.ones(rows)] + [e[p - j - 1 : T - j - 1] for j in range(p)])
    y = e[p:]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        raise ValueError("degenerate auxiliary regression")
    r2 = 1.0 - float((resid**2).sum()) / sst
    stat = rows * r2
    crit = float(stats.chi2.ppf(1.0 - level, p))
    return TestReport(
        name=name,
        statistic=float(stat),
        critical=crit,
        reject=bool(stat > crit),
        level=level,
        meta={"lags": p, "T": T, "r_squared": r2},
    )


def ks_gamma_test(lam_series, sigma2: float, level: float = 0.05, name: str = "ks_gamma") -> TestReport:
    """Kolmogorov-Smirnov test of factor realisations against their gamma law.

    The hypothesized law has mean one and variance ``sigma2``; the scaled
    statistic ``sqrt(T) sup|F_T - F|`` is compared with the asymptotic
    Kolmogorov critical value.
    """
    lam = np.sort(np.asarray(lam_series, dtype=float))
    T = lam.size
    if T < 5:
        raise ValueError("need at least five realisations")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive for the gamma null")
    cdf = stats.gamma.cdf(lam, 1.0 / sigma2, scale=sigma2)
    i = np.arange(1, T + 1)
    d = max(float(np.max(i / T - cdf)), float(np.max(cdf - (i - 1) / T)))
    stat = np.sqrt(T) * d
    crit = float(special.kolmogi(level))
    return TestReport(
        name=name,
        statistic=float(stat),
        critical=crit,
        reject=bool(stat > crit),
        level=level,
        meta={"d_statistic": d, "T": T},
    )


def information_criteria(loglik: float, n_params: int, n_obs: int) -> tuple[float, float]:
    """AIC and BIC: ``2k - 2l`` and ``k log(n) - 2l``."""
    if n_obs <= 0:
        raise ValueError("n_obs must be positive")
    aic = 2.0 * n_params - 2.0 * loglik
    bic = n_params * np.log(n_obs) - 2.0 * loglik
    return float(aic), float(bic)
