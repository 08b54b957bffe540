"""Actuarial applications: forecasting with variance inflation, life
expectancy, best estimate liabilities and the one-year change in basic own
funds with its 99.5% quantile.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .aggregate import LossDistribution, aggregate_loss, panjer_compound_poisson, stochastic_round
from .estimate import McmcChain, log_likelihood, map_lambda
from .model import EcrpPortfolio, RiskFactorSpec
from .trendfam import GENDERS, ModelParams, central_death_rate, cause_weights

__all__ = [
    "DiscountCurve",
    "ForecastConfig",
    "DeltaBofResult",
    "inflate_variance",
    "estimate_d",
    "forecast_rates",
    "curtate_life_expectancy",
    "term_life_bel",
    "delta_bof",
    "scenario_factor",
]


@dataclass(frozen=True)
class DiscountCurve:
    """Discount factors ``D(T, T+t)`` per integer horizon ``t >= 0``."""

    factors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "factors", np.asarray(self.factors, dtype=float))
        if self.factors.size == 0 or self.factors[0] != 1.0:
            raise ValueError("discount curve must start at D(T, T) = 1")
        if np.any(self.factors <= 0.0):
            raise ValueError("discount factors must be positive")

    def at(self, t: int) -> float:
        if t < 0 or t >= self.factors.size:
            raise ValueError(f"horizon {t} outside the curve")
        return float(self.factors[t])

    @classmethod
    def flat(cls, rate: float, horizon: int) -> "DiscountCurve":
        t = np.arange(horizon + 1)
        return cls(factors=(1.0 + rate) ** (-t))


@dataclass(frozen=True)
class ForecastConfig:
    """Forecast settings: variance-inflation slope and its base year."""

    base_year: int
    d: float = 0.0
    max_samples: int = 100

    def __post_init__(self):
        if self.d < 0.0:
            raise ValueError("variance-inflation slope d must be non-negative")


def inflate_variance(sigma2, d: float, t, base_year) -> np.ndarray:
    """Forecast variance ``sigma2 (1 + d (t - T))^2`` for ``t >= T``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < base_year):
        raise ValueError("variance inflation applies to years at or after the base year")
    if d < 0.0:
        raise ValueError("d must be non-negative")
    out = np.asarray(sigma2, dtype=float) * (1.0 + d * (t - base_year)) ** 2
    return out if out.ndim else float(out)


def estimate_d(
    ds,
    params: ModelParams,
    base_year: int,
    d_max: float = 2.0,
    tol: float = 1e-6,
) -> float:
    """Variance-inflation slope maximising the exact likelihood.

    All other parameters stay fixed; the factor variances entering the
    likelihood are inflated per year relative to ``base_year``.  Golden
    section search on ``[0, d_max]``.
    """
    if int(ds.years.min()) < base_year:
        raise ValueError("evaluation window must start at or after the base year")
    horizon = ds.years.astype(float) - base_year

    def objective(d: float) -> float:
        s2 = params.sigma2[:, None] * (1.0 + d * horizon[None, :]) ** 2
        return log_likelihood(ds, params, sigma2_t=s2)

    phi = (np.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 0.0, d_max
    x1 = hi - phi * (hi - lo)
    x2 = lo + phi * (hi - lo)
    f1, f2 = objective(x1), objective(x2)
    if abs(objective(lo) - objective(hi)) < 1e-12 and abs(f1 - f2) < 1e-12:
        warnings.warn("flat likelihood in d; returning 0", stacklevel=2)
        return 0.0
    while hi - lo > tol:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + phi * (hi - lo)
            f2 = objective(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - phi * (hi - lo)
            f1 = objective(x1)
    d_hat = 0.5 * (lo + hi)
    return 0.0 if objective(0.0) >= objective(d_hat) else float(d_hat)


def _gender_index(gender) -> int:
    if gender in (0, 1):
        return int(gender)
    return GENDERS.index(gender)


def _cell_portfolio(params: ModelParams, age: int, gender: int, year: int, exposure: int) -> EcrpPortfolio:
    m = float(central_death_rate(params, [year])[age, gender, 0])
    w = cause_weights(params, [year])[age, gender, :, 0]
    return EcrpPortfolio.homogeneous(int(exposure), m, w)


def forecast_rates(
    source,
    age: int,
    gender,
    year: int,
    exposure: int,
    cfg: ForecastConfig,
    n_max: int | None = None,
) -> LossDistribution:
    """Forecast distribution of the central death rate of one cell.

    The cell is run as a homogeneous unit-payment portfolio, so the death
    count pmf divided by the exposure is the rate pmf (grid resolution
    ``1/exposure``).  Factor variances are inflated to the forecast year.
    With an MCMC chain as source the pmf is the equally weighted mixture
    over (thinned) parameter samples, which adds parameter uncertainty.
    """
    g = _gender_index(gender)

    def one(params: ModelParams) -> LossDistribution:
        s2 = inflate_variance(params.sigma2, cfg.d, year, cfg.base_year)
        pf = _cell_portfolio(params, age, g, year, exposure)
        return aggregate_loss(pf, RiskFactorSpec(np.atleast_1d(s2)), unit=1.0, n_max=n_max)

    if isinstance(source, ModelParams):
        dist = one(source)
        return LossDistribution(unit=1.0 / exposure, pmf=dist.pmf, tail_mass=dist.tail_mass)

    chain: McmcChain = source
    take = np.linspace(0, len(chain) - 1, min(cfg.max_samples, len(chain)), dtype=int)
    parts = [one(chain.params_at(int(i))) for i in np.unique(take)]
    size = max(p.pmf.size for p in parts)
    pmf = np.zeros(size)
    tail = 0.0
    for p in parts:
        pmf[: p.pmf.size] += p.pmf
        tail += p.tail_mass
    pmf /= len(parts)
    tail /= len(parts)
    return LossDistribution(unit=1.0 / exposure, pmf=pmf, tail_mass=tail)


def _death_probabilities(params: ModelParams, age: int, gender: int, year: int, n: int, cohort: bool) -> np.ndarray:
    """q(age + j, year + j) for j = 0..n-1, clamped at the oldest age group."""
    if n <= 0:
        return np.zeros(0)
    ages = np.minimum(age + np.arange(n), params.n_ages - 1)
    years = year + np.arange(n) if cohort else np.full(n, year)
    m = central_death_rate(params, np.unique(years))
    year_pos = {int(y): i for i, y in enumerate(np.unique(years))}
    rates = np.array([m[a, gender, year_pos[int(y)]] for a, y in zip(ages, years)])
    return 1.0 - np.exp(-rates)


def curtate_life_expectancy(
    params: ModelParams,
    age: int,
    gender,
    year: int,
    max_age: int,
    cohort: bool = True,
) -> float:
    """Expected number of completed future years of life.

    Sum over k of the k-year survival probabilities built from projected
    one-year death probabilities; with ``cohort`` the rates follow the
    diagonal (each future year uses that year's projection), otherwise the
    rates of ``year`` are frozen.  Survivors beyond ``max_age`` contribute
    no further years (table closure).
    """
    g = _gender_index(gender)
    n = max_age - age
    q = _death_probabilities(params, age, g, year, n, cohort)
    return float(np.cumprod(1.0 - q).sum())


def term_life_bel(
    params: ModelParams,
    age: int,
    gender,
    year: int,
    term: int,
    curve: DiscountCurve,
    cohort: bool = True,
) -> float:
    """Best estimate liability of a term life contract paying 1 at the end
    of the year of death.

    ``D(T,T+1) q(T) + sum_t D(T,T+t+1) tp q(T+t)`` over the contract term.
    """
    if term < 0:
        raise ValueError("term must be non-negative")
    g = _gender_index(gender)
    q = _death_probabilities(params, age, g, year, term + 1, cohort)
    surv = np.concatenate([[1.0], np.cumprod(1.0 - q[:-1])]) if q.size else np.zeros(0)
    return float(sum(curve.at(t + 1) * surv[t] * q[t] for t in range(term + 1)))


@dataclass(frozen=True)
class DeltaBofResult:
    """Distribution of the one-year change in basic own funds.

    ``support`` is sorted; ``probs`` are the matching probabilities of the
    parameter-sample mixture.  ``scr`` is the 99.5% quantile.
    """

    support: np.ndarray
    probs: np.ndarray
    scr: float
    mean: float
    tail_mass: float

    def quantile(self, level: float) -> float:
        cdf = np.cumsum(self.probs)
        if level - 1e-12 > cdf[-1]:
            raise ValueError(f"level {level} inside truncated tail")
        return float(self.support[np.searchsorted(cdf, level - 1e-12, side="left")])


def delta_bof(
    ages,
    genders,
    lump_sums,
    a0: float,
    coupon: float,
    curve: DiscountCurve,
    samples,
    base_year: int,
    max_age: int,
    unit: float = 1000.0,
    n_max: int | None = None,
    scr_level: float = 0.995,
) -> DeltaBofResult:
    """Change in basic own funds over one year, mixed over parameter samples.

    Assets are a one-year bond with nominal ``a0`` and coupon ``coupon``;
    liabilities are whole-life lump sums ``lump_sums`` payable at the end of
    the year of death.  Per parameter sample the death-driven sum is a
    compound Poisson computed by Panjer recursion (severity ``C_i (1 -
    A^1_i)`` stochastically rounded onto ``unit``); the final distribution
    is the equally weighted mixture over samples, capturing experience
    variance within samples and parameter risk across them.
    """
    ages = np.asarray(ages, dtype=int)
    gidx = np.array([_gender_index(g) for g in np.atleast_1d(genders)])
    C = np.asarray(lump_sums, dtype=float)
    if not (ages.size == gidx.size == C.size):
        raise ValueError("ages, genders and lump sums must align")
    samples = list(samples)
    if not samples:
        raise ValueError("at least one parameter sample is required")
    m = len(samples)

    mean_sample = samples[0] if m == 1 else _mean_params(samples)
    d01 = curve.at(1)
    base = a0 * (1.0 - d01 * (1.0 + coupon))
    bel0 = sum(
        Ci * term_life_bel(mean_sample, a, g, base_year, max_age - a, curve)
        for Ci, a, g in zip(C, ages, gidx)
    )
    base -= bel0

    if ages.size == 0:
        support = np.array([base])
        return DeltaBofResult(support=support, probs=np.array([1.0]), scr=base, mean=base, tail_mass=0.0)

    curve1 = DiscountCurve(factors=curve.factors[1:] / curve.factors[1])
    values = []
    weights = []
    tail = 0.0
    for params in samples:
        q0 = _death_probabilities_many(params, ages, gidx, base_year)
        bel1 = np.array(
            [
                term_life_bel(params, min(a + 1, params.n_ages - 1), g, base_year + 1, max_age - (a + 1), curve1)
                for a, g in zip(ages, gidx)
            ]
        )
        sev_values = C * (1.0 - bel1)
        lam = float(q0.sum())
        mix = np.zeros(int(np.ceil(sev_values.max() / unit)) + 2)
        for qi, x in zip(q0, sev_values):
            pm = stochastic_round(x, unit)
            mix[: pm.size] += (qi / lam) * pm
        if n_max is None:
            mean_n = lam * np.dot(np.arange(mix.size), mix)
            var_n = lam * np.dot(np.arange(mix.size) ** 2, mix)
            n_cap = int(np.ceil(mean_n + 12.0 * np.sqrt(max(var_n, 1.0))))
        else:
            n_cap = n_max
        dist = panjer_compound_poisson(lam, mix, n_cap)
        det = float(np.dot(C, bel1))
        values.append(base + d01 * (det + unit * np.arange(dist.pmf.size)))
        weights.append(dist.pmf / m)
        tail += dist.tail_mass / m

    support = np.concatenate(values)
    probs = np.concatenate(weights)
    order = np.argsort(support, kind="stable")
    support = support[order]
    probs = probs[order]
    cdf = np.cumsum(probs)
    if scr_level - 1e-12 > cdf[-1]:
        raise ValueError("SCR level falls inside the truncated tail; raise n_max")
    scr = float(support[np.searchsorted(cdf, scr_level - 1e-12, side="left")])
    mean = float(np.dot(support, probs))  # grid mean; truncated tail excluded
    return DeltaBofResult(support=support, probs=probs, scr=scr, mean=mean, tail_mass=tail)


def _death_probabilities_many(params: ModelParams, ages, genders, year) -> np.ndarray:
    m = central_death_rate(params, [year])[:, :, 0]
    return 1.0 - np.exp(-m[np.minimum(ages, params.n_ages - 1), genders])


def _mean_params(samples) -> ModelParams:
    from dataclasses import replace

    first = samples[0]
    arrays = {}
    for name in ("alpha", "beta", "zeta", "eta", "u", "v", "phi", "psi", "sigma2"):
        arrays[name] = np.mean([getattr(s, name) for s in samples], axis=0)
    gamma_keys = set().union(*(s.gamma.keys() for s in samples))
    gamma = {k: float(np.mean([s.gamma.get(k, 0.0) for s in samples])) for k in gamma_keys}
    return replace(first, gamma=gamma, **arrays)


def scenario_factor(reduction: float, counts_sum: float, rho_sum: float, sigma2: float) -> float:
    """Risk-factor realisation consistent with scaled death counts.

    Rescales the observed cause total by ``1 - reduction`` and applies the
    stationary-point estimate, e.g. to translate "cause-k deaths drop by
    25%" into a pinned factor value for scenario aggregation.
    """
    if not 0.0 <= reduction < 1.0:
        raise ValueError("reduction must lie in [0, 1)")
    return map_lambda(sigma2, (1.0 - reduction) * counts_sum, rho_sum)
