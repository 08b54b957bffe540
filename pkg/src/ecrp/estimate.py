"""Parameter estimation: exact likelihood, posterior with latent factors,
MAP equations with closed-form approximations, matching of moments, and
random walk Metropolis-Hastings within Gibbs.

Counts enter the likelihood through per-cell intensities
``rho = E m w`` and their (cause, year) marginals; gamma risk factors are
integrated out analytically, giving negative binomial terms per factor and
year.  All log-densities use the log-gamma function throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln

from .data import MortalityDataset, TransformedCounts, transform_iid
from .trendfam import (
    GENDERS,
    ModelParams,
    cause_weights,
    central_death_rate,
    laplace_icdf,
)

__all__ = [
    "EstimationError",
    "MapBoundaryError",
    "IntensityGrid",
    "PriorSpec",
    "TrendFixing",
    "MmFit",
    "MapFactorFit",
    "McmcConfig",
    "McmcChain",
    "log_likelihood",
    "log_likelihood_bernoulli",
    "log_prior_smoothing",
    "log_posterior",
    "map_lambda",
    "approx_lambda",
    "solve_sigma_map",
    "approx_sigma",
    "map_factor_fit",
    "mm_sigma2",
    "mm_estimate",
    "mcmc_sample",
    "mcmc_diagnostics",
]


class EstimationError(RuntimeError):
    """Estimation failed or hit an undefined regime."""


class MapBoundaryError(EstimationError):
    """MAP estimate lies at the boundary of the admissible region."""


# ---------------------------------------------------------------------------
# intensities and likelihoods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntensityGrid:
    """Cell intensities ``rho = E m w`` plus (cause, year) marginals."""

    rho: np.ndarray  # (A+1, 2, K+1, T)
    counts: np.ndarray  # (A+1, 2, K+1, T)

    @classmethod
    def from_dataset(cls, ds: MortalityDataset, params: ModelParams) -> "IntensityGrid":
        m = central_death_rate(params, ds.years)
        w = cause_weights(params, ds.years)
        rho = ds.exposure[:, :, None, :] * m[:, :, None, :] * w
        return cls(rho=rho, counts=ds.deaths)

    @property
    def rho_marginal(self) -> np.ndarray:
        """Intensity summed over ages and genders, shape (K+1, T)."""
        return self.rho.sum(axis=(0, 1))

    @property
    def count_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=(0, 1))


def _sigma2_per_year(params: ModelParams, T: int, sigma2_t) -> np.ndarray:
    if sigma2_t is None:
        return np.broadcast_to(params.sigma2[:, None], (params.K, T))
    sigma2_t = np.asarray(sigma2_t, dtype=float)
    if sigma2_t.shape != (params.K, T):
        raise ValueError(f"sigma2_t must have shape {(params.K, T)}")
    return sigma2_t


def log_likelihood(ds: MortalityDataset, params: ModelParams, sigma2_t=None) -> float:
    """Exact log-likelihood with risk factors integrated out.

    Idiosyncratic cells contribute Poisson terms; every factor k >= 1
    contributes, per year, the gamma-mixture term
    ``lgamma(s + Nk) - lgamma(s) - s log(sigma2) - (s + Nk) log(s + rho_k)``
    with ``s = 1/sigma2_k``, on top of the cell terms
    ``N log rho - log N!``.  A factor with zero variance degenerates to
    pure Poisson.  ``sigma2_t`` optionally overrides the factor variances
    per (cause, year), e.g. for forecast variance inflation.
    """
    grid = IntensityGrid.from_dataset(ds, params)
    rho, N = grid.rho, grid.counts
    if np.any(rho <= 0.0):
        return -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        cell = np.sum(N * np.log(rho) - gammaln(N + 1.0))
    total = cell - rho[:, :, 0, :].sum()  # Poisson exponent, cause 0

    s2 = _sigma2_per_year(params, ds.n_years, sigma2_t)
    rho_k = grid.rho_marginal[1:]  # (K, T)
    N_k = grid.count_marginal[1:]
    degenerate = s2 <= 1e-12
    if np.any(degenerate):
        rho_cells = rho[:, :, 1:, :]
        total -= np.sum(rho_cells.sum(axis=(0, 1)) * degenerate)
    if np.any(~degenerate):
        s = np.where(degenerate, 1.0, 1.0 / np.where(degenerate, 1.0, s2))
        mix = (
            gammaln(s + N_k)
            - gammaln(s)
            - s * np.log(s2, where=~degenerate, out=np.zeros_like(s2))
            - (s + N_k) * np.log(s + rho_k)
        )
        total += np.sum(mix[~degenerate])
    return float(total) if np.isfinite(total) else -np.inf


def log_likelihood_bernoulli(ds: MortalityDataset, params: ModelParams) -> float:
    """Binomial log-likelihood for the idiosyncratic-only setting (K = 0).

    Each cell contributes ``log C(E, N) + N log m + (E - N) log(1 - m)``
    with the central death rate as success probability.
    """
    if ds.n_causes != 1:
        raise ValueError("Bernoulli likelihood requires a single (idiosyncratic) cause")
    m = central_death_rate(params, ds.years)
    N = ds.deaths[:, :, 0, :].astype(float)
    E = ds.exposure
    if np.any(N > E):
        raise ValueError("death count exceeds exposure")
    ll = (
        gammaln(E + 1.0)
        - gammaln(N + 1.0)
        - gammaln(E - N + 1.0)
        + N * np.log(m)
        + (E - N) * np.log1p(-m)
    )
    return float(ll.sum())


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian smoothing prior built from squared parameter differences.

    ``c`` scales the penalty per parameter block; ``epsilon`` adds a ridge
    pulling levels to zero (0 gives the improper variant); ``order`` selects
    the difference order: 1 penalises deviations from a constant, 2 from a
    straight line, 3 from a parabola.
    """

    c: dict = field(default_factory=dict)
    epsilon: dict = field(default_factory=dict)
    order: int = 1

    DEFAULT_C = {
        "alpha": 500.0,
        "beta": 30_000.0 * 500.0,
        "eta": 30_000.0 * 500.0,
        "zeta": 500.0 / 20.0,
        "gamma": 1000.0 * 500.0,
        "u": 0.0,
        "v": 0.0,
    }

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError("difference order must be 1, 2 or 3")
        bad = set(self.c) | set(self.epsilon)
        bad -= {"alpha", "beta", "zeta", "eta", "gamma", "u", "v"}
        if bad:
            raise ValueError(f"unknown prior blocks: {sorted(bad)}")
        if any(v < 0 for v in self.c.values()) or any(v < 0 for v in self.epsilon.values()):
            raise ValueError("prior scales must be non-negative")

    def scale(self, block: str) -> float:
        return self.c.get(block, self.DEFAULT_C[block])

    def ridge(self, block: str) -> float:
        return self.epsilon.get(block, 0.0)

    @classmethod
    def uniform(cls) -> "PriorSpec":
        """Improper flat prior: every penalty scale zero."""
        zero = {k: 0.0 for k in cls.DEFAULT_C}
        return cls(c=zero)


def _smoothing_penalty(x: np.ndarray, order: int, ridge: float) -> float:
    # x is a vector along the age (or cohort) axis
    d = np.diff(x, n=order) if x.size > order else np.zeros(0)
    return float(np.sum(d**2) + ridge * np.sum(x**2))


def _prior_on_arrays(arrays: dict, gamma: dict, prior: PriorSpec) -> float:
    total = 0.0
    for name in ("alpha", "beta", "zeta", "eta"):
        c = prior.scale(name)
        if c == 0.0 and prior.ridge(name) == 0.0:
            continue
        arr = arrays[name]
        for g in range(arr.shape[1]):
            total -= c * _smoothing_penalty(arr[:, g], prior.order, prior.ridge(name))
    for name in ("u", "v"):
        c = prior.scale(name)
        if c == 0.0 and prior.ridge(name) == 0.0:
            continue
        arr = arrays[name]
        for g in range(arr.shape[1]):
            for k in range(arr.shape[2]):
                total -= c * _smoothing_penalty(arr[:, g, k], prior.order, prior.ridge(name))
    if gamma:
        c = prior.scale("gamma")
        if c > 0.0 or prior.ridge("gamma") > 0.0:
            vec = np.array([gamma[k] for k in sorted(gamma)])
            total -= c * _smoothing_penalty(vec, prior.order, prior.ridge("gamma"))
    return total


def log_prior_smoothing(params: ModelParams, prior: PriorSpec) -> float:
    """Log smoothing prior, up to its normalization constant.

    Age-difference penalties are applied per gender for the rate blocks, per
    (gender, cause) for weight blocks, and along the birth-year axis for the
    cohort block.
    """
    arrays = {name: getattr(params, name) for name in ("alpha", "beta", "zeta", "eta", "u", "v")}
    return _prior_on_arrays(arrays, params.gamma, prior)


def log_posterior(
    ds: MortalityDataset,
    params: ModelParams,
    lam: np.ndarray,
    prior: PriorSpec | None = None,
) -> float:
    """Joint log-density of parameters and risk-factor realisations.

    Sum of the smoothing prior, the gamma log-density of every ``lam_k(t)``
    (shape and rate ``1/sigma2_k``), and Poisson cell terms with intensity
    ``rho lam``.  Normalization constants in the data factorials are kept so
    the value is comparable with :func:`log_likelihood`.
    """
    lam = np.asarray(lam, dtype=float)
    K, T = params.K, ds.n_years
    if lam.shape != (K, T):
        raise ValueError(f"lam must have shape {(K, T)}")
    if np.any(lam <= 0.0):
        raise ValueError("risk-factor realisations must be positive")
    if np.any(params.sigma2 <= 1e-12):
        raise EstimationError("posterior target requires sigma2 > 0 for all factors")

    grid = IntensityGrid.from_dataset(ds, params)
    rho, N = grid.rho, grid.counts
    if np.any(rho <= 0.0):
        return -np.inf
    lam_full = np.vstack([np.ones((1, T)), lam])
    mean = rho * lam_full[None, None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        pois = np.sum(-mean + N * np.log(mean) - gammaln(N + 1.0))

    s = 1.0 / params.sigma2[:, None]  # (K, 1)
    gam = np.sum(s * np.log(s) - gammaln(s) + (s - 1.0) * np.log(lam) - s * lam)

    pri = 0.0 if prior is None else log_prior_smoothing(params, prior)
    total = pri + gam + pois
    return float(total) if np.isfinite(total) else -np.inf


# ---------------------------------------------------------------------------
# MAP equations and approximations
# ---------------------------------------------------------------------------

def map_lambda(sigma2: float, counts_sum: float, rho_sum: float) -> float:
    """Stationary-point estimate of a risk-factor realisation.

    ``(1/sigma2 - 1 + counts_sum) / (1/sigma2 + rho_sum)``; for a
    degenerate factor the estimate is 1.
    """
    if sigma2 < 0.0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 <= 1e-12:
        return 1.0
    s = 1.0 / sigma2
    num = s - 1.0 + counts_sum
    if num <= 0.0:
        raise MapBoundaryError("MAP at boundary: 1/sigma2 - 1 + counts_sum <= 0")
    return num / (s + rho_sum)


def approx_lambda(counts_sum: float, rho_sum: float) -> float:
    """Large-count approximation ``(counts_sum - 1) / rho_sum``."""
    if counts_sum < 1.0:
        raise EstimationError("degenerate cell: needs at least one observed death")
    if rho_sum <= 0.0:
        raise ValueError("rho_sum must be positive")
    return (counts_sum - 1.0) / rho_sum


def solve_sigma_map(lam_series, tol: float = 1e-10) -> float:
    """Unique positive solution of the factor-variance stationarity equation.

    Solves ``2 log sigma + digamma(1/sigma2) = mean(1 + log lam - lam)`` by
    bisection on a fixed bracket; monotonicity of ``log x - digamma(x)``
    makes bisection safe.  A constant series at 1 means no variability and
    returns 0.
    """
    lam = np.asarray(lam_series, dtype=float)
    if np.any(lam <= 0.0):
        raise ValueError("lam series must be positive")
    rhs = float(np.mean(1.0 + np.log(lam) - lam))
    if rhs >= 0.0:  # only attained when every lam equals 1
        return 0.0

    # g(s2) = -f(1/s2) + |rhs| with f(x) = log x - digamma(x); f is strictly
    # decreasing, so g decreases from |rhs| > 0 at 0+ to -inf
    def g(s2: float) -> float:
        return np.log(s2) + digamma(1.0 / s2) - rhs

    lo, hi = 1e-8, 1e3
    if g(lo) <= 0.0:
        return 0.0  # root below resolution: no meaningful variability
    if g(hi) >= 0.0:
        raise EstimationError("sigma2 root above bracket; series is too dispersed")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def approx_sigma(lam_series) -> float:
    """Second-order approximation: sample variance of the series around 1."""
    lam = np.asarray(lam_series, dtype=float)
    return float(np.mean((lam - 1.0) ** 2))


@dataclass(frozen=True)
class MapFactorFit:
    """Fixed point of the coupled factor equations for one cause."""

    sigma2: float
    lam: np.ndarray
    iterations: int
    converged: bool


def map_factor_fit(counts_t, rho_t, tol: float = 1e-8, max_iter: int = 200) -> MapFactorFit:
    """Alternate the realisation and variance equations to a fixed point.

    The two stationarity conditions are coupled (each depends on the other's
    output); iteration starts from the large-count approximations.
    """
    counts_t = np.asarray(counts_t, dtype=float)
    rho_t = np.asarray(rho_t, dtype=float)
    lam = np.array([approx_lambda(n, r) for n, r in zip(counts_t, rho_t)])
    lam = np.maximum(lam, 1e-12)
    sigma2 = approx_sigma(lam)
    for it in range(1, max_iter + 1):
        sigma2_new = solve_sigma_map(lam)
        lam_new = np.array([map_lambda(sigma2_new, n, r) for n, r in zip(counts_t, rho_t)])
        delta = abs(sigma2_new - sigma2) + float(np.max(np.abs(lam_new - lam)))
        sigma2, lam = sigma2_new, lam_new
        if delta < tol:
            return MapFactorFit(sigma2=sigma2, lam=lam, iterations=it, converged=True)
    return MapFactorFit(sigma2=sigma2, lam=lam, iterations=max_iter, converged=False)


# ---------------------------------------------------------------------------
# matching of moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendFixing:
    """Pre-fixed trend-reduction and cohort parameters for the regressions."""

    zeta: float = 0.0
    eta: float = 1.0 / 150.0
    phi: float = 0.0
    psi: float = 1.0 / 150.0
    gamma: dict = field(default_factory=dict)
    t0: float | None = None


@dataclass(frozen=True)
class MmFit:
    """Matching-of-moments output: full parameter set plus diagnostics."""

    params: ModelParams
    dropped_cells: int


def mm_sigma2(tc: TransformedCounts) -> np.ndarray:
    """Risk-factor variances from the variance decomposition of weights.

    The unbiased per-cell sample variance of ``W* = N' / (E m)`` has
    expectation ``w/(E m) + sigma2 w^2``; solving for ``sigma2`` across
    cells and clamping at zero gives the estimate per factor.
    """
    if tc.n_years < 2:
        raise EstimationError("need at least two years to estimate variances")
    Em = tc.exposure_ref * tc.m_ref  # (A+1, 2)
    w_star = tc.counts / Em[:, :, None, None]
    s2_hat = np.var(w_star, axis=3, ddof=1)  # (A+1, 2, K+1)
    excess = s2_hat - tc.w_ref / Em[:, :, None]
    num = excess.sum(axis=(0, 1))  # (K+1,)
    den = (tc.w_ref**2).sum(axis=(0, 1))
    est = np.maximum(0.0, num / den)
    return est[1:]


def mm_estimate(ds: MortalityDataset, fixing: TrendFixing | None = None) -> MmFit:
    """Matching-of-moments fit: trend regressions plus factor variances.

    With trend-reduction parameters fixed, rate parameters come from least
    squares of the inverse-link crude death rates on the trend transform,
    and weight parameters from least squares of ``log N - log(E m)``.
    Cells with zero counts are dropped from the log regression with a
    warning.  Factor variances are estimated on the i.i.d.-transformed
    counts.  Intended to seed the samplers rather than replace them.
    """
    fixing = fixing or TrendFixing()
    A1, _, K1, T = ds.deaths.shape
    shape_ag = (A1, 2)
    zeta = np.full(shape_ag, fixing.zeta)
    eta = np.full(shape_ag, fixing.eta)
    phi = np.full(K1, fixing.phi)
    psi = np.full(K1, fixing.psi)

    probe = ModelParams(
        alpha=np.zeros(shape_ag),
        beta=np.zeros(shape_ag),
        zeta=zeta,
        eta=eta,
        u=np.zeros((A1, 2, K1)),
        v=np.zeros((A1, 2, K1)),
        phi=phi,
        psi=psi,
        sigma2=np.zeros(K1 - 1),
        gamma=fixing.gamma,
        t0=fixing.t0,
    )
    x_rate = probe.rate_trend(ds.years)  # (A+1, 2, T)
    x_weight = probe.weight_trend(ds.years)  # (K+1, T)

    totals = ds.deaths.sum(axis=2)  # (A+1, 2, T)
    crude = totals / np.maximum(ds.exposure, 1e-300)
    usable = (crude > 0.0) & (crude < 1.0)
    dropped = int(np.size(usable) - usable.sum())
    coh = None
    if fixing.gamma:
        ages = np.arange(A1)
        birth = np.rint(ds.years[None, :] - ages[:, None]).astype(int)
        coh = np.array([[fixing.gamma.get(int(b), 0.0) for b in row] for row in birth])

    alpha = np.zeros(shape_ag)
    beta = np.zeros(shape_ag)
    for a in range(A1):
        for g in range(2):
            keep = usable[a, g]
            if keep.sum() < 2:
                raise EstimationError(
                    f"cell (age {a}, gender {GENDERS[g]}) has too few usable "
                    "years for the rate regression"
                )
            y = laplace_icdf(crude[a, g, keep])
            if coh is not None:
                y = y - coh[a, keep]
            X = np.column_stack([np.ones(int(keep.sum())), x_rate[a, g, keep]])
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            alpha[a, g], beta[a, g] = coef

    rate_params = replace(probe, alpha=alpha, beta=beta)
    m_fit = central_death_rate(rate_params, ds.years)  # (A+1, 2, T)

    u = np.zeros((A1, 2, K1))
    v = np.zeros((A1, 2, K1))
    for a in range(A1):
        for g in range(2):
            base = ds.exposure[a, g] * m_fit[a, g]  # (T,)
            for k in range(K1):
                counts = ds.deaths[a, g, k].astype(float)
                keep = counts > 0
                dropped += int(T - keep.sum())
                if keep.sum() < 2:
                    raise EstimationError(
                        f"cell (age {a}, gender {GENDERS[g]}, cause {k}) has too few "
                        "non-zero counts for the weight regression"
                    )
                z = np.log(counts[keep]) - np.log(base[keep])
                X = np.column_stack([np.ones(int(keep.sum())), x_weight[k, keep]])
                coef, *_ = np.linalg.lstsq(X, z, rcond=None)
                u[a, g, k], v[a, g, k] = coef
    if dropped:
        warnings.warn(f"regressions dropped {dropped} zero-count cells", stacklevel=2)

    params = ModelParams(
        alpha=alpha,
        beta=beta,
        zeta=zeta,
        eta=eta,
        u=u,
        v=v,
        phi=phi,
        psi=psi,
        sigma2=np.zeros(K1 - 1),
        gamma=fixing.gamma,
        t0=fixing.t0,
    ).canonicalized()

    tc = transform_iid(ds, params)
    sigma2 = mm_sigma2(tc)
    return MmFit(params=replace(params, sigma2=sigma2), dropped_cells=dropped)


# ---------------------------------------------------------------------------
# MCMC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcConfig:
    """Run configuration for the random walk sampler."""

    n_iter: int = 10_000
    burn_in: int = 2_000
    seed: int = 0
    initial_scale: float = 0.05
    adapt_interval: int = 50
    target_acceptance: float = 0.234
    fixed: tuple = ("zeta", "eta", "phi", "psi", "gamma")
    thin: int = 1

    def __post_init__(self):
        if self.burn_in >= self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        bad = set(self.fixed) - {
            "alpha", "beta", "zeta", "eta", "u", "v", "phi", "psi", "gamma", "sigma2",
        }
        if bad:
            raise ValueError(f"unknown fixed families: {sorted(bad)}")


@dataclass
class _Block:
    label: str
    family: str
    index: tuple  # index into the family array; () for whole-dict gamma keys
    size: int
    log_scale: bool
    scale: float
    accepted: int = 0
    proposed: int = 0


class _State:
    """Mutable copy of the free parameter arrays."""

    def __init__(self, params: ModelParams):
        self.arrays = {
            name: np.array(getattr(params, name), dtype=float, copy=True)
            for name in ("alpha", "beta", "zeta", "eta", "u", "v", "phi", "psi", "sigma2")
        }
        self.gamma = dict(params.gamma)
        self.t0 = params.t0

    def to_params(self) -> ModelParams:
        return ModelParams(gamma=dict(self.gamma), t0=self.t0, **{k: v.copy() for k, v in self.arrays.items()})

    def get(self, family: str, index: tuple) -> np.ndarray:
        if family == "gamma":
            return np.array([self.gamma[index[0]]])
        val = self.arrays[family][index]
        return np.atleast_1d(np.asarray(val, dtype=float)).copy()

    def set(self, family: str, index: tuple, value: np.ndarray):
        if family == "gamma":
            self.gamma[index[0]] = float(value[0])
        else:
            arr = self.arrays[family]
            arr[index] = value if arr[index].ndim else float(value[0])


def _build_blocks(params: ModelParams, cfg: McmcConfig) -> list[_Block]:
    A1, K = params.n_ages, params.K
    blocks: list[_Block] = []

    def add(label, family, index, size, log_scale=False):
        blocks.append(
            _Block(label=label, family=family, index=index, size=size,
                   log_scale=log_scale, scale=cfg.initial_scale)
        )

    for family in ("alpha", "beta", "zeta", "eta"):
        if family in cfg.fixed:
            continue
        for a in range(A1):
            for g in range(2):
                add(f"{family}[{a},{GENDERS[g]}]", family, (a, g), 1, log_scale=family == "eta")
    for family in ("u", "v"):
        if family in cfg.fixed or K == 0:
            continue
        for a in range(A1):
            for g in range(2):
                # cause 0 pinned at zero by the identifiability convention
                add(f"{family}[{a},{GENDERS[g]},1:]", family, (a, g, slice(1, None)), K)
    for family in ("phi", "psi"):
        if family in cfg.fixed:
            continue
        for k in range(params.n_causes):
            add(f"{family}[{k}]", family, (k,), 1, log_scale=family == "psi")
    if "sigma2" not in cfg.fixed:
        for k in range(1, K + 1):
            add(f"sigma2[{k}]", "sigma2", (k - 1,), 1, log_scale=True)
    if "gamma" not in cfg.fixed:
        for key in sorted(params.gamma):
            add(f"gamma[{key}]", "gamma", (key,), 1)
    if not blocks:
        raise ValueError("no free parameter blocks to sample")
    return blocks


@dataclass
class McmcChain:
    """Post-burn-in samples with acceptance statistics and tuning state.

    ``samples[i]`` holds the flattened free parameters of draw ``i`` in the
    column order of ``column_names``; ``lam_samples`` is present only when
    the posterior (latent-factor) target was used.
    """

    samples: np.ndarray
    column_names: list
    columns: list  # (family, full-array index tuple) per column
    template: ModelParams
    target_values: np.ndarray
    acceptance: dict
    scales: dict
    burn_in: int
    seed: int
    target: str
    lam_samples: np.ndarray | None = None

    def __len__(self) -> int:
        return self.samples.shape[0]

    def params_at(self, i: int) -> ModelParams:
        state = _State(self.template)
        for value, (family, index) in zip(self.samples[i], self.columns):
            if family == "gamma":
                state.gamma[index[0]] = float(value)
            else:
                state.arrays[family][index] = value
        return state.to_params()

    def mean_params(self) -> ModelParams:
        state = _State(self.template)
        means = self.samples.mean(axis=0)
        for value, (family, index) in zip(means, self.columns):
            if family == "gamma":
                state.gamma[index[0]] = float(value)
            else:
                state.arrays[family][index] = value
        return state.to_params()

    def mode_params(self) -> ModelParams:
        return self.params_at(int(np.argmax(self.target_values)))

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.column_names.index(name)]

    @property
    def sigma2_samples(self) -> np.ndarray:
        cols = [i for i, (fam, _) in enumerate(self.columns) if fam == "sigma2"]
        if cols:
            return self.samples[:, cols]
        K = self.template.K
        return np.tile(self.template.sigma2, (len(self), 1)) if K else np.zeros((len(self), 0))


def _conjugate_lambda_draw(rng, sigma2, counts_kt, rho_kt):
    """Exact Gibbs draw of the latent factors given everything else."""
    s = 1.0 / sigma2[:, None]
    shape = s + counts_kt
    rate = s + rho_kt
    return rng.gamma(shape) / rate


class _TargetEvaluator:
    """Likelihood/posterior evaluation on raw state arrays.

    Quantities that cannot change during the run (count factorials, trend
    transforms of fixed families, the cohort offset) are precomputed once;
    the result matches :func:`log_likelihood` / :func:`log_posterior` on the
    equivalent ``ModelParams`` exactly.
    """

    def __init__(self, ds: MortalityDataset, state: "_State", cfg: "McmcConfig", prior, target):
        self.ds = ds
        self.prior = prior
        self.target = target
        self.years = ds.years.astype(float)
        self.N = ds.deaths
        self.E = ds.exposure
        self.lgam_sum = float(gammaln(ds.deaths + 1.0).sum())
        self.Nk = ds.deaths.sum(axis=(0, 1))  # (K+1, T)
        self.t0 = state.t0
        fixed = set(cfg.fixed)
        self.rate_x = (
            self._trend(state.arrays["zeta"][..., None], state.arrays["eta"][..., None])
            if {"zeta", "eta"} <= fixed
            else None
        )
        self.weight_x = (
            self._trend(state.arrays["phi"][:, None], state.arrays["psi"][:, None])
            if {"phi", "psi"} <= fixed
            else None
        )
        self.coh = None
        self.coh_fixed = "gamma" in fixed
        if self.coh_fixed:
            self.coh = self._cohort(state.gamma)

    def _trend(self, loc, speed):
        raw = np.arctan(speed * (self.years - loc)) / speed
        if self.t0 is None:
            return raw
        base = np.arctan(speed * (self.t0 - loc)) / speed
        step = base - np.arctan(speed * (self.t0 - 1.0 - loc)) / speed
        return (raw - base) / step

    def _cohort(self, gamma: dict):
        if not gamma:
            return 0.0
        A1 = self.N.shape[0]
        birth = np.rint(self.years[None, :] - np.arange(A1)[:, None]).astype(int)
        return np.array([[gamma.get(int(b), 0.0) for b in row] for row in birth])

    def _rho(self, st: "_State"):
        a = st.arrays
        rate_x = self.rate_x
        if rate_x is None:
            rate_x = self._trend(a["zeta"][..., None], a["eta"][..., None])
        weight_x = self.weight_x
        if weight_x is None:
            weight_x = self._trend(a["phi"][:, None], a["psi"][:, None])
        coh = self.coh if self.coh_fixed else self._cohort(st.gamma)
        x = a["alpha"][..., None] + a["beta"][..., None] * rate_x
        if np.ndim(coh) or coh:
            x = x + (coh[:, None, :] if np.ndim(coh) else coh)
        tiny = np.finfo(float).tiny
        m = 0.5 + 0.5 * np.sign(x) * (1.0 - np.exp(-np.abs(x)))
        m = np.clip(m, tiny, np.nextafter(1.0, 0.0))
        score = a["u"][..., None] + a["v"][..., None] * weight_x[None, None, :, :]
        score = score - score.max(axis=2, keepdims=True)
        ex = np.exp(score)
        w = np.maximum(ex / ex.sum(axis=2, keepdims=True), tiny)
        return self.E[:, :, None, :] * m[:, :, None, :] * w

    def loglik(self, st: "_State") -> float:
        rho = self._rho(st)
        with np.errstate(divide="ignore", invalid="ignore"):
            total = float(np.sum(self.N * np.log(rho))) - self.lgam_sum
            total -= float(rho[:, :, 0, :].sum())
            s2 = st.arrays["sigma2"]
            K = s2.size
            if K:
                rho_k = rho[:, :, 1:, :].sum(axis=(0, 1))
                N_k = self.Nk[1:]
                for k in range(K):
                    if s2[k] <= 1e-12:
                        total -= float(rho_k[k].sum())
                    else:
                        s = 1.0 / s2[k]
                        total += float(
                            np.sum(
                                gammaln(s + N_k[k])
                                - gammaln(s)
                                - s * np.log(s2[k])
                                - (s + N_k[k]) * np.log(s + rho_k[k])
                            )
                        )
        if self.prior is not None and np.isfinite(total):
            total += _prior_on_arrays(st.arrays, st.gamma, self.prior)
        return total if np.isfinite(total) else -np.inf

    def logpost(self, st: "_State", lam: np.ndarray) -> float:
        rho = self._rho(st)
        T = self.years.size
        lam_full = np.vstack([np.ones((1, T)), lam])
        mean = rho * lam_full[None, None, :, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            total = float(np.sum(-mean + self.N * np.log(mean))) - self.lgam_sum
            s2 = st.arrays["sigma2"]
            if s2.size:
                s = 1.0 / s2[:, None]
                total += float(
                    np.sum(s * np.log(s) - gammaln(s) + (s - 1.0) * np.log(lam) - s * lam)
                )
        if self.prior is not None and np.isfinite(total):
            total += _prior_on_arrays(st.arrays, st.gamma, self.prior)
        return total if np.isfinite(total) else -np.inf

    def rho_marginals(self, st: "_State"):
        rho = self._rho(st)
        return rho[:, :, 1:, :].sum(axis=(0, 1))


def mcmc_sample(
    ds: MortalityDataset,
    init: ModelParams,
    cfg: McmcConfig,
    prior: PriorSpec | None = None,
    target: str = "likelihood",
) -> McmcChain:
    """Random walk Metropolis-Hastings within Gibbs over parameter blocks.

    One block per parameter family per (age, gender) group plus one per
    factor variance; positive parameters are proposed on the log scale with
    the Jacobian included in the acceptance ratio.  Proposal scales adapt
    toward 23.4% acceptance during burn-in and are frozen afterwards.  With
    ``target="posterior"`` the latent risk factors are drawn exactly from
    their gamma full conditionals each sweep.
    """
    if target not in ("likelihood", "posterior"):
        raise ValueError("target must be 'likelihood' or 'posterior'")
    rng = np.random.default_rng(cfg.seed)
    state = _State(init.canonicalized())
    if target == "posterior" or "sigma2" not in cfg.fixed:
        state.arrays["sigma2"] = np.maximum(state.arrays["sigma2"], 1e-6)
    blocks = _build_blocks(init, cfg)
    ev = _TargetEvaluator(ds, state, cfg, prior, target)

    lam = None
    if target == "posterior":
        lam = _conjugate_lambda_draw(
            rng, state.arrays["sigma2"], ev.Nk[1:], ev.rho_marginals(state)
        )

    def log_target(st: _State) -> float:
        if target == "likelihood":
            return ev.loglik(st)
        return ev.logpost(st, lam)

    current = log_target(state)
    if not np.isfinite(current):
        raise EstimationError("initial parameters give a non-finite target density")

    keep = (cfg.n_iter - cfg.burn_in) // cfg.thin
    n_cols = sum(b.size for b in blocks)
    samples = np.empty((keep, n_cols))
    targets = np.empty(keep)
    lam_store = (
        np.empty((keep, init.K, ds.n_years)) if target == "posterior" else None
    )
    kept = 0
    window: dict = {b.label: [0, 0] for b in blocks}

    for it in range(cfg.n_iter):
        if target == "posterior":
            lam = _conjugate_lambda_draw(
                rng, state.arrays["sigma2"], ev.Nk[1:], ev.rho_marginals(state)
            )
            current = log_target(state)
        for b in blocks:
            old = state.get(b.family, b.index)
            if b.scale == 0.0:
                continue
            step = rng.normal(0.0, b.scale, size=b.size)
            if b.log_scale:
                new = old * np.exp(step)
                jacobian = float(np.sum(np.log(new) - np.log(old)))
            else:
                new = old + step
                jacobian = 0.0
            state.set(b.family, b.index, new)
            proposed = log_target(state)
            log_accept = proposed - current + jacobian
            b.proposed += 1
            in_burn = it < cfg.burn_in
            if np.log(rng.random()) < log_accept:
                current = proposed
                b.accepted += 1
                if in_burn:
                    window[b.label][0] += 1
            else:
                state.set(b.family, b.index, old)
            if in_burn:
                window[b.label][1] += 1
                if window[b.label][1] >= cfg.adapt_interval:
                    acc, tot = window[b.label]
                    rate = acc / tot
                    b.scale *= float(np.exp(np.clip(rate - cfg.target_acceptance, -0.5, 0.5)))
                    window[b.label] = [0, 0]
        if it == cfg.burn_in - 1:
            for b in blocks:  # acceptance is reported post-adaptation only
                b.accepted = 0
                b.proposed = 0
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0 and kept < keep:
            col = 0
            for b in blocks:
                samples[kept, col : col + b.size] = state.get(b.family, b.index)
                col += b.size
            targets[kept] = current
            if lam_store is not None:
                lam_store[kept] = lam
            kept += 1

    column_names = []
    columns = []
    for b in blocks:
        if b.size == 1:
            column_names.append(b.label)
            columns.append((b.family, b.index))
        else:
            a, g, _ = b.index
            for k in range(1, b.size + 1):
                column_names.append(f"{b.family}[{a},{GENDERS[g]},{k}]")
                columns.append((b.family, (a, g, k)))

    acceptance = {
        b.label: (b.accepted / b.proposed if b.proposed else 0.0) for b in blocks
    }
    if all(r == 0.0 for r in acceptance.values()):
        raise EstimationError("zero acceptance across all blocks after adaptation")
    return McmcChain(
        samples=samples[:kept],
        column_names=column_names,
        columns=columns,
        template=init.canonicalized(),
        target_values=targets[:kept],
        acceptance=acceptance,
        scales={b.label: b.scale for b in blocks},
        burn_in=cfg.burn_in,
        seed=cfg.seed,
        target=target,
        lam_samples=lam_store[:kept] if lam_store is not None else None,
    )


@dataclass(frozen=True)
class McmcDiagnostics:
    names: list
    mean: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    se: np.ndarray

    def as_dict(self) -> dict:
        return {
            n: {"mean": m, "q05": lo, "q95": hi, "se": s}
            for n, m, lo, hi, s in zip(self.names, self.mean, self.q05, self.q95, self.se)
        }


def mcmc_diagnostics(chain: McmcChain, block_size: int = 50) -> McmcDiagnostics:
    """Batch-means standard errors plus 5/95% quantiles per scalar parameter."""
    n = len(chain)
    if n < 2 * block_size:
        raise EstimationError("chain too short for the requested block size")
    n_blocks = n // block_size
    trimmed = chain.samples[: n_blocks * block_size]
    block_means = trimmed.reshape(n_blocks, block_size, -1).mean(axis=1)
    se = block_means.std(axis=0, ddof=1) / np.sqrt(n_blocks)
    return McmcDiagnostics(
        names=list(chain.column_names),
        mean=chain.samples.mean(axis=0),
        q05=np.quantile(chain.samples, 0.05, axis=0),
        q95=np.quantile(chain.samples, 0.95, axis=0),
        se=se,
    )


def save_chain(path, chain: McmcChain) -> None:
    """Persist a chain to ``.npz`` (arrays plus JSON-encoded metadata)."""
    import json

    meta = {
        "column_names": chain.column_names,
        "columns": [[fam, list(idx)] for fam, idx in chain.columns],
        "template": chain.template.to_dict(),
        "acceptance": chain.acceptance,
        "scales": chain.scales,
        "burn_in": chain.burn_in,
        "seed": chain.seed,
        "target": chain.target,
    }
    arrays = {
        "samples": chain.samples,
        "target_values": chain.target_values,
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    if chain.lam_samples is not None:
        arrays["lam_samples"] = chain.lam_samples
    np.savez_compressed(path, **arrays)


def load_chain(path) -> McmcChain:
    import json

    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        lam = data["lam_samples"] if "lam_samples" in data.files else None
        return McmcChain(
            samples=data["samples"],
            column_names=meta["column_names"],
            columns=[(fam, tuple(idx)) for fam, idx in meta["columns"]],
            template=ModelParams.from_dict(meta["template"]),
            target_values=data["target_values"],
            acceptance=meta["acceptance"],
            scales=meta["scales"],
            burn_in=meta["burn_in"],
            seed=meta["seed"],
            target=meta["target"],
            lam_samples=lam,
        )
