"""Additive stochastic mortality modelling with exact extended CreditRisk+
risk aggregation, estimation via MCMC, and actuarial applications.
"""

from .aggregate import (
    LossDistribution,
    aggregate_loss,
    aggregate_scenario,
    monte_carlo_bernoulli,
    panjer_compound_negbin,
    panjer_compound_poisson,
    quantiles,
    stochastic_round,
    total_variation,
)
from .apps import (
    DeltaBofResult,
    DiscountCurve,
    ForecastConfig,
    curtate_life_expectancy,
    delta_bof,
    estimate_d,
    forecast_rates,
    inflate_variance,
    scenario_factor,
    term_life_bel,
)
from .data import (
    ComparabilityTable,
    DataError,
    MortalityDataset,
    TransformedCounts,
    apply_comparability,
    load_dataset,
    normalize_counts,
    synth_generate,
    transform_iid,
)
from .estimate import (
    EstimationError,
    IntensityGrid,
    MapBoundaryError,
    McmcChain,
    McmcConfig,
    PriorSpec,
    TrendFixing,
    approx_lambda,
    approx_sigma,
    log_likelihood,
    log_likelihood_bernoulli,
    log_posterior,
    log_prior_smoothing,
    map_factor_fit,
    map_lambda,
    mcmc_diagnostics,
    mcmc_sample,
    mm_estimate,
    mm_sigma2,
    solve_sigma_map,
)
from .model import (
    EcrpPortfolio,
    RiskFactorSpec,
    cross_covariance,
    death_count_moments,
    unconditional_pmf_negbin,
)
from .presets import demo_params
from .trendfam import (
    GENDERS,
    ModelParams,
    cause_weights,
    central_death_rate,
    death_probability,
    laplace_cdf,
    laplace_icdf,
    normalized_trend,
    trend_reduction,
)
from .validate import (
    TestReport,
    cross_variance_check,
    independence_test,
    independence_test_grid,
    information_criteria,
    ks_gamma_test,
    serial_correlation_test,
)

__version__ = "0.1.0"
