"""Mortality dataset ingestion, classification adjustment, the i.i.d.
transform and synthetic data generation.

Death counts live on a dense (age, gender, cause, year) grid; exposures on
(age, gender, year).  Missing cells are hard errors, never zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .trendfam import GENDERS, ModelParams, cause_weights, central_death_rate

__all__ = [
    "DataError",
    "MortalityDataset",
    "ComparabilityTable",
    "TransformedCounts",
    "load_dataset",
    "apply_comparability",
    "transform_iid",
    "normalize_counts",
    "synth_generate",
]


class DataError(ValueError):
    """Malformed or inconsistent mortality data."""


@dataclass(frozen=True)
class MortalityDataset:
    """Observed death counts and exposures.

    Attributes
    ----------
    years : ndarray of int
        Consecutive calendar years.
    deaths : ndarray, shape (A+1, 2, K+1, T)
        Integer death counts per (age, gender, cause, year).
    exposure : ndarray, shape (A+1, 2, T)
        Non-negative exposure to risk per (age, gender, year).
    """

    years: np.ndarray
    deaths: np.ndarray
    exposure: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "years", np.asarray(self.years, dtype=int))
        object.__setattr__(self, "deaths", np.asarray(self.deaths))
        object.__setattr__(self, "exposure", np.asarray(self.exposure, dtype=float))
        if np.any(np.diff(self.years) != 1):
            raise DataError("non-consecutive years")
        if self.deaths.ndim != 4 or self.deaths.shape[1] != 2:
            raise DataError("deaths must have shape (A+1, 2, K+1, T)")
        if self.exposure.shape != self.deaths.shape[:2] + self.deaths.shape[3:]:
            raise DataError("exposure must have shape (A+1, 2, T)")
        if self.deaths.shape[3] != self.years.size:
            raise DataError("year axis mismatch")
        if np.any(self.deaths < 0):
            raise DataError("negative death count")
        if not np.issubdtype(self.deaths.dtype, np.integer):
            if np.any(self.deaths != np.rint(self.deaths)):
                raise DataError("death counts must be integers")
            object.__setattr__(self, "deaths", np.rint(self.deaths).astype(np.int64))
        if np.any(self.exposure < 0):
            raise DataError("negative exposure")

    @property
    def n_ages(self) -> int:
        return self.deaths.shape[0]

    @property
    def n_causes(self) -> int:
        return self.deaths.shape[2]

    @property
    def n_years(self) -> int:
        return self.years.size

    def cause_totals(self) -> np.ndarray:
        """Counts summed over ages and genders, shape (K+1, T)."""
        return self.deaths.sum(axis=(0, 1))


@dataclass(frozen=True)
class ComparabilityTable:
    """Multiplicative factors aligning counts across a classification change.

    Counts in years strictly before ``cutoff_year`` are scaled by the factor
    of their cause; later years are left untouched.
    """

    factors: np.ndarray
    cutoff_year: int

    def __post_init__(self):
        object.__setattr__(self, "factors", np.asarray(self.factors, dtype=float))
        if np.any(self.factors <= 0.0):
            raise DataError("comparability factors must be positive")


@dataclass(frozen=True)
class TransformedCounts:
    """Counts rescaled so Poisson mixture intensities are time-constant.

    Reference intensities are frozen at the final observation year, making
    the per-cell series i.i.d. under the fitted model.
    """

    counts: np.ndarray
    years: np.ndarray
    exposure_ref: np.ndarray  # (A+1, 2), final-year exposure
    m_ref: np.ndarray  # (A+1, 2), final-year central death rates
    w_ref: np.ndarray  # (A+1, 2, K+1), final-year weights

    @property
    def n_causes(self) -> int:
        return self.counts.shape[2]

    @property
    def n_years(self) -> int:
        return self.counts.shape[3]

    def intensity_ref(self) -> np.ndarray:
        """Frozen cell intensities E*m*w, shape (A+1, 2, K+1)."""
        return self.exposure_ref[:, :, None] * self.m_ref[:, :, None] * self.w_ref

    def cause_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(0, 1))


def _read_csv(path, required):
    df = pd.read_csv(path)
    missing = required - set(df.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return df


def load_dataset(deaths_csv, exposure_csv) -> MortalityDataset:
    """Load a dataset from the two CSV schemas.

    ``deaths_csv`` columns: year, age_group, gender, cause, deaths.
    ``exposure_csv`` columns: year, age_group, gender, exposure.
    Every (age, gender, cause, year) cell must be present exactly once.
    """
    deaths = _read_csv(deaths_csv, {"year", "age_group", "gender", "cause", "deaths"})
    expo = _read_csv(exposure_csv, {"year", "age_group", "gender", "exposure"})

    for df, label in ((deaths, "deaths"), (expo, "exposure")):
        bad = set(df["gender"].unique()) - set(GENDERS)
        if bad:
            raise DataError(f"{label}: unknown gender codes {sorted(bad)}")

    years = np.sort(deaths["year"].unique())
    if np.any(np.diff(years) != 1):
        raise DataError("non-consecutive years in deaths file")
    ages = np.sort(deaths["age_group"].unique())
    causes = np.sort(deaths["cause"].unique())
    if not np.array_equal(ages, np.arange(ages.size)):
        raise DataError("age groups must be 0..A without gaps")
    if not np.array_equal(causes, np.arange(causes.size)):
        raise DataError("causes must be 0..K without gaps")

    key_cols = ["year", "age_group", "gender", "cause"]
    if deaths.duplicated(key_cols).any():
        raise DataError("duplicate key in deaths file")
    if expo.duplicated(["year", "age_group", "gender"]).any():
        raise DataError("duplicate key in exposure file")
    if (deaths["deaths"] < 0).any():
        raise DataError("negative death count")
    if (expo["exposure"] < 0).any():
        raise DataError("negative exposure")

    T, A1, K1 = years.size, ages.size, causes.size
    if len(deaths) != T * A1 * 2 * K1:
        raise DataError("deaths file does not cover the full grid")
    if len(expo) != T * A1 * 2:
        raise DataError("exposure file does not cover the full grid")

    g_idx = {g: i for i, g in enumerate(GENDERS)}
    y_idx = {int(y): i for i, y in enumerate(years)}

    d = np.full((A1, 2, K1, T), -1, dtype=np.int64)
    d[
        deaths["age_group"].to_numpy(),
        deaths["gender"].map(g_idx).to_numpy(),
        deaths["cause"].to_numpy(),
        deaths["year"].map(y_idx).to_numpy(),
    ] = deaths["deaths"].to_numpy()
    if np.any(d < 0):
        raise DataError("missing (age, gender, cause, year) cell in deaths file")

    e = np.full((A1, 2, T), np.nan)
    e[
        expo["age_group"].to_numpy(),
        expo["gender"].map(g_idx).to_numpy(),
        expo["year"].map(y_idx).to_numpy(),
    ] = expo["exposure"].to_numpy()
    if np.any(np.isnan(e)):
        raise DataError("missing (age, gender, year) cell in exposure file")

    return MortalityDataset(years=years, deaths=d, exposure=e)


def apply_comparability(ds: MortalityDataset, table: ComparabilityTable) -> MortalityDataset:
    """Scale pre-cutoff counts by per-cause comparability factors.

    Scaled counts are rounded half-up to keep them integral for the count
    likelihoods downstream.
    """
    if table.factors.size != ds.n_causes:
        raise DataError(
            f"comparability table has {table.factors.size} factors "
            f"for {ds.n_causes} causes"
        )
    deaths = ds.deaths.astype(float).copy()
    pre = ds.years < table.cutoff_year
    scaled = deaths[:, :, :, pre] * table.factors[None, None, :, None]
    deaths[:, :, :, pre] = np.floor(scaled + 0.5)
    return MortalityDataset(years=ds.years, deaths=deaths.astype(np.int64), exposure=ds.exposure)


def transform_iid(ds: MortalityDataset, params: ModelParams) -> TransformedCounts:
    """Rescale counts so the model intensity of every cell is frozen at the
    final year: ``N' = floor(E(T) m(T) w(T) / (E(t) m(t) w(t)) * N)``."""
    m = central_death_rate(params, ds.years)  # (A+1, 2, T)
    w = cause_weights(params, ds.years)  # (A+1, 2, K+1, T)
    intensity = ds.exposure[:, :, None, :] * m[:, :, None, :] * w
    if np.any(intensity <= 0.0):
        raise DataError("zero model intensity cell; cannot transform")
    ratio = intensity[:, :, :, -1:] / intensity
    counts = np.floor(ratio * ds.deaths).astype(np.int64)
    return TransformedCounts(
        counts=counts,
        years=ds.years,
        exposure_ref=ds.exposure[:, :, -1],
        m_ref=m[:, :, -1],
        w_ref=w[:, :, :, -1],
    )


def normalize_counts(tc: TransformedCounts, lam: np.ndarray) -> np.ndarray:
    """Center and scale transformed counts by their conditional moments.

    ``lam`` holds risk-factor realisations for causes 1..K with shape (K, T);
    the idiosyncratic factor is fixed at 1.  Returns
    ``(N' - E m w lam) / sqrt(E m w lam)`` per cell.
    """
    lam = np.asarray(lam, dtype=float)
    K, T = tc.n_causes - 1, tc.n_years
    if lam.shape != (K, T):
        raise ValueError(f"lam must have shape {(K, T)}")
    if np.any(lam <= 0.0):
        raise ValueError("risk-factor realisations must be positive")
    lam_full = np.vstack([np.ones((1, T)), lam])  # cause 0 fixed at 1
    mean = tc.intensity_ref()[:, :, :, None] * lam_full[None, None, :, :]
    return (tc.counts - mean) / np.sqrt(mean)


def synth_generate(
    params: ModelParams,
    exposure: np.ndarray,
    years,
    seed: int,
    sigma2_t: np.ndarray | None = None,
) -> MortalityDataset:
    """Sample a dataset from the additive model.

    Risk factors are drawn per (cause, year) from a gamma law with mean one
    and variance ``sigma2`` (degenerate at 1 when the variance is 0), then
    counts are Poisson with intensity ``E m w Lambda``.  ``sigma2_t`` may
    supply per-year variances, shape (K, T), overriding ``params.sigma2``.
    """
    years = np.asarray(years, dtype=int)
    T = years.size
    exposure = np.asarray(exposure, dtype=float)
    if exposure.ndim == 2:
        exposure = np.repeat(exposure[:, :, None], T, axis=2)
    rng = np.random.default_rng(seed)
    m = central_death_rate(params, years)
    w = cause_weights(params, years)
    intensity = exposure[:, :, None, :] * m[:, :, None, :] * w

    K = params.K
    s2 = np.broadcast_to(params.sigma2[:, None], (K, T)).copy() if sigma2_t is None else np.asarray(sigma2_t, dtype=float)
    if s2.shape != (K, T):
        raise ValueError(f"sigma2_t must have shape {(K, T)}")
    lam = np.ones((K + 1, T))
    if K:
        # variance below 1e-12 is treated as a degenerate factor fixed at 1
        positive = s2 > 1e-12
        shape = np.where(positive, 1.0 / np.where(positive, s2, 1.0), 1.0)
        draws = rng.gamma(shape) / shape
        lam[1:] = np.where(positive, draws, 1.0)

    counts = rng.poisson(intensity * lam[None, None, :, :])
    return MortalityDataset(years=years, deaths=counts, exposure=exposure)
