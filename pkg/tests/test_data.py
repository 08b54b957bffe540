import numpy as np
import pytest
from scipy import stats

from ecrp import (
    ComparabilityTable,
    DataError,
    MortalityDataset,
    apply_comparability,
    load_dataset,
    normalize_counts,
    synth_generate,
    transform_iid,
)

from conftest import make_params


def write_toy_csvs(tmp_path, deaths_rows, exposure_rows):
    deaths = tmp_path / "deaths.csv"
    deaths.write_text("year,age_group,gender,cause,deaths\n" + "\n".join(deaths_rows) + "\n")
    expo = tmp_path / "exposure.csv"
    expo.write_text("year,age_group,gender,exposure\n" + "\n".join(exposure_rows) + "\n")
    return deaths, expo


def toy_rows(years=(1990, 1991), deaths_value=3):
    deaths_rows = [
        f"{y},0,{g},0,{deaths_value}" for y in years for g in ("f", "m")
    ]
    exposure_rows = [f"{y},0,{g},100" for y in years for g in ("f", "m")]
    return deaths_rows, exposure_rows


class TestLoadDataset:
    def test_toy_parse(self, tmp_path):
        d, e = write_toy_csvs(tmp_path, *toy_rows())
        ds = load_dataset(d, e)
        assert ds.deaths.shape == (1, 2, 1, 2)
        assert ds.exposure.shape == (1, 2, 2)
        assert np.all(ds.deaths == 3)
        assert list(ds.years) == [1990, 1991]

    def test_duplicate_key_rejected(self, tmp_path):
        rows, expo = toy_rows()
        rows.append(rows[0])
        d, e = write_toy_csvs(tmp_path, rows, expo)
        with pytest.raises(DataError, match="duplicate key"):
            load_dataset(d, e)

    def test_year_gap_rejected(self, tmp_path):
        d, e = write_toy_csvs(tmp_path, *toy_rows(years=(1990, 1992)))
        with pytest.raises(DataError, match="non-consecutive"):
            load_dataset(d, e)

    def test_missing_cell_rejected(self, tmp_path):
        rows, expo = toy_rows()
        d, e = write_toy_csvs(tmp_path, rows[:-1], expo)
        with pytest.raises(DataError):
            load_dataset(d, e)

    def test_negative_count_rejected(self, tmp_path):
        rows, expo = toy_rows()
        rows[0] = "1990,0,f,0,-1"
        d, e = write_toy_csvs(tmp_path, rows, expo)
        with pytest.raises(DataError, match="negative"):
            load_dataset(d, e)


class TestComparability:
    def test_factor_applied_before_cutoff(self):
        ds = MortalityDataset(
            years=np.array([1990, 1991]),
            deaths=np.full((1, 2, 1, 2), 100, dtype=np.int64),
            exposure=np.full((1, 2, 2), 1000.0),
        )
        table = ComparabilityTable(factors=np.array([1.25]), cutoff_year=1997)
        out = apply_comparability(ds, table)
        assert np.all(out.deaths == 125)

    def test_unit_factor_is_identity(self):
        ds = MortalityDataset(
            years=np.array([1990, 1991]),
            deaths=np.array([[[[7, 9]], [[4, 5]]]], dtype=np.int64),
            exposure=np.full((1, 2, 2), 1000.0),
        )
        table = ComparabilityTable(factors=np.array([1.0]), cutoff_year=1997)
        out = apply_comparability(ds, table)
        assert np.array_equal(out.deaths, ds.deaths)

    def test_after_cutoff_unchanged(self):
        ds = MortalityDataset(
            years=np.array([1996, 1997, 1998]),
            deaths=np.full((1, 2, 1, 3), 100, dtype=np.int64),
            exposure=np.full((1, 2, 3), 1000.0),
        )
        table = ComparabilityTable(factors=np.array([1.25]), cutoff_year=1997)
        out = apply_comparability(ds, table)
        assert np.all(out.deaths[:, :, :, 0] == 125)
        assert np.all(out.deaths[:, :, :, 1:] == 100)

    def test_rounding_half_up(self):
        ds = MortalityDataset(
            years=np.array([1990]),
            deaths=np.full((1, 2, 1, 1), 2, dtype=np.int64),
            exposure=np.full((1, 2, 1), 1000.0),
        )
        # 2 * 1.25 = 2.5 rounds half-up to 3
        table = ComparabilityTable(factors=np.array([1.25]), cutoff_year=1997)
        assert np.all(apply_comparability(ds, table).deaths == 3)

    def test_missing_factor_rejected(self):
        ds = MortalityDataset(
            years=np.array([1990]),
            deaths=np.full((1, 2, 2, 1), 2, dtype=np.int64),
            exposure=np.full((1, 2, 1), 1000.0),
        )
        with pytest.raises(DataError, match="factors"):
            apply_comparability(ds, ComparabilityTable(factors=np.array([1.0]), cutoff_year=1997))


class TestTransformIid:
    def test_identity_for_time_constant_model(self):
        params = make_params(alpha=-2.5, K=1, sigma2=[0.02])
        years = np.arange(2000, 2010)
        deaths = np.random.default_rng(0).poisson(20.0, (1, 2, 2, years.size))
        exposure = np.full((1, 2, years.size), 500.0)
        ds = MortalityDataset(years=years, deaths=deaths, exposure=exposure)
        tc = transform_iid(ds, params)
        assert np.array_equal(tc.counts, ds.deaths)

    def test_floor_of_half_ratio(self):
        params = make_params(alpha=-2.5)
        years = np.array([2000, 2001])
        deaths = np.full((1, 2, 1, 2), 7, dtype=np.int64)
        # doubling the early exposure halves the transform ratio for year 0
        exposure = np.stack([np.full((1, 2), 1000.0), np.full((1, 2), 500.0)], axis=2)
        ds = MortalityDataset(years=years, deaths=deaths, exposure=exposure)
        tc = transform_iid(ds, params)
        assert np.all(tc.counts[:, :, :, 0] == 3)  # floor(0.5 * 7)
        assert np.all(tc.counts[:, :, :, 1] == 7)

    def test_detrending_gives_time_constant_mean(self):
        # strong downward trend; transformed counts should lose it
        params = make_params(alpha=-2.0, beta=-0.05, K=0, t0=2000.0)
        years = np.arange(2000, 2010)
        exposure = np.full((1, 2), 200_000.0)
        first, last = [], []
        for seed in range(400):
            ds = synth_generate(params, exposure, years, seed=seed)
            tc = transform_iid(ds, params)
            first.append(tc.counts[0, 0, 0, 0])
            last.append(tc.counts[0, 0, 0, -1])
        first = np.array(first, dtype=float)
        last = np.array(last, dtype=float)
        # the raw series drifts by far more than the tolerance below
        se = np.sqrt(first.var() / first.size + last.var() / last.size)
        assert abs(first.mean() - last.mean()) < 4.0 * se + 1.0  # +1 for the floor bias


class TestNormalizeCounts:
    def test_centered_case_and_arithmetic(self):
        from ecrp import cause_weights, central_death_rate

        params = make_params(alpha=-2.5, K=1, sigma2=[0.04])
        years = np.arange(2000, 2002)
        exposure = np.full((1, 2, 2), 1000.0)
        m = central_death_rate(params, years)
        w = cause_weights(params, years)
        mean = exposure[:, :, None, :] * m[:, :, None, :] * w
        counts = np.rint(mean).astype(np.int64)
        ds = MortalityDataset(years=years, deaths=counts, exposure=exposure)
        tc = transform_iid(ds, params)
        lam = np.ones((1, 2))
        nstar = normalize_counts(tc, lam)
        assert np.allclose(nstar, (tc.counts - mean) / np.sqrt(mean), atol=1e-12)

    def test_unit_shift_value(self):
        # mean 100, count 110 -> (110-100)/10 = 1
        params = make_params(alpha=laplace_icdf_inverse_of(0.1))
        years = np.array([2000])
        exposure = np.full((1, 2, 1), 1000.0)  # E*m = 100
        deaths = np.full((1, 2, 1, 1), 110, dtype=np.int64)
        ds = MortalityDataset(years=years, deaths=deaths, exposure=exposure)
        tc = transform_iid(ds, params)
        nstar = normalize_counts(tc, np.zeros((0, 1)))
        assert np.allclose(nstar, 1.0, atol=1e-12)

    def test_positive_lambda_required(self):
        params = make_params(alpha=-2.5, K=1, sigma2=[0.04])
        years = np.arange(2000, 2002)
        ds = synth_generate(params, np.full((1, 2), 1000.0), years, seed=0)
        tc = transform_iid(ds, params)
        with pytest.raises(ValueError, match="positive"):
            normalize_counts(tc, np.zeros((1, 2)))

    def test_large_exposure_clt(self):
        # conditional CLT: normalized counts approach a standard normal
        params = make_params(alpha=-2.5, K=1, sigma2=[0.0], u=[[[0.0, 0.0]]])
        years = np.arange(2000, 3000)
        ds = synth_generate(params, np.full((1, 2), 1_000_000.0), years, seed=5)
        tc = transform_iid(ds, params)
        nstar = normalize_counts(tc, np.ones((1, years.size)))
        sample = nstar.ravel()  # 4000 draws
        d, _ = stats.kstest(sample, "norm")
        assert d < 0.05


def laplace_icdf_inverse_of(m):
    from ecrp import laplace_icdf

    return laplace_icdf(m)


class TestSynthGenerate:
    def test_degenerate_factor_is_poisson(self):
        params = make_params(alpha=-2.5, K=0)
        years = np.arange(2000, 2000 + 20_000)
        ds = synth_generate(params, np.full((1, 2), 1000.0), years, seed=1)
        from ecrp import central_death_rate

        mean = 1000.0 * central_death_rate(params, [2000])[0, 0, 0]
        x = ds.deaths[0, 0, 0].astype(float)
        assert x.mean() == pytest.approx(mean, abs=4 * np.sqrt(mean / x.size))
        # Poisson: variance equals mean
        assert x.var() / x.mean() == pytest.approx(1.0, abs=0.05)

    def test_seed_determinism(self):
        params = make_params(alpha=-2.5, K=2, sigma2=[0.02, 0.05])
        years = np.arange(2000, 2010)
        a = synth_generate(params, np.full((1, 2), 1000.0), years, seed=7)
        b = synth_generate(params, np.full((1, 2), 1000.0), years, seed=7)
        assert np.array_equal(a.deaths, b.deaths)
        c = synth_generate(params, np.full((1, 2), 1000.0), years, seed=8)
        assert not np.array_equal(a.deaths, c.deaths)

    def test_cell_means_match_intensity(self):
        # unconditional mean is E*m*w since factors have unit mean
        params = make_params(alpha=-2.5, K=1, sigma2=[0.09])
        years = np.arange(2000, 2000 + 10_000)
        ds = synth_generate(params, np.full((1, 2), 2000.0), years, seed=2)
        from ecrp import cause_weights, central_death_rate

        m = central_death_rate(params, [2000])[0, 0, 0]
        w = cause_weights(params, [2000])[0, 0, :, 0]
        for k in range(2):
            x = ds.deaths[0, 0, k].astype(float)
            se = x.std() / np.sqrt(x.size)
            assert abs(x.mean() - 2000.0 * m * w[k]) < 3.5 * se
