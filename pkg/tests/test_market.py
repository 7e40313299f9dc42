import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from frbattery.market import (HOURS_PER_WEEK, HistoricalDataset, InsufficientData, PriceModels, SynthProfile,
                              ar1_uniform, fit_price_models, load_dataset, sample_week, save_dataset,
                              synth_generator)


def dataset_from(energy, fr, S=4, start="2021-01-04", seed=0):
    H = len(energy)
    ts = pd.date_range(start, periods=H, freq="h")
    alpha = np.random.default_rng(seed).uniform(-1, 1, (H, S))
    return HistoricalDataset(ts, energy, fr, alpha)


def test_constant_prices_give_zero_covariance():
    H = 8 * HOURS_PER_WEEK
    m = fit_price_models(dataset_from(np.full(H, 33.0), np.full(H, 20.0)))
    np.testing.assert_allclose(m.energy_mean_, 33.0)
    np.testing.assert_allclose(m.energy_cov_, 0.0, atol=1e-20)
    np.testing.assert_allclose(m.fr_median_, 20.0)
    np.testing.assert_allclose(m.fr_log_var_, 0.0, atol=1e-24)


def test_two_week_alternating_statistics():
    rng = np.random.default_rng(1)
    w1, w2 = rng.uniform(10, 50, HOURS_PER_WEEK), rng.uniform(10, 50, HOURS_PER_WEEK)
    f1, f2 = rng.uniform(5, 30, HOURS_PER_WEEK), rng.uniform(5, 30, HOURS_PER_WEEK)
    m = PriceModels(min_weeks=2).fit(dataset_from(np.r_[w1, w2], np.r_[f1, f2]))
    np.testing.assert_allclose(m.energy_mean_, (w1 + w2) / 2)
    # sample variance (ddof=1) of two values a, b is (a - b)^2 / 2
    # the PSD repair of this rank-one covariance reconstructs it from eigenpairs
    scale = np.abs(m.energy_cov_).max()
    np.testing.assert_allclose(np.diag(m.energy_cov_), (w1 - w2) ** 2 / 2, rtol=1e-10, atol=1e-10 * scale)
    np.testing.assert_allclose(m.fr_median_, np.sqrt(f1 * f2), rtol=1e-12)
    np.testing.assert_allclose(m.fr_log_var_, (np.log(f1) - np.log(f2)) ** 2 / 2, rtol=1e-10)


def test_known_gaussian_mean_recovered():
    rng = np.random.default_rng(2)
    n_weeks = 60
    mu = 30 + 5 * np.sin(np.arange(HOURS_PER_WEEK) / 7)
    sd = rng.uniform(1, 4, HOURS_PER_WEEK)
    E = mu + sd * rng.standard_normal((n_weeks, HOURS_PER_WEEK))
    m = fit_price_models(dataset_from(E.ravel(), np.full(E.size, 10.0)), min_weeks=8)
    assert np.all(np.abs(m.energy_mean_ - mu) <= 3 * sd / np.sqrt(n_weeks))


def test_insufficient_weeks():
    H = 7 * HOURS_PER_WEEK
    with pytest.raises(InsufficientData):
        fit_price_models(dataset_from(np.ones(H), np.ones(H)))
    # a dataset that starts mid-week loses its partial first and last weeks
    H = 8 * HOURS_PER_WEEK
    with pytest.raises(InsufficientData):
        fit_price_models(dataset_from(np.ones(H), np.ones(H), start="2021-01-05"))


def test_degenerate_sampler_returns_means(small_synth):
    mean = np.linspace(10, 40, HOURS_PER_WEEK)
    med = np.linspace(5, 15, HOURS_PER_WEEK)
    m = PriceModels.from_arrays(mean, np.zeros((HOURS_PER_WEEK,) * 2), med, np.zeros(HOURS_PER_WEEK))
    pe, pf, al = sample_week(m, small_synth, 3)
    np.testing.assert_array_equal(pe, mean)
    np.testing.assert_array_equal(pf, med)
    assert al.shape == (HOURS_PER_WEEK, small_synth.S)


def test_sampled_alpha_rows_come_from_pool(small_synth):
    m = fit_price_models(small_synth)
    _, _, al = m.sample_week(small_synth, 11)
    pool = {row.tobytes() for row in small_synth.fr_signals}
    assert all(row.tobytes() in pool for row in al)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_samples_nonnegative_and_in_range(small_synth, seed):
    mean = np.full(HOURS_PER_WEEK, 2.0)   # low mean so truncation is exercised
    cov = 25.0 * np.eye(HOURS_PER_WEEK)
    m = PriceModels.from_arrays(mean, cov, np.full(HOURS_PER_WEEK, 3.0), np.full(HOURS_PER_WEEK, 2.0))
    pe, pf, al = m.sample_week(small_synth, seed)
    assert np.all(pe >= 0) and np.all(pf >= 0)
    assert np.all(np.abs(al) <= 1)


def test_monte_carlo_energy_mean(small_synth):
    rng = np.random.default_rng(6)
    B = rng.normal(size=(HOURS_PER_WEEK, 20))
    mean = rng.uniform(25, 40, HOURS_PER_WEEK)
    m = PriceModels.from_arrays(mean, B @ B.T / 10, np.full(HOURS_PER_WEEK, 10.0), np.zeros(HOURS_PER_WEEK))
    n = 10_000
    draws = np.array([m.sample_week(small_synth, s)[0] for s in range(n)])
    sd = np.sqrt(np.diag(m.energy_cov_))
    assert np.all(mean - 5 * sd > 0)   # truncation is negligible here
    se = sd / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - m.energy_mean_) <= 4 * se + 1e-12)


def test_seeded_determinism():
    p = SynthProfile(n_weeks=2, S=30)
    a, b = synth_generator(p, 99), synth_generator(p, 99)
    for k in ("energy_prices", "fr_prices", "fr_signals"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    m = fit_price_models(synth_generator(SynthProfile(n_weeks=8, S=30), 5))
    x, y = m.sample_week(a, 17), m.sample_week(a, 17)
    for u, v in zip(x, y):
        assert np.array_equal(u, v)


def test_noiseless_profile_is_periodic():
    p = SynthProfile(n_weeks=3, S=10, e_noise=0, f_noise=0)
    h = synth_generator(p, 0)
    e = h.energy_prices.reshape(3, HOURS_PER_WEEK)
    f = h.fr_prices.reshape(3, HOURS_PER_WEEK)
    assert np.array_equal(e[0], e[1]) and np.array_equal(e[1], e[2])
    assert np.array_equal(f[0], f[2])
    assert np.array_equal(synth_generator(p, 0).energy_prices, synth_generator(p, 1).energy_prices)


def test_iid_signal_when_rho_zero():
    x = ar1_uniform(100_000, 0.0, np.random.default_rng(4))
    assert x.min() >= -1 and x.max() <= 1
    r = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(r) < 0.05
    # marginals are uniform: quartiles near -0.5, 0, 0.5
    np.testing.assert_allclose(np.quantile(x, [0.25, 0.5, 0.75]), [-0.5, 0, 0.5], atol=0.02)


def test_ar1_dependence_is_positive():
    x = ar1_uniform(50_000, 0.8, np.random.default_rng(4))
    assert np.corrcoef(x[:-1], x[1:])[0, 1] > 0.6


def test_generated_year_pipeline_closure():
    h = synth_generator(SynthProfile(n_weeks=52, S=6), 8)
    assert h.n_hours == 52 * HOURS_PER_WEEK
    assert np.all(h.energy_prices >= 0) and np.all(h.fr_prices >= 0)
    assert np.all(np.abs(h.fr_signals) <= 1)
    m = fit_price_models(h)
    assert m.n_weeks_ == 52
    m2 = PriceModels.from_dict(m.to_dict())
    for u, v in zip(m.sample_week(h, 3), m2.sample_week(h, 3)):
        assert np.array_equal(u, v)


def test_psd_repair_is_tiny():
    # fewer weeks than hours gives a rank-deficient covariance with round-off negatives
    h = synth_generator(SynthProfile(n_weeks=10, S=4), 21)
    m = fit_price_models(h)
    lam_raw = np.linalg.eigvalsh(np.cov(h.energy_prices.reshape(10, -1), rowvar=False))
    lam_fix = np.linalg.eigvalsh(m.energy_cov_)
    assert np.max(np.abs(np.sort(lam_raw) - np.sort(lam_fix))) <= 1e-10 * max(1, lam_raw.max())
    assert lam_fix.min() >= -1e-10 * lam_raw.max()


def test_csv_round_trip(tmp_path, small_synth):
    part = small_synth.slice_hours(0, 30)
    paths = save_dataset(part, tmp_path)
    back = load_dataset(paths["energy_prices"], paths["fr_prices"], paths["fr_signals"])
    assert back.timestamps.equals(part.timestamps)
    assert np.array_equal(back.energy_prices, part.energy_prices)
    assert np.array_equal(back.fr_signals, part.fr_signals)
    head = (tmp_path / "fr_signals.csv").read_text().splitlines()[0]
    assert head == "timestamp,step,alpha"


def test_csv_validation(tmp_path, small_synth):
    paths = save_dataset(small_synth.slice_hours(0, 5), tmp_path)
    df = pd.read_csv(paths["fr_signals"]).iloc[:-1]
    df.to_csv(paths["fr_signals"], index=False)
    with pytest.raises(ValueError, match="missing"):
        load_dataset(paths["energy_prices"], paths["fr_prices"], paths["fr_signals"])
    pd.DataFrame({"timestamp": [], "oops": []}).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(ValueError, match="missing columns"):
        load_dataset(tmp_path / "bad.csv", paths["fr_prices"], paths["fr_signals"])


def test_dataset_validation_and_clipping():
    ts = pd.date_range("2021-01-04", periods=2, freq="h")
    h = HistoricalDataset(ts, [1.0, 2.0], [1.0, 1.0], [[1.5, -2.0], [0.0, 0.3]])
    assert h.fr_signals.max() == 1.0 and h.fr_signals.min() == -1.0
    with pytest.raises(ValueError):
        HistoricalDataset(ts, [1.0], [1.0, 1.0], [[0.0], [0.0]])
    with pytest.raises(ValueError):
        HistoricalDataset(ts, [np.nan, 1.0], [1.0, 1.0], [[0.0], [0.0]])
