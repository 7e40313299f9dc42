"""Historical market data, weekly price models and synthetic scenario generation.

Energy prices are modelled as one 168-dimensional Gaussian per week
(hour-of-week mean and covariance). FR capacity prices are log-normal per
hour of week. FR signals are never modelled parametrically: forecasts
resample whole hourly signal vectors from a historical pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

HOURS_PER_WEEK = 168
PSD_TOL = 1e-10
FR_PRICE_FLOOR = 1e-2  # $/MW, applied before taking logs


class InsufficientData(ValueError):
    """Fewer complete weeks than the price models require."""


@dataclass
class HistoricalDataset:
    """Aligned hourly market series.

    ``fr_signals`` has one row of S regulation fractions per hour and is
    clipped to [-1, 1] on construction.
    """

    timestamps: pd.DatetimeIndex
    energy_prices: np.ndarray
    fr_prices: np.ndarray
    fr_signals: np.ndarray

    def __post_init__(self):
        self.timestamps = pd.DatetimeIndex(self.timestamps)
        self.energy_prices = np.asarray(self.energy_prices, dtype=float).ravel()
        self.fr_prices = np.asarray(self.fr_prices, dtype=float).ravel()
        self.fr_signals = np.clip(np.atleast_2d(np.asarray(self.fr_signals, dtype=float)), -1.0, 1.0)
        n = len(self.timestamps)
        if not (self.energy_prices.size == self.fr_prices.size == self.fr_signals.shape[0] == n):
            raise ValueError("timestamps, prices and signals must have the same number of hours")
        if n == 0:
            raise ValueError("dataset is empty")
        for name in ("energy_prices", "fr_prices", "fr_signals"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_hours(self) -> int:
        return self.energy_prices.size

    @property
    def S(self) -> int:
        return self.fr_signals.shape[1]

    def hour_of_week(self) -> np.ndarray:
        return (self.timestamps.dayofweek * 24 + self.timestamps.hour).to_numpy()

    def weekly_windows(self) -> np.ndarray:
        """Start indices of complete, contiguous Monday-00:00 weeks."""
        how = self.hour_of_week()
        ts = self.timestamps.asi8
        hour_ns = 3600 * 10**9
        starts = []
        i = 0
        n = self.n_hours
        while i + HOURS_PER_WEEK <= n:
            if how[i] != 0:
                i += 1
                continue
            seg = ts[i:i + HOURS_PER_WEEK]
            if np.all(np.diff(seg) == hour_ns):
                starts.append(i)
                i += HOURS_PER_WEEK
            else:
                i += 1
        return np.asarray(starts, dtype=np.int64)

    def slice_hours(self, start: int, stop: int) -> "HistoricalDataset":
        return HistoricalDataset(self.timestamps[start:stop], self.energy_prices[start:stop],
                                 self.fr_prices[start:stop], self.fr_signals[start:stop])


def _fmt_ts(ts: pd.DatetimeIndex) -> np.ndarray:
    return ts.strftime("%Y-%m-%d %H:%M:%S").to_numpy()


def save_dataset(h: HistoricalDataset, directory) -> dict:
    """Write the three CSV files; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ts = _fmt_ts(h.timestamps)
    paths = {
        "energy_prices": d / "energy_prices.csv",
        "fr_prices": d / "fr_prices.csv",
        "fr_signals": d / "fr_signals.csv",
    }
    pd.DataFrame({"timestamp": ts, "price_mwh": h.energy_prices}).to_csv(
        paths["energy_prices"], index=False, float_format="%.17g")
    pd.DataFrame({"timestamp": ts, "price_mw": h.fr_prices}).to_csv(
        paths["fr_prices"], index=False, float_format="%.17g")
    S = h.S
    pd.DataFrame({
        "timestamp": np.repeat(ts, S),
        "step": np.tile(np.arange(1, S + 1), h.n_hours),
        "alpha": h.fr_signals.ravel(),
    }).to_csv(paths["fr_signals"], index=False, float_format="%.17g")
    return paths


def load_dataset(energy_csv, fr_csv, signals_csv) -> HistoricalDataset:
    """Read the CSV schema written by :func:`save_dataset`.

    energy: ``timestamp,price_mwh``; FR prices: ``timestamp,price_mw``;
    FR signals: ``timestamp,step,alpha`` with step running 1..S every hour.
    """
    e = pd.read_csv(energy_csv, float_precision="round_trip")
    f = pd.read_csv(fr_csv, float_precision="round_trip")
    s = pd.read_csv(signals_csv, float_precision="round_trip")
    for df, cols, name in ((e, ["timestamp", "price_mwh"], energy_csv), (f, ["timestamp", "price_mw"], fr_csv),
                           (s, ["timestamp", "step", "alpha"], signals_csv)):
        missing = set(cols) - set(df.columns)
        if missing:
            raise ValueError(f"{name}: missing columns {sorted(missing)}")
    te = pd.DatetimeIndex(pd.to_datetime(e["timestamp"]))
    tf = pd.DatetimeIndex(pd.to_datetime(f["timestamp"]))
    if not te.equals(tf):
        raise ValueError("energy and FR price timestamps differ")
    s = s.assign(timestamp=pd.to_datetime(s["timestamp"]))
    S = int(s["step"].max())
    if int(s["step"].min()) != 1:
        raise ValueError("FR signal steps must start at 1")
    wide = s.pivot(index="timestamp", columns="step", values="alpha")
    wide = wide.reindex(index=te, columns=range(1, S + 1))
    if wide.isna().to_numpy().any():
        raise ValueError("FR signals are missing steps or hours")
    return HistoricalDataset(te, e["price_mwh"].to_numpy(float), f["price_mw"].to_numpy(float), wide.to_numpy())


class PriceModels(BaseEstimator):
    """Weekly Gaussian energy-price model and per-hour log-normal FR-price model.

    Parameters
    ----------
    min_weeks : int
        Minimum number of complete weeks required by :meth:`fit`.

    Attributes
    ----------
    energy_mean_ : (168,) hour-of-week mean of energy prices
    energy_cov_ : (168, 168) sample covariance across weeks (PSD)
    fr_median_ : (168,) exp of the mean log FR price per hour of week
    fr_log_var_ : (168,) sample variance of log FR prices per hour of week
    """

    def __init__(self, min_weeks: int = 8):
        self.min_weeks = min_weeks

    def fit(self, h: HistoricalDataset, y=None):
        starts = h.weekly_windows()
        if starts.size < max(int(self.min_weeks), 2):
            raise InsufficientData(f"need {max(int(self.min_weeks), 2)} complete weeks, found {starts.size}")
        idx = starts[:, None] + np.arange(HOURS_PER_WEEK)[None, :]
        E = h.energy_prices[idx]
        logF = np.log(np.maximum(h.fr_prices[idx], FR_PRICE_FLOOR))
        self.energy_mean_ = E.mean(axis=0)
        cov = np.cov(E, rowvar=False, ddof=1)
        cov = 0.5 * (cov + cov.T)
        lam, vec = np.linalg.eigh(cov)
        if lam.min() < -PSD_TOL * max(1.0, abs(lam).max()):
            raise ValueError(f"energy covariance has eigenvalue {lam.min():.3g}, not repairable as PSD")
        if (lam < 0).any():
            cov = (vec * np.maximum(lam, 0.0)) @ vec.T
        self._set_energy_cov(cov)
        self.fr_median_ = np.exp(logF.mean(axis=0))
        self.fr_log_var_ = logF.var(axis=0, ddof=1)
        self.n_weeks_ = int(starts.size)
        return self

    def _set_energy_cov(self, cov):
        # the sampler always factors the stored matrix, so a model rebuilt
        # from its saved arrays draws exactly the same weeks
        self.energy_cov_ = cov
        lam, vec = np.linalg.eigh(0.5 * (cov + cov.T))
        self.energy_eig_ = (np.maximum(lam, 0.0), vec)

    @classmethod
    def from_arrays(cls, energy_mean, energy_cov, fr_median, fr_log_var) -> "PriceModels":
        m = cls()
        m.energy_mean_ = np.asarray(energy_mean, dtype=float)
        m._set_energy_cov(np.asarray(energy_cov, dtype=float))
        m.fr_median_ = np.asarray(fr_median, dtype=float)
        m.fr_log_var_ = np.maximum(np.asarray(fr_log_var, dtype=float), 0.0)
        m.n_weeks_ = 0
        return m

    def sample_week(self, pool: HistoricalDataset, random_state=None):
        """One week of (pi_e[168], pi_f[168], alpha[168, S]).

        Energy prices are Gaussian truncated at zero, FR prices log-normal,
        and each hour's FR signal is a uniformly drawn hourly vector of `pool`.
        """
        check_is_fitted(self, "energy_mean_")
        rng = np.random.default_rng(random_state)
        lam, vec = self.energy_eig_
        z_e = rng.standard_normal(HOURS_PER_WEEK)
        z_f = rng.standard_normal(HOURS_PER_WEEK)
        idx = rng.integers(0, pool.n_hours, size=HOURS_PER_WEEK)
        pi_e = np.maximum(self.energy_mean_ + vec @ (np.sqrt(lam) * z_e), 0.0)
        pi_f = self.fr_median_ * np.exp(np.sqrt(self.fr_log_var_) * z_f)
        alpha = pool.fr_signals[idx].copy()
        return pi_e, pi_f, alpha

    def to_dict(self) -> dict:
        check_is_fitted(self, "energy_mean_")
        return {
            "energy_mean": self.energy_mean_.tolist(),
            "energy_cov": self.energy_cov_.tolist(),
            "fr_median": self.fr_median_.tolist(),
            "fr_log_var": self.fr_log_var_.tolist(),
            "n_weeks": self.n_weeks_,
        }

    @classmethod
    def from_dict(cls, d) -> "PriceModels":
        m = cls.from_arrays(d["energy_mean"], d["energy_cov"], d["fr_median"], d["fr_log_var"])
        m.n_weeks_ = int(d.get("n_weeks", 0))
        return m


def fit_price_models(h: HistoricalDataset, min_weeks: int = 8) -> PriceModels:
    return PriceModels(min_weeks=min_weeks).fit(h)


def sample_week(m: PriceModels, pool: HistoricalDataset, seed):
    return m.sample_week(pool, seed)


@dataclass
class SynthProfile:
    """Shape of the synthetic market. Prices in $/MWh (energy) and $/MW (FR)."""

    n_weeks: int = 52
    S: int = 1800
    start: str = "2021-01-04 00:00:00"  # a Monday
    e_base: float = 30.0
    e_daily_amp: float = 10.0
    e_weekly_amp: float = 4.0
    e_noise: float = 4.0
    f_base: float = 25.0
    f_daily_amp: float = 0.25   # log units
    f_weekly_amp: float = 0.1   # log units
    f_noise: float = 0.25       # log-normal sigma
    alpha_rho: float = 0.5      # lag-1 correlation of the latent Gaussian per step
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n_weeks < 1 or self.S < 1:
            raise ValueError("n_weeks and S must be >= 1")
        if not (-1.0 < self.alpha_rho < 1.0):
            raise ValueError("alpha_rho must lie in (-1, 1)")
        if min(self.e_noise, self.f_noise) < 0:
            raise ValueError("noise scales must be >= 0")


def ar1_uniform(n: int, rho: float, rng) -> np.ndarray:
    """Uniform[-1, 1] marginals with AR(1) latent Gaussian dependence."""
    eps = rng.standard_normal(n)
    if rho == 0.0 or n == 1:
        z = eps
    else:
        s = np.sqrt(1.0 - rho * rho)
        z = np.empty(n)
        z[0] = eps[0]
        z[1:] = lfilter([s], [1.0, -rho], eps[1:], zi=[rho * eps[0]])[0]
    return 2.0 * ndtr(z) - 1.0


def synth_generator(profile: SynthProfile, seed) -> HistoricalDataset:
    """Synthetic year (or any number of weeks) with weekly price periodicity."""
    rng = np.random.default_rng(seed)
    H = profile.n_weeks * HOURS_PER_WEEK
    ts = pd.date_range(profile.start, periods=H, freq="h")
    t = np.arange(H)
    hod = t % 24
    dow = (t // 24) % 7
    daily = np.sin(2 * np.pi * (hod - 8) / 24.0)
    weekday = np.where(dow < 5, 1.0, -1.0)
    z_e = rng.standard_normal(H)
    z_f = rng.standard_normal(H)
    energy = profile.e_base + profile.e_daily_amp * daily + profile.e_weekly_amp * weekday + profile.e_noise * z_e
    energy = np.maximum(energy, 0.0)
    logf = (np.log(profile.f_base) + profile.f_daily_amp * daily + profile.f_weekly_amp * weekday
            + profile.f_noise * z_f)
    fr = np.exp(logf)
    alpha = ar1_uniform(H * profile.S, float(profile.alpha_rho), rng).reshape(H, profile.S)
    return HistoricalDataset(ts, energy, fr, alpha)
