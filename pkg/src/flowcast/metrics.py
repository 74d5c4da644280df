"""Nash-Sutcliffe efficiency, training losses, and per-basin summary statistics.

The NSE coefficient is the primary skill score for daily discharge
simulations: 1 is a perfect fit, 0 matches the predictive skill of the
observed mean, negative values are worse than the mean.  All metrics here
respect observation masks; masked-out timesteps are never read.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    """Base class for metric evaluation failures."""


class InsufficientDataError(MetricError):
    """Fewer observed points than the metric requires."""


class DegenerateVarianceError(MetricError):
    """Observed series has zero variance; the NSE denominator is undefined."""


@dataclass
class MaskedSeries:
    """A discharge series (m3/s) with a per-timestep observation mask.

    ``mask[t]`` is True where the value was actually observed.  Masked-out
    entries are placeholders and must never influence a metric.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 1 or self.mask.shape != self.values.shape:
            raise ValueError(
                f"values and mask must be equal-length 1-D arrays, got "
                f"{self.values.shape} and {self.mask.shape}"
            )

    def __len__(self) -> int:
        return self.values.size

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def observed_values(self) -> np.ndarray:
        return self.values[self.mask]

    @classmethod
    def fully_observed(cls, values) -> "MaskedSeries":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))


@dataclass(frozen=True)
class BasinNormStats:
    """Training-period discharge statistics for one basin.

    ``var_obs`` is the population variance of the observed discharge over
    the basin's training period; ``epsilon`` stabilises the normalised loss
    denominator for near-constant low-flow basins.
    """

    mean_obs: float
    var_obs: float
    epsilon: float = 0.1

    def __post_init__(self):
        if self.var_obs < 0:
            raise ValueError(f"var_obs must be >= 0, got {self.var_obs}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    @property
    def denominator(self) -> float:
        return self.var_obs + self.epsilon

    @classmethod
    def from_series(cls, series: MaskedSeries, epsilon: float = 0.1) -> "BasinNormStats":
        obs = series.observed_values
        if obs.size < 1:
            raise InsufficientDataError("need at least one observed value for basin stats")
        return cls(mean_obs=float(obs.mean()), var_obs=float(obs.var()), epsilon=epsilon)


# Column order used everywhere a summary is serialized.
SUMMARY_COLUMNS = ("median", "mean", "max", "min", "std", "count_positive")


@dataclass(frozen=True)
class NseSummary:
    """The six summary statistics over a set of per-basin NSE values."""

    median: float
    mean: float
    max: float
    min: float
    std: float
    count_positive: int

    def as_row(self) -> tuple:
        return (self.median, self.mean, self.max, self.min, self.std, self.count_positive)

    def as_dict(self) -> dict:
        return dict(zip(SUMMARY_COLUMNS, self.as_row()))


def nse(sim, obs: MaskedSeries) -> float:
    """Nash-Sutcliffe efficiency of a simulation against masked observations.

    Computed as ``1 - sum((sim - obs)^2) / sum((obs - mean(obs))^2)`` over
    observed indices only.  Range (-inf, 1].

    Args:
        sim: simulated series, same length as ``obs``.
        obs: observed series with missingness mask.

    Raises:
        InsufficientDataError: fewer than 2 observed points.
        DegenerateVarianceError: observed values have zero variance.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape != obs.values.shape:
        raise ValueError(f"sim has shape {sim.shape}, obs has shape {obs.values.shape}")
    s = sim[obs.mask]
    o = obs.observed_values
    if o.size < 2:
        raise InsufficientDataError(f"need >= 2 observed points, got {o.size}")
    denom = float(np.sum((o - o.mean()) ** 2))
    if denom == 0.0:
        raise DegenerateVarianceError("observed series has zero variance")
    return float(1.0 - np.sum((s - o) ** 2) / denom)


def _normalized_sse(sim: np.ndarray, obs: np.ndarray, denom: np.ndarray):
    if sim.size == 0:
        raise InsufficientDataError("empty batch")
    if not (np.all(np.isfinite(sim)) and np.all(np.isfinite(obs))):
        raise ValueError("non-finite values in batch")
    n = sim.size
    resid = sim - obs
    loss = float(np.mean(resid**2 / denom))
    grad = 2.0 * resid / (denom * n)
    return loss, grad


def nse_loss(sim, obs, stats: Sequence[BasinNormStats]):
    """Basin-normalized squared-error loss and its gradient w.r.t. ``sim``.

    ``loss = (1/N) * sum_i (sim_i - obs_i)^2 / (var_obs(basin_i) + eps)``.
    Minimizing this is equivalent to maximizing the NSE of each basin
    (each squared error is weighted by the inverse observed variance of
    the sample's basin, so high-flow basins do not dominate).

    Returns:
        (loss, d_loss/d_sim) with the gradient per sample.
    """
    sim = np.asarray(sim, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if sim.shape != obs.shape or len(stats) != sim.size:
        raise ValueError("sim, obs and stats must have matching lengths")
    denom = np.array([s.denominator for s in stats], dtype=np.float64)
    return _normalized_sse(sim, obs, denom)


def nse_loss_from_variance(sim, obs, variance, epsilon: float):
    """Same as :func:`nse_loss` but with precomputed per-sample variances."""
    sim = np.asarray(sim, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    denom = np.asarray(variance, dtype=np.float64) + epsilon
    return _normalized_sse(sim, obs, denom)


def mse_loss(sim, obs):
    """Plain mean squared error and gradient; baseline alternative to nse_loss."""
    sim = np.asarray(sim, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if sim.shape != obs.shape:
        raise ValueError("sim and obs must have matching lengths")
    return _normalized_sse(sim, obs, np.ones_like(sim))


def summarize(nse_values) -> NseSummary:
    """Summary statistics over per-basin NSE values.

    Median of an even count is the mean of the two central values; the
    standard deviation is the population (ddof=0) one.
    """
    values = np.asarray(nse_values, dtype=np.float64)
    if values.size == 0:
        raise InsufficientDataError("cannot summarize an empty set of NSE values")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite NSE values")
    return NseSummary(
        median=float(np.median(values)),
        mean=float(values.mean()),
        max=float(values.max()),
        min=float(values.min()),
        std=float(values.std()),
        count_positive=int(np.sum(values > 0.0)),
    )
