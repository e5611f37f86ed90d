"""Extrapolation to advanced ages, curve blending, and summaries.

Extrapolation pushes each posterior draw through the evolution equation
beyond the last fitted age. The state innovation variance keeps growing
the way the discount construction implies: a running covariance starts
at the final filtered state covariance and is propagated and discounted
at every step, so uncertainty widens with the horizon even though no new
data arrive. Observational noise is added per draw from that draw's own
covariance matrix.

Blending mixes each population's extrapolated curve with the
cross-population average along a linear schedule, reaching full weight
at a terminal age. This encodes the belief that mortality differentials
fade at the oldest ages, and prevents implausible crossings from pure
trend extrapolation. The unblended path instead reports the first
extrapolated age at which the population median curves cross.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import death_probabilities
from .distributions import RngStream, _cov_factor, _sym
from .errors import DomainError, NumericalError
from .inference import _state_blocks, discounted_prior_cov, state_discounts
from .model import DiscountSchedule
from .sampler import PosteriorDraws

__all__ = [
    "ForecastConfig",
    "PredictiveSummary",
    "extrapolate",
    "blend_convergence",
    "first_crossing_age",
    "summarize_predictive",
]

_FORECAST_STREAM_KEY = 2**31 + 2

SCALES = ("log_rate", "rate", "death_prob")


@dataclass(frozen=True)
class ForecastConfig:
    """Extrapolation settings.

    ``delta`` overrides the discount factor used beyond the data; by
    default the factor in force at the last fitted age carries forward.
    ``blend="linear"`` requires a ``terminal_age`` at which population
    curves have fully converged to their cross-population average.
    """

    horizon: int
    terminal_age: int | None = None
    blend: str = "none"
    delta: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise DomainError(f"forecast horizon must be >= 1, got {self.horizon}")
        if self.blend not in ("none", "linear"):
            raise DomainError(f"blend must be 'none' or 'linear', got {self.blend!r}")
        if self.blend == "linear" and self.terminal_age is None:
            raise DomainError("linear blending needs a terminal age")
        if self.delta is not None and not (0.0 < self.delta <= 1.0):
            raise DomainError(f"extrapolation discount must lie in (0, 1], got {self.delta!r}")


def extrapolate(
    draws: PosteriorDraws,
    config: ForecastConfig,
    schedule: DiscountSchedule | None = None,
    rng: RngStream | None = None,
) -> np.ndarray:
    """Predictive log-rate draws at the ages beyond the fitted range.

    Returns shape (draws, populations, horizon) for ages
    ``last_age + 1 .. last_age + horizon``. Uses the discount factor from
    ``config.delta`` or, failing that, the one the ``schedule`` has in
    force at the last fitted age.
    """
    spec = draws.spec
    last_age = int(draws.ages[-1])
    if config.terminal_age is not None and config.terminal_age < last_age:
        raise DomainError(
            f"terminal age {config.terminal_age} precedes the last fitted age {last_age}"
        )
    if config.delta is not None:
        deltas = np.full(spec.state_dim, float(config.delta))
    elif schedule is not None:
        deltas = state_discounts(spec, schedule, last_age)
    else:
        raise DomainError("extrapolation needs either an explicit delta or the fit's schedule")
    if rng is None:
        rng = RngStream(draws.config.seed).child(_FORECAST_STREAM_KEY)

    gmat = spec.evo_matrix
    fmat = spec.obs_matrix
    blocks = _state_blocks(spec)
    block_discount = draws.config.block_discount

    # The innovation covariances do not depend on the draw, so build the
    # whole sequence once from the final filtered state covariance.
    factors = []
    running = _sym(draws.final_cov)
    for _ in range(config.horizon):
        propagated = _sym(gmat @ running @ gmat.T)
        inflated = discounted_prior_cov(
            propagated, deltas, block_discount=block_discount, blocks=blocks
        )
        factors.append(_cov_factor(inflated - propagated))
        running = inflated

    nd = draws.n_draws
    npop = spec.n_populations
    obs_factors = np.linalg.cholesky(draws.obs_cov)
    state = draws.states[:, -1, :].copy()
    out = np.empty((nd, npop, config.horizon))
    for h in range(config.horizon):
        z = rng.gen.standard_normal((nd, spec.state_dim))
        state = state @ gmat.T + z @ factors[h].T
        eps = rng.gen.standard_normal((nd, npop))
        noise = np.einsum("djk,dk->dj", obs_factors, eps)
        out[:, :, h] = state @ fmat.T + noise
    if not np.all(np.isfinite(out)):
        raise NumericalError("extrapolation produced non-finite draws")
    return out


def blend_convergence(
    extrapolated: np.ndarray,
    ages: np.ndarray,
    last_fit_age: int,
    config: ForecastConfig,
) -> np.ndarray:
    """Mix population curves toward their average along the horizon.

    ``extrapolated`` has shape (draws, populations, ages) over the given
    extrapolated ages. Weight on the average grows linearly from zero at
    the last fitted age to one at the terminal age and stays there, so
    all populations emit exactly the average from the terminal age on.
    Single-population draws are returned unchanged with a warning.
    """
    ext = np.asarray(extrapolated, dtype=float)
    ages = np.asarray(ages, dtype=int)
    if config.blend == "none":
        return ext.copy()
    if ext.shape[1] < 2:
        warnings.warn("blending is a no-op with a single population", stacklevel=2)
        return ext.copy()
    terminal = int(config.terminal_age)
    if terminal < last_fit_age:
        raise DomainError(
            f"terminal age {terminal} precedes the last fitted age {last_fit_age}"
        )
    span = terminal - last_fit_age
    if span <= 0:
        weight = np.ones(ages.size)
    else:
        weight = np.clip((ages - last_fit_age) / span, 0.0, 1.0)
    average = ext.mean(axis=1, keepdims=True)
    return (1.0 - weight) * ext + weight * average


def first_crossing_age(median_curves: np.ndarray, ages: np.ndarray) -> int | None:
    """First age at which any two population median curves swap order.

    ``median_curves`` is (populations, ages); the first column is the
    reference ordering (typically the last fitted age), and the returned
    age is the first later column whose pairwise ordering differs. None
    when no pair crosses or with fewer than two populations.
    """
    curves = np.asarray(median_curves, dtype=float)
    ages = np.asarray(ages, dtype=int)
    npop, n = curves.shape
    if npop < 2 or n < 2:
        return None
    for k in range(1, n):
        for i in range(npop):
            for j in range(i + 1, npop):
                before = np.sign(curves[i, k - 1] - curves[j, k - 1])
                now = np.sign(curves[i, k] - curves[j, k])
                if before != 0 and now != 0 and before != now:
                    return int(ages[k])
    return None


@dataclass(frozen=True)
class PredictiveSummary:
    """Predictive summaries on the log-rate, rate, and probability scales.

    Quantiles are computed once on the log-rate draws and mapped through
    the strictly increasing transforms, so the three scales always agree
    about which draws sit in the tails. Means are computed per scale.
    """

    populations: tuple[str, ...]
    ages: np.ndarray
    levels: tuple[float, float]
    log_mean: np.ndarray
    log_median: np.ndarray
    log_lower: np.ndarray
    log_upper: np.ndarray
    rate_mean: np.ndarray
    rate_median: np.ndarray
    rate_lower: np.ndarray
    rate_upper: np.ndarray
    prob_mean: np.ndarray
    prob_median: np.ndarray
    prob_lower: np.ndarray
    prob_upper: np.ndarray

    def scale(self, name: str):
        """(mean, median, lower, upper) arrays for one output scale."""
        if name == "log_rate":
            return (self.log_mean, self.log_median, self.log_lower, self.log_upper)
        if name == "rate":
            return (self.rate_mean, self.rate_median, self.rate_lower, self.rate_upper)
        if name == "death_prob":
            return (self.prob_mean, self.prob_median, self.prob_lower, self.prob_upper)
        raise DomainError(f"unknown scale {name!r}; choose from {SCALES}")


def summarize_predictive(
    log_rate_draws: np.ndarray,
    populations,
    ages: np.ndarray,
    levels: tuple[float, float] = (0.025, 0.975),
) -> PredictiveSummary:
    """Summarise predictive log-rate draws on all three output scales.

    ``log_rate_draws`` is (draws, populations, ages) covering fitted and
    extrapolated ages alike.
    """
    lo, hi = float(levels[0]), float(levels[1])
    if not 0.0 < lo < hi < 1.0:
        raise DomainError(f"quantile levels must satisfy 0 < lower < upper < 1, got {levels}")
    draws = np.asarray(log_rate_draws, dtype=float)
    if draws.ndim != 3:
        raise DomainError(f"predictive draws must be 3-dimensional, got shape {draws.shape}")
    if not np.all(np.isfinite(draws)):
        raise DomainError("predictive draws contain non-finite values")
    populations = tuple(str(p) for p in populations)
    ages = np.asarray(ages, dtype=int)
    if draws.shape[1] != len(populations) or draws.shape[2] != ages.size:
        raise DomainError(
            f"draw block {draws.shape} does not match {len(populations)} populations "
            f"and {ages.size} ages"
        )

    log_median = np.quantile(draws, 0.5, axis=0)
    log_lower = np.quantile(draws, lo, axis=0)
    log_upper = np.quantile(draws, hi, axis=0)
    log_mean = draws.mean(axis=0)
    rate_draws = np.exp(draws)
    prob_draws = death_probabilities(draws)
    summary = PredictiveSummary(
        populations=populations,
        ages=ages.copy(),
        levels=(lo, hi),
        log_mean=log_mean,
        log_median=log_median,
        log_lower=log_lower,
        log_upper=log_upper,
        rate_mean=rate_draws.mean(axis=0),
        rate_median=np.exp(log_median),
        rate_lower=np.exp(log_lower),
        rate_upper=np.exp(log_upper),
        prob_mean=prob_draws.mean(axis=0),
        prob_median=death_probabilities(log_median),
        prob_lower=death_probabilities(log_lower),
        prob_upper=death_probabilities(log_upper),
    )
    for name in SCALES:
        _, med, low, up = summary.scale(name)
        if np.any(low > med) or np.any(med > up):
            raise NumericalError(f"quantile ordering violated on the {name} scale")
    if np.any(summary.prob_lower <= 0.0) or np.any(summary.prob_upper >= 1.0):
        raise NumericalError("death probabilities left the open unit interval")
    return summary
