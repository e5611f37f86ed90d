"""Gibbs sampler cycling states, observational precision, missing cells.

Each sweep draws, in order:

1. the full state trajectory given the current observational covariance
   and the completed log-rate panel (forward filter, backward sample);
2. the observational precision given the states, from its conjugate
   Wishart update on the residuals of the completed panel;
3. every missing cell given the states and the refreshed covariance,
   from the normal conditional on the observed cells of the same age.

Chains run a fixed iteration budget set up front; convergence is
reported afterwards through split-chain shrink factors and effective
sample sizes rather than by stopping early.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RateSurface
from .distributions import (
    RngStream,
    _sym,
    mvn_sample,
    psd_inverse,
    psd_solve,
    wishart_mean,
    wishart_sample,
)
from .errors import DomainError, NumericalError
from .inference import backward_sample, forward_filter
from .model import DiscountSchedule, DlmSpec, WishartPrior

__all__ = [
    "GibbsConfig",
    "PosteriorDraws",
    "FitSummary",
    "initialize_missing",
    "sample_phi",
    "impute_missing",
    "run_gibbs",
    "summarize",
    "split_rhat",
    "effective_sample_size",
]

# Keyed child streams derived from the run seed; large offsets so they
# can never collide with the per-chain split streams.
_SUMMARY_STREAM_KEY = 2**31 + 1


@dataclass(frozen=True)
class GibbsConfig:
    """Iteration budget and reproducibility settings for one run."""

    iterations: int = 2000
    burn_in: int = 500
    thin: int = 1
    chains: int = 1
    seed: int = 1
    block_discount: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 <= self.burn_in < self.iterations:
            raise DomainError(
                f"burn-in must lie in [0, iterations), got {self.burn_in} of {self.iterations}"
            )
        if self.thin < 1:
            raise DomainError(f"thinning must be >= 1, got {self.thin}")
        if self.chains < 1:
            raise DomainError(f"chain count must be >= 1, got {self.chains}")

    @property
    def draws_per_chain(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass
class PosteriorDraws:
    """Pooled posterior draws from every chain, in chain order.

    ``states`` has shape (draws, ages + 1, state_dim) with age index 0
    holding the pre-observation state. ``missing_values`` columns follow
    the row-major order of True cells in ``missing_mask``.
    """

    spec: DlmSpec
    config: GibbsConfig
    ages: np.ndarray
    states: np.ndarray
    precision: np.ndarray
    obs_cov: np.ndarray
    missing_values: np.ndarray
    missing_mask: np.ndarray
    final_cov: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.states.shape[0]

    @property
    def populations(self) -> tuple[str, ...]:
        return self.spec.populations

    def fitted_log_rates(self) -> np.ndarray:
        """Per-draw fitted log rates, shape (draws, populations, ages)."""
        eta = self.states[:, 1:, :] @ self.spec.obs_matrix.T
        return np.transpose(eta, (0, 2, 1))


def initialize_missing(surface: RateSurface) -> RateSurface:
    """Fill missing cells by linear interpolation along age.

    Each population is interpolated between its observed log rates, with
    runs at either boundary extended at a constant level. Used only to
    start the sampler; every later sweep replaces these values by draws
    from the model's conditional.
    """
    filled = surface.log_rates.copy()
    positions = np.arange(surface.ages.size)
    for i, pop in enumerate(surface.populations):
        observed = ~surface.missing[i]
        if observed.sum() < 2:
            raise DomainError(
                f"population {pop!r} has {int(observed.sum())} observed ages; need at least 2"
            )
        if observed.all():
            continue
        filled[i] = np.interp(positions, positions[observed], surface.log_rates[i, observed])
    return RateSurface(
        populations=surface.populations,
        ages=surface.ages,
        log_rates=filled,
        missing=np.zeros_like(surface.missing),
    )


def sample_phi(
    states: np.ndarray,
    log_rates: np.ndarray,
    spec: DlmSpec,
    prior: WishartPrior,
    rng: RngStream,
) -> np.ndarray:
    """Draw the observational precision given states and completed panel.

    The conjugate update adds half the residual cross-product to the
    prior rate and half the panel length to the prior shape.
    """
    n = log_rates.shape[1]
    if states.shape[0] != n + 1:
        raise DomainError(
            f"state trajectory covers {states.shape[0] - 1} ages, panel has {n}"
        )
    fitted = states[1:] @ spec.obs_matrix.T
    resid = log_rates - fitted.T
    ss = resid @ resid.T
    return wishart_sample(prior.df0 + n / 2.0, prior.rate0 + 0.5 * ss, rng)


def conditional_normal(cov: np.ndarray, observed_idx, target_idx):
    """Gain and conditional covariance of targets given observed coords.

    For a joint normal with covariance ``cov``, the targets conditional
    on the observed block have mean offset ``gain @ (y_obs - mean_obs)``
    and covariance ``cond_cov``.
    """
    obs = np.asarray(observed_idx, dtype=int)
    tgt = np.asarray(target_idx, dtype=int)
    v_oo = cov[np.ix_(obs, obs)]
    v_to = cov[np.ix_(tgt, obs)]
    v_tt = cov[np.ix_(tgt, tgt)]
    try:
        gain = psd_solve(v_oo, v_to.T).T
    except NumericalError as exc:
        raise NumericalError(
            "observed-cell covariance block is singular beyond the jitter ladder"
        ) from exc
    cond_cov = _sym(v_tt - gain @ v_to.T)
    return gain, cond_cov


def impute_missing(
    state: np.ndarray,
    obs_cov: np.ndarray,
    log_rate_row: np.ndarray,
    missing_row: np.ndarray,
    spec: DlmSpec,
    rng: RngStream,
) -> np.ndarray:
    """Draw the missing log rates of one age given its state and the
    observed cells of the same age.

    Returns the draws for the missing coordinates in index order. With
    every population missing the draw is unconditional around the fitted
    values.
    """
    missing_row = np.asarray(missing_row, dtype=bool)
    if not missing_row.any():
        return np.empty(0)
    fitted = spec.obs_matrix @ state
    miss = np.flatnonzero(missing_row)
    obs = np.flatnonzero(~missing_row)
    if obs.size == 0:
        return np.atleast_1d(mvn_sample(fitted, obs_cov, rng))
    gain, cond_cov = conditional_normal(np.asarray(obs_cov, dtype=float), obs, miss)
    mean = fitted[miss] + gain @ (log_rate_row[obs] - fitted[obs])
    return np.atleast_1d(mvn_sample(mean, cond_cov, rng))


def run_gibbs(
    spec: DlmSpec,
    surface: RateSurface,
    schedule: DiscountSchedule,
    config: GibbsConfig,
) -> PosteriorDraws:
    """Run the full sampler and pool the kept draws across chains."""
    if tuple(surface.populations) != spec.populations:
        raise DomainError(
            f"surface populations {surface.populations} do not match model "
            f"populations {spec.populations}"
        )
    ages = surface.ages
    n = ages.size
    npop, p = spec.n_populations, spec.state_dim
    missing_mask = surface.missing.copy()
    miss_age_idx = np.flatnonzero(missing_mask.any(axis=0))
    n_miss = int(missing_mask.sum())
    start = initialize_missing(surface)
    kept = config.draws_per_chain
    total = kept * config.chains

    states = np.empty((total, n + 1, p))
    precision = np.empty((total, npop, npop))
    obs_cov_draws = np.empty((total, npop, npop))
    missing_values = np.empty((total, n_miss))
    final_cov = np.zeros((p, p))

    root = RngStream(config.seed)
    chain_streams = root.split(config.chains)
    out = 0
    for chain_idx, rng in enumerate(chain_streams):
        y_work = start.log_rates.copy()
        phi = wishart_mean(spec.wishart.df0, spec.wishart.rate0)
        v = psd_inverse(phi)
        fpass = None
        for it in range(config.iterations):
            fpass = forward_filter(
                spec, y_work, ages, v, schedule, block_discount=config.block_discount
            )
            traj = backward_sample(fpass, spec, rng)
            phi = sample_phi(traj, y_work, spec, spec.wishart, rng)
            v = psd_inverse(phi)
            for i in miss_age_idx:
                row_miss = missing_mask[:, i]
                values = impute_missing(traj[i + 1], v, y_work[:, i], row_miss, spec, rng)
                y_work[row_miss, i] = values
            if not (np.all(np.isfinite(traj)) and np.all(np.isfinite(phi))):
                raise NumericalError(
                    f"non-finite draw in chain {chain_idx} at iteration {it}"
                )
            if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
                states[out] = traj
                precision[out] = phi
                obs_cov_draws[out] = v
                missing_values[out] = y_work[missing_mask]
                out += 1
        final_cov = fpass.post_covs[-1]

    draws = PosteriorDraws(
        spec=spec,
        config=config,
        ages=ages.copy(),
        states=states,
        precision=precision,
        obs_cov=obs_cov_draws,
        missing_values=missing_values,
        missing_mask=missing_mask,
        final_cov=final_cov,
        meta={},
    )
    draws.meta = _run_meta(draws)
    return draws


def _run_meta(draws: PosteriorDraws) -> dict:
    cfg = draws.config
    checks = {
        "states_finite": bool(np.all(np.isfinite(draws.states))),
        "precision_spd": _all_spd(draws.precision),
        "missing_finite": bool(np.all(np.isfinite(draws.missing_values))),
    }
    kept = cfg.draws_per_chain
    fitted = draws.fitted_log_rates()
    flat = fitted.reshape(draws.n_draws, -1)
    prec_flat = draws.precision.reshape(draws.n_draws, -1)
    scalars = np.concatenate([flat, prec_flat], axis=1)
    by_chain = scalars.reshape(cfg.chains, kept, -1)
    rhat = split_rhat(by_chain)
    ess = effective_sample_size(by_chain)
    diagnostics = {
        "max_rhat": float(np.nanmax(rhat)) if rhat.size else float("nan"),
        "min_ess": float(np.nanmin(ess)) if ess.size else float("nan"),
    }
    return {
        "seed": cfg.seed,
        "chains": cfg.chains,
        "iterations": cfg.iterations,
        "burn_in": cfg.burn_in,
        "thin": cfg.thin,
        "draws_per_chain": kept,
        "block_discount": cfg.block_discount,
        "checks": checks,
        "diagnostics": diagnostics,
    }


def _all_spd(stack: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(stack)
        return True
    except np.linalg.LinAlgError:
        return False


def split_rhat(samples: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction per scalar parameter.

    ``samples`` has shape (chains, draws, params); each chain is split
    in half so a single chain still yields a meaningful value. Constant
    parameters report 1.
    """
    c, n = samples.shape[0], samples.shape[1]
    k = samples.shape[2] if samples.ndim == 3 else 1
    x = samples.reshape(c, n, k)
    half = n // 2
    if half < 2:
        return np.full(k, np.nan)
    halves = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    within = variances.mean(axis=0)
    between = half * means.var(axis=0, ddof=1)
    pooled = (half - 1) / half * within + between / half
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(pooled / within)
    # An exactly constant parameter is converged by definition; the
    # variance route cannot see that because the sample mean of a
    # non-representable constant picks up round-off.
    flat = halves.reshape(-1, k)
    constant = (flat.max(axis=0) - flat.min(axis=0)) == 0
    return np.where(constant, 1.0, rhat)


def effective_sample_size(samples: np.ndarray) -> np.ndarray:
    """Multi-chain effective sample size per scalar parameter.

    Uses the split chains' averaged autocovariance with Geyer's initial
    monotone positive sequence to truncate the lag sum.
    """
    c, n = samples.shape[0], samples.shape[1]
    k = samples.shape[2] if samples.ndim == 3 else 1
    x = samples.reshape(c, n, k)
    half = n // 2
    if half < 4:
        return np.full(k, np.nan)
    halves = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    m = halves.shape[0]
    centered = halves - halves.mean(axis=1, keepdims=True)
    # Autocovariance per chain and parameter via FFT along the draw axis.
    nfft = 1
    while nfft < 2 * half:
        nfft *= 2
    freq = np.fft.rfft(centered, n=nfft, axis=1)
    acov = np.fft.irfft(freq * np.conj(freq), n=nfft, axis=1)[:, :half].real / half
    variances = halves.var(axis=1, ddof=1)
    within = variances.mean(axis=0)
    means = halves.mean(axis=1)
    between = half * means.var(axis=0, ddof=1)
    pooled = (half - 1) / half * within + between / half
    mean_acov = acov.mean(axis=0)
    flat = halves.reshape(-1, k)
    constant = (flat.max(axis=0) - flat.min(axis=0)) == 0

    ess = np.empty(k)
    for j in range(k):
        if constant[j] or pooled[j] <= 0:
            ess[j] = m * half
            continue
        rho = 1.0 - (within[j] - mean_acov[:, j]) / pooled[j]
        rho[0] = 1.0
        # Geyer pairs (rho_0 + rho_1), (rho_2 + rho_3), ...: keep while
        # positive, forced non-increasing, then sum.
        acc = 0.0
        prev = np.inf
        for t in range(half // 2):
            pair = rho[2 * t] + rho[2 * t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            prev = pair
            acc += pair
        tau = max(-1.0 + 2.0 * acc, 1e-12)
        ess[j] = m * half / tau
    return ess


@dataclass(frozen=True)
class FitSummary:
    """Posterior summaries of the fitted log rates and the noise model.

    ``fitted_*`` summarise the latent curve; ``predictive_*`` add one
    draw of observational noise per sample, giving the band a new
    observation would fall in.
    """

    populations: tuple[str, ...]
    ages: np.ndarray
    levels: tuple[float, float]
    fitted_mean: np.ndarray
    fitted_median: np.ndarray
    fitted_lower: np.ndarray
    fitted_upper: np.ndarray
    predictive_mean: np.ndarray
    predictive_median: np.ndarray
    predictive_lower: np.ndarray
    predictive_upper: np.ndarray
    obs_cov_mean: np.ndarray
    obs_cov_median: np.ndarray
    obs_cov_lower: np.ndarray
    obs_cov_upper: np.ndarray


def predictive_log_rate_draws(draws: PosteriorDraws, rng: RngStream | None = None) -> np.ndarray:
    """Fitted log rates plus one observational noise draw per sample.

    Shape (draws, populations, ages). The stream defaults to a keyed
    child of the run seed, so repeated calls on the same draws agree.
    """
    if rng is None:
        rng = RngStream(draws.config.seed).child(_SUMMARY_STREAM_KEY)
    fitted = draws.fitted_log_rates()
    nd, npop, n = fitted.shape
    factors = np.linalg.cholesky(draws.obs_cov)
    z = rng.gen.standard_normal((nd, n, npop))
    noise = np.einsum("djk,dik->dij", factors, z)
    return fitted + np.transpose(noise, (0, 2, 1))


def summarize(
    draws: PosteriorDraws,
    levels: tuple[float, float] = (0.025, 0.975),
    rng: RngStream | None = None,
) -> FitSummary:
    """Pointwise posterior summaries at every fitted (population, age).

    ``levels`` are the lower and upper quantiles of the reported band.
    """
    lo, hi = float(levels[0]), float(levels[1])
    if not 0.0 < lo < hi < 1.0:
        raise DomainError(f"quantile levels must satisfy 0 < lower < upper < 1, got {levels}")
    fitted = draws.fitted_log_rates()
    predictive = predictive_log_rate_draws(draws, rng)

    def _stats(a: np.ndarray):
        return (
            a.mean(axis=0),
            np.quantile(a, 0.5, axis=0),
            np.quantile(a, lo, axis=0),
            np.quantile(a, hi, axis=0),
        )

    f_mean, f_med, f_lo, f_hi = _stats(fitted)
    p_mean, p_med, p_lo, p_hi = _stats(predictive)
    v_mean, v_med, v_lo, v_hi = _stats(draws.obs_cov)
    return FitSummary(
        populations=draws.populations,
        ages=draws.ages.copy(),
        levels=(lo, hi),
        fitted_mean=f_mean,
        fitted_median=f_med,
        fitted_lower=f_lo,
        fitted_upper=f_hi,
        predictive_mean=p_mean,
        predictive_median=p_med,
        predictive_lower=p_lo,
        predictive_upper=p_hi,
        obs_cov_mean=v_mean,
        obs_cov_median=v_med,
        obs_cov_lower=v_lo,
        obs_cov_upper=v_hi,
    )
