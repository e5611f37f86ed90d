"""Forward filtering, backward sampling and smoothing for one model.

The forward pass is the standard conjugate normal recursion. With state
prior (m, C) at the previous age, evolution matrix G and observation
matrix F, each age x produces

    a = G m                      prior state mean
    R = discounted(G C G')       prior state covariance
    f = F a                      one-step forecast mean
    Q = F R F' + V               one-step forecast covariance
    A = R F' inv(Q)              adaptive gain
    m = a + A (y - f)            posterior state mean
    C = R - A Q A'               posterior state covariance

where ``discounted`` inflates the propagated covariance according to the
age's discount factors, either jointly (default, scaling rows and
columns by 1 / sqrt(delta) so cross-population correlations of the
innovations are retained) or block by block per population.

The backward pass reuses the stored moments. Conditional on the state at
age x + 1, the state at age x is normal with

    h = m_x + B (state_{x+1} - a_{x+1}),   B = C_x G' pinv(R_{x+1})
    H = C_x - B G C_x

and the same algebra applied to moments instead of draws yields the
marginal smoothed means and covariances. The pseudo-inverse keeps
degenerate evolutions (discount factor one, zero prior covariance) safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import RngStream, _cov_factor, _sym, psd_solve
from .errors import DomainError, NumericalError
from .model import DiscountSchedule, DlmSpec

__all__ = ["FilterPass", "forward_filter", "backward_sample", "smooth_moments"]


@dataclass(frozen=True)
class FilterPass:
    """Moments stored by one forward filtering sweep.

    Index i of each array refers to the i-th observed age; the state
    prior at the age before the first observation is kept separately as
    ``init_mean`` / ``init_cov``.
    """

    ages: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    prior_means: np.ndarray
    prior_covs: np.ndarray
    forecast_means: np.ndarray
    forecast_covs: np.ndarray
    post_means: np.ndarray
    post_covs: np.ndarray

    @property
    def n_ages(self) -> int:
        return self.ages.size

    @property
    def state_dim(self) -> int:
        return self.init_mean.size


def state_discounts(spec: DlmSpec, schedule: DiscountSchedule, age: int) -> np.ndarray:
    """Discount factor applied to each state component at ``age``."""
    deltas = np.empty(spec.state_dim)
    for j, pop in enumerate(spec.populations):
        deltas[2 * j : 2 * j + 2] = schedule.discount_at(age, pop)
    if spec.common_term:
        deltas[-1] = schedule.discount_at(age)
    return deltas


def _state_blocks(spec: DlmSpec) -> list[tuple[int, int]]:
    blocks = [(2 * j, 2 * j + 2) for j in range(spec.n_populations)]
    if spec.common_term:
        blocks.append((spec.state_dim - 1, spec.state_dim))
    return blocks


def discounted_prior_cov(
    propagated: np.ndarray,
    deltas: np.ndarray,
    *,
    block_discount: bool = False,
    blocks: list[tuple[int, int]] | None = None,
) -> np.ndarray:
    """Inflate the propagated state covariance by the age's discounts.

    Joint mode divides row i and column i by sqrt(delta_i), which for a
    single shared delta is exactly propagated / delta. Block mode adds
    innovation variance (1 - delta) / delta per population block instead,
    leaving cross-block covariances untouched.
    """
    if block_discount:
        if blocks is None:
            raise DomainError("block discounting needs the state block layout")
        out = propagated.copy()
        for s, e in blocks:
            d = deltas[s]
            out[s:e, s:e] += ((1.0 - d) / d) * propagated[s:e, s:e]
        return _sym(out)
    scale = 1.0 / np.sqrt(deltas)
    return _sym(propagated * np.outer(scale, scale))


def forward_filter(
    spec: DlmSpec,
    log_rates: np.ndarray,
    ages: np.ndarray,
    obs_cov: np.ndarray,
    schedule: DiscountSchedule,
    *,
    block_discount: bool = False,
) -> FilterPass:
    """Run the forward recursion over a completed log-rate block.

    Parameters
    ----------
    log_rates : ndarray, shape (populations, ages)
        Finite log rates; missing cells must already be filled in.
    ages : ndarray
        Consecutive integer ages matching the columns of ``log_rates``.
    obs_cov : ndarray
        Observational covariance shared across ages.
    """
    y = np.asarray(log_rates, dtype=float)
    ages = np.asarray(ages, dtype=int)
    v = _sym(np.asarray(obs_cov, dtype=float))
    npop, p = spec.n_populations, spec.state_dim
    if ages.ndim != 1 or ages.size == 0:
        raise DomainError("filter needs at least one age")
    if ages.size > 1 and not np.all(np.diff(ages) == 1):
        raise DomainError("filter ages must be consecutive integers")
    if y.shape != (npop, ages.size):
        raise DomainError(f"log rates must have shape {(npop, ages.size)}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DomainError("filter input contains non-finite log rates; impute first")
    if v.shape != (npop, npop) or not np.all(np.isfinite(v)):
        raise DomainError(f"observation covariance must be finite {(npop, npop)}")

    fmat = spec.obs_matrix
    gmat = spec.evo_matrix
    blocks = _state_blocks(spec)
    n = ages.size
    prior_means = np.empty((n, p))
    prior_covs = np.empty((n, p, p))
    forecast_means = np.empty((n, npop))
    forecast_covs = np.empty((n, npop, npop))
    post_means = np.empty((n, p))
    post_covs = np.empty((n, p, p))

    m = spec.init_mean.astype(float).copy()
    c = _sym(spec.init_cov.astype(float))
    for i, age in enumerate(ages):
        deltas = state_discounts(spec, schedule, int(age))
        a = gmat @ m
        propagated = _sym(gmat @ c @ gmat.T)
        r = discounted_prior_cov(
            propagated, deltas, block_discount=block_discount, blocks=blocks
        )
        f = fmat @ a
        q = _sym(fmat @ r @ fmat.T + v)
        try:
            gain = psd_solve(q, fmat @ r).T
        except NumericalError as exc:
            raise NumericalError(f"forecast covariance not positive definite at age {age}") from exc
        m = a + gain @ (y[:, i] - f)
        c = _sym(r - gain @ q @ gain.T)
        prior_means[i] = a
        prior_covs[i] = r
        forecast_means[i] = f
        forecast_covs[i] = q
        post_means[i] = m
        post_covs[i] = c

    return FilterPass(
        ages=ages.copy(),
        init_mean=spec.init_mean.astype(float).copy(),
        init_cov=_sym(spec.init_cov.astype(float)),
        prior_means=prior_means,
        prior_covs=prior_covs,
        forecast_means=forecast_means,
        forecast_covs=forecast_covs,
        post_means=post_means,
        post_covs=post_covs,
    )


def _pinv_psd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-inverse of a PSD matrix plus an orthonormal column basis."""
    a = _sym(m)
    w, u = np.linalg.eigh(a)
    wmax = float(w[-1]) if w.size else 0.0
    cutoff = wmax * a.shape[0] * np.finfo(float).eps if wmax > 0 else np.inf
    keep = w > cutoff
    inv_w = np.zeros_like(w)
    inv_w[keep] = 1.0 / w[keep]
    pinv = (u * inv_w) @ u.T
    return pinv, u[:, keep]


def _backward_gains(fpass: FilterPass, spec: DlmSpec):
    """Per-age pieces of the backward recursion, last age first.

    Entry k describes the step from age index n - k to n - k - 1 (with
    index -1 meaning the pre-observation state): the gain B, the
    conditional covariance H, the basis of the reachable column space of
    the next prior covariance, and that prior's mean.
    """
    gmat = spec.evo_matrix
    n = fpass.n_ages
    m_all = np.concatenate([fpass.init_mean[None, :], fpass.post_means], axis=0)
    c_all = np.concatenate([fpass.init_cov[None, :, :], fpass.post_covs], axis=0)
    steps = []
    for i in range(n - 1, -1, -1):
        r_next = fpass.prior_covs[i]
        pinv, basis = _pinv_psd(r_next)
        c_here = c_all[i]
        b = c_here @ gmat.T @ pinv
        h = _sym(c_here - b @ gmat @ c_here)
        steps.append(
            {
                "index": i,
                "gain": b,
                "cond_cov": h,
                "basis": basis,
                "prior_mean": fpass.prior_means[i],
                "post_mean": m_all[i],
                "full_rank": basis.shape[1] == r_next.shape[0],
                "prior_cov": r_next,
            }
        )
    return steps


def backward_sample(
    fpass: FilterPass,
    spec: DlmSpec,
    rng: RngStream,
    size: int | None = None,
) -> np.ndarray:
    """Draw full state trajectories conditional on the filtered data.

    Returns shape ``(n_ages + 1, state_dim)`` for ``size=None`` or
    ``(size, n_ages + 1, state_dim)`` otherwise. Index 0 of the age axis
    is the state one year before the first observed age.

    Degenerate steps (singular next-age prior covariance) are handled by
    restricting the solve to the reachable column space; a draw whose
    deterministic part leaves that space signals a numerical error.
    """
    n, p = fpass.n_ages, fpass.state_dim
    ndraw = 1 if size is None else int(size)
    if ndraw < 1:
        raise DomainError(f"trajectory count must be >= 1, got {size}")
    steps = _backward_gains(fpass, spec)
    out = np.empty((ndraw, n + 1, p))
    factor = _cov_factor(fpass.post_covs[-1])
    z = rng.gen.standard_normal((ndraw, p))
    out[:, n, :] = fpass.post_means[-1] + z @ factor.T
    for step in steps:
        i = step["index"]
        nxt = out[:, i + 1, :]
        dev = nxt - step["prior_mean"]
        if not step["full_rank"]:
            inside = dev @ step["basis"]
            resid = dev - inside @ step["basis"].T
            scale = np.linalg.norm(dev) + 1e-300
            if np.linalg.norm(resid) > 1e-8 * scale:
                raise NumericalError(
                    f"backward step at age index {i} received a state outside the "
                    "reachable space of its evolution"
                )
        mean = step["post_mean"] + dev @ step["gain"].T
        factor = _cov_factor(step["cond_cov"])
        z = rng.gen.standard_normal((ndraw, p))
        out[:, i, :] = mean + z @ factor.T
    if size is None:
        return out[0]
    return out


def smooth_moments(fpass: FilterPass, spec: DlmSpec) -> tuple[np.ndarray, np.ndarray]:
    """Marginal smoothed means and covariances of the states given all data.

    Returns ``(means, covs)`` with shapes ``(n_ages + 1, state_dim)`` and
    ``(n_ages + 1, state_dim, state_dim)``; index 0 of the age axis is
    the pre-observation state, the last index equals the final filtered
    posterior.
    """
    n, p = fpass.n_ages, fpass.state_dim
    means = np.empty((n + 1, p))
    covs = np.empty((n + 1, p, p))
    means[n] = fpass.post_means[-1]
    covs[n] = fpass.post_covs[-1]
    for step in _backward_gains(fpass, spec):
        i = step["index"]
        b = step["gain"]
        means[i] = step["post_mean"] + b @ (means[i + 1] - step["prior_mean"])
        covs[i] = _sym(step["cond_cov"] + b @ covs[i + 1] @ b.T)
    return means, covs
