"""Random streams and the matrix-variate sampling primitives.

Covariance matrices in this package are symmetric positive semi-definite
only up to round-off, and some are legitimately singular (discount factor
of one, degenerate priors). Everything that factors, solves or samples
with such matrices goes through the helpers in this module so the
safeguards live in one place.

The Wishart routines use the rate parametrisation

    p(X) = c * det(X)**(df - (p + 1) / 2) * exp(-trace(scale @ X))

for which E[X] = df * inv(scale). ``wishart_mean`` is the single source
of truth for that identity; the Gibbs updates and the tests both call it
instead of re-deriving the conversion.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve

from .errors import DomainError, NumericalError

# Relative jitters tried in turn when a Cholesky factorisation fails.
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class RngStream:
    """Deterministic random stream with support for independent splits.

    Thin wrapper around a counter-based bit generator (Philox). Identical
    seeds give identical draw sequences; ``split`` and ``child`` derive
    statistically independent streams that are themselves reproducible.

    Attributes
    ----------
    gen : numpy.random.Generator
        The underlying generator; sampling code draws from this.
    """

    def __init__(self, seed: int | None = 0, *, _seq: np.random.SeedSequence | None = None):
        if _seq is not None:
            self._seq = _seq
        else:
            self._seq = np.random.SeedSequence(seed)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def entropy(self):
        return self._seq.entropy

    def split(self, n: int) -> list[RngStream]:
        """Spawn ``n`` independent child streams (order matters)."""
        if n < 1:
            raise DomainError(f"cannot split a stream into {n} parts")
        return [RngStream(_seq=seq) for seq in self._seq.spawn(n)]

    def child(self, key: int) -> RngStream:
        """Derive the keyed child stream; independent of other keys."""
        spawn_key = tuple(self._seq.spawn_key) + (int(key),)
        seq = np.random.SeedSequence(entropy=self._seq.entropy, spawn_key=spawn_key)
        return RngStream(_seq=seq)


def rng_stream(seed: int | None = 0) -> RngStream:
    """Create the root random stream for a run."""
    return RngStream(seed)


def _sym(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


def _as_square(m, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite entries")
    return a


def chol_psd(m, *, ladder: tuple[float, ...] = JITTER_LADDER) -> np.ndarray:
    """Lower-triangular L with L @ L.T == m + eps * I for the smallest
    workable jitter.

    The jitters are relative to trace(m) / p and tried in escalating
    order. A matrix that is exactly zero factors to zero. Failure at the
    top of the ladder raises :class:`NumericalError`.
    """
    a = _sym(_as_square(m, "matrix"))
    p = a.shape[0]
    if not a.any():
        return np.zeros_like(a)
    scale = max(np.trace(a) / p, 0.0)
    eye = np.eye(p)
    for eps in ladder:
        try:
            return np.linalg.cholesky(a if eps == 0.0 else a + (eps * scale) * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"matrix of size {p} is not positive semi-definite within jitter {ladder[-1]:g}"
    )


def psd_solve(a, b) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite ``a`` via the
    jittered Cholesky factor."""
    lower = chol_psd(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = cho_solve((lower, True), np.asarray(b, dtype=float))
    if not np.all(np.isfinite(x)):
        raise NumericalError(
            f"solve with a singular matrix of size {lower.shape[0]} produced non-finite values"
        )
    return x


def psd_inverse(a) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix, symmetrised."""
    a = _as_square(a, "matrix")
    return _sym(psd_solve(a, np.eye(a.shape[0])))


def psd_pseudo_solve(a, b, *, require_consistent: bool = False) -> np.ndarray:
    """Solve a @ x = b for PSD ``a``, restricted to its column space.

    Eigenvalues at or below the relative cutoff are treated as zero, so
    a singular ``a`` yields the minimum-norm solution. With
    ``require_consistent`` a rank-deficient system whose right-hand side
    leaves the column space raises :class:`NumericalError`.
    """
    a = _sym(_as_square(a, "matrix"))
    b = np.asarray(b, dtype=float)
    w, u = np.linalg.eigh(a)
    wmax = float(w[-1]) if w.size else 0.0
    if wmax <= 0.0:
        inv_w = np.zeros_like(w)
    else:
        cutoff = wmax * a.shape[0] * np.finfo(float).eps
        inv_w = np.where(w > cutoff, 1.0, 0.0) / np.where(w > cutoff, w, 1.0)
    rank = int(np.count_nonzero(inv_w))
    proj = u.T @ b
    if proj.ndim == 1:
        x = u @ (inv_w * proj)
    else:
        x = u @ (inv_w[:, None] * proj)
    if require_consistent and rank < a.shape[0]:
        resid = np.linalg.norm(a @ x - b)
        if resid > 1e-8 * max(np.linalg.norm(b), 1e-300):
            raise NumericalError(
                "singular system is inconsistent: right-hand side leaves the column space"
            )
    return x


def _cov_factor(cov) -> np.ndarray:
    # Sampling must not die on a covariance that is zero or indefinite
    # at round-off level, so fall back to an eigenvalue square root with
    # negative eigenvalues clipped when the Cholesky ladder fails.
    try:
        return chol_psd(cov)
    except NumericalError:
        w, u = np.linalg.eigh(_sym(_as_square(cov, "covariance")))
        return u * np.sqrt(np.clip(w, 0.0, None))


def mvn_sample(mean, cov, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw from the multivariate normal with the given mean and PSD
    covariance.

    Returns shape ``(p,)`` for ``size=None`` and ``(size, p)`` otherwise.
    A zero covariance returns the mean exactly.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    p = mean.shape[0]
    factor = _cov_factor(cov)
    if factor.shape != (p, p):
        raise DomainError(
            f"covariance shape {factor.shape} does not match mean of length {p}"
        )
    shape = (p,) if size is None else (int(size), p)
    z = rng.gen.standard_normal(shape)
    return mean + z @ factor.T


def wishart_mean(df: float, scale) -> np.ndarray:
    """Mean df * inv(scale) of the rate-parametrised Wishart.

    This encodes the convention stated in the module docstring; every
    conjugate-update identity in the package goes through here.
    """
    return float(df) * psd_inverse(scale)


def wishart_sample(df: float, scale, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw from the rate-parametrised Wishart via the Bartlett
    decomposition.

    Parameters
    ----------
    df : float
        Shape parameter; must exceed (p - 1) / 2 for a p x p ``scale``.
    scale : array_like
        Symmetric positive definite rate matrix.
    rng : RngStream
    size : int, optional
        Number of draws; returns ``(p, p)`` when omitted, else
        ``(size, p, p)``.
    """
    scale = _as_square(scale, "scale")
    p = scale.shape[0]
    df = float(df)
    if not df > (p - 1) / 2.0:
        raise DomainError(f"wishart df {df:g} must exceed (p - 1) / 2 = {(p - 1) / 2:g}")
    # Standard-convention scale matrix for the equivalent classical
    # Wishart with 2 * df degrees of freedom.
    scale_std = psd_inverse(2.0 * scale)
    lower = chol_psd(scale_std)
    chi_dfs = 2.0 * df - np.arange(p)

    def bartlett(nsample: int) -> np.ndarray:
        a = np.zeros((nsample, p, p))
        idx = np.arange(p)
        a[:, idx, idx] = np.sqrt(rng.gen.chisquare(chi_dfs, size=(nsample, p)))
        if p > 1:
            rows, cols = np.tril_indices(p, k=-1)
            a[:, rows, cols] = rng.gen.standard_normal((nsample, rows.size))
        la = lower @ a
        return la @ np.transpose(la, (0, 2, 1))

    if size is None:
        return bartlett(1)[0]
    return bartlett(int(size))
