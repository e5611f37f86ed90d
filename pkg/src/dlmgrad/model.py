"""Model construction: state layout, discount schedules, priors.

A graduation model couples one local linear trend per population, so the
state vector stacks (level, trend) pairs in population order:

    (level_1, trend_1, level_2, trend_2, ..., level_J, trend_J)

with an optional shared baseline appended as the final component. Each
population's observation row reads its own level, plus the baseline when
present. The baseline evolves by accumulating every population level, so
it tracks the mortality pattern common to all populations while the
per-population levels absorb the deviations.

Age-varying smoothness is expressed through discount factors: a discount
``delta`` in (0, 1] at age x inflates the state covariance by 1 / delta
when evolving from x - 1 to x. ``delta = 1`` reproduces a deterministic
(straight line) evolution; smaller values allow faster local adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import chol_psd
from .errors import DomainError

__all__ = [
    "DiscountSegment",
    "DiscountSchedule",
    "WishartPrior",
    "DlmSpec",
    "discount_at",
    "initial_prior",
    "wishart_prior",
    "build_local_linear",
    "build_common_term",
    "default_schedule",
]


@dataclass(frozen=True)
class DiscountSegment:
    """One age range with a single discount factor.

    ``age_lo``/``age_hi`` are inclusive integer bounds; ``None`` leaves
    that side open. A ``population`` restricts the segment to one
    population, overriding the shared schedule there.
    """

    delta: float
    age_lo: int | None = None
    age_hi: int | None = None
    population: str | None = None

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise DomainError(f"discount factor must lie in (0, 1], got {self.delta!r}")
        if self.age_lo is not None and self.age_hi is not None and self.age_lo > self.age_hi:
            raise DomainError(
                f"segment bounds are reversed: {self.age_lo}..{self.age_hi}"
            )

    def covers(self, age: int) -> bool:
        if self.age_lo is not None and age < self.age_lo:
            return False
        if self.age_hi is not None and age > self.age_hi:
            return False
        return True

    def _overlaps(self, other: DiscountSegment) -> bool:
        lo = max(
            self.age_lo if self.age_lo is not None else -np.inf,
            other.age_lo if other.age_lo is not None else -np.inf,
        )
        hi = min(
            self.age_hi if self.age_hi is not None else np.inf,
            other.age_hi if other.age_hi is not None else np.inf,
        )
        return lo <= hi


@dataclass(frozen=True)
class DiscountSchedule:
    """Ordered discount segments; population overrides win over shared ones.

    Segments belonging to the same scope (shared, or one population) must
    not overlap. Coverage gaps surface as a domain error the moment an
    uncovered age is looked up.
    """

    segments: tuple[DiscountSegment, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise DomainError("a discount schedule needs at least one segment")
        by_scope: dict[str | None, list[DiscountSegment]] = {}
        for seg in segs:
            by_scope.setdefault(seg.population, []).append(seg)
        for scope, group in by_scope.items():
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    if group[i]._overlaps(group[j]):
                        where = "shared schedule" if scope is None else f"population {scope!r}"
                        raise DomainError(f"overlapping discount segments in {where}")

    @classmethod
    def uniform(cls, delta: float) -> DiscountSchedule:
        return cls((DiscountSegment(delta=delta),))

    @classmethod
    def from_ranges(cls, ranges) -> DiscountSchedule:
        """Build from ``[(age_lo, age_hi, delta), ...]`` with ``None`` for
        an open bound."""
        return cls(tuple(DiscountSegment(delta=d, age_lo=lo, age_hi=hi) for lo, hi, d in ranges))

    def discount_at(self, age: int, population: str | None = None) -> float:
        if population is not None:
            for seg in self.segments:
                if seg.population == population and seg.covers(age):
                    return seg.delta
        for seg in self.segments:
            if seg.population is None and seg.covers(age):
                return seg.delta
        raise DomainError(f"no discount segment covers age {age}")


def discount_at(schedule: DiscountSchedule, age: int, population: str | None = None) -> float:
    """Discount factor in force at ``age`` for ``population``."""
    return schedule.discount_at(age, population)


def default_schedule() -> DiscountSchedule:
    """Age-varying schedule used when a run does not configure its own.

    Nearly deterministic at infant and advanced ages, more adaptive
    through childhood and the accident hump, moderately adaptive at adult
    ages.
    """
    return DiscountSchedule.from_ranges(
        [(None, 5, 0.99), (6, 35, 0.80), (36, 85, 0.85), (86, None, 0.99)]
    )


@dataclass(frozen=True)
class WishartPrior:
    """Prior on the observational precision matrix.

    Parametrised by a nominal sample size ``d0`` (must exceed 2) and a
    scale matrix ``s0``; these translate into the rate-Wishart shape
    ``df0 = (d0 + 1) / 2`` and rate ``rate0 = (d0 - 2) * s0 / 2``.
    """

    d0: float
    s0: np.ndarray

    def __post_init__(self):
        s0 = np.asarray(self.s0, dtype=float)
        object.__setattr__(self, "s0", s0)
        if not self.d0 > 2.0:
            raise DomainError(f"wishart prior needs d0 > 2, got {self.d0!r}")
        if s0.ndim != 2 or s0.shape[0] != s0.shape[1]:
            raise DomainError(f"prior scale must be square, got shape {s0.shape}")
        chol_psd(s0)

    @property
    def df0(self) -> float:
        return (self.d0 + 1.0) / 2.0

    @property
    def rate0(self) -> np.ndarray:
        return 0.5 * (self.d0 - 2.0) * self.s0


def wishart_prior(d0: float = 3.0, s0_scale: float = 0.01, n_populations: int = 1) -> WishartPrior:
    """Vague-by-default precision prior with s0 = s0_scale * identity."""
    if not np.isfinite(s0_scale) or s0_scale <= 0.0:
        raise DomainError(f"s0_scale must be positive, got {s0_scale!r}")
    return WishartPrior(d0=float(d0), s0=s0_scale * np.eye(int(n_populations)))


def initial_prior(state_dim: int, mean=None, variance_scale: float = 100.0):
    """State prior at the age before the first observation.

    Returns ``(init_mean, init_cov)`` with a zero mean and
    ``variance_scale * identity`` covariance unless overridden. A scalar
    mean broadcasts across the state vector.
    """
    if not np.isfinite(variance_scale) or variance_scale < 0.0:
        raise DomainError(f"prior variance scale must be >= 0, got {variance_scale!r}")
    if mean is None:
        init_mean = np.zeros(state_dim)
    else:
        init_mean = np.broadcast_to(np.asarray(mean, dtype=float), (state_dim,)).copy()
    if not np.all(np.isfinite(init_mean)):
        raise DomainError("prior mean contains non-finite entries")
    return init_mean, variance_scale * np.eye(state_dim)


@dataclass(frozen=True)
class DlmSpec:
    """Fully specified graduation model for a set of populations.

    ``obs_matrix`` maps the state to one log-rate per population;
    ``evo_matrix`` advances the state by one year of age. Both are
    age-constant: all age variation enters through the discount schedule.
    """

    populations: tuple[str, ...]
    common_term: bool
    obs_matrix: np.ndarray
    evo_matrix: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    wishart: WishartPrior = field(repr=False)

    def __post_init__(self):
        pops = tuple(str(p) for p in self.populations)
        object.__setattr__(self, "populations", pops)
        if not pops:
            raise DomainError("a model needs at least one population")
        if len(set(pops)) != len(pops):
            raise DomainError(f"duplicate population labels: {pops}")
        f = np.asarray(self.obs_matrix, dtype=float)
        g = np.asarray(self.evo_matrix, dtype=float)
        m0 = np.asarray(self.init_mean, dtype=float)
        c0 = np.asarray(self.init_cov, dtype=float)
        object.__setattr__(self, "obs_matrix", f)
        object.__setattr__(self, "evo_matrix", g)
        object.__setattr__(self, "init_mean", m0)
        object.__setattr__(self, "init_cov", c0)
        j = len(pops)
        p = 2 * j + (1 if self.common_term else 0)
        if f.shape != (j, p):
            raise DomainError(f"observation matrix must be {(j, p)}, got {f.shape}")
        if g.shape != (p, p):
            raise DomainError(f"evolution matrix must be {(p, p)}, got {g.shape}")
        if m0.shape != (p,):
            raise DomainError(f"initial mean must have length {p}, got shape {m0.shape}")
        if c0.shape != (p, p):
            raise DomainError(f"initial covariance must be {(p, p)}, got {c0.shape}")
        for name, arr in (("observation", f), ("evolution", g), ("initial covariance", c0)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} matrix contains non-finite entries")
        if self.wishart.s0.shape != (j, j):
            raise DomainError(
                f"wishart prior is {self.wishart.s0.shape}, model has {j} populations"
            )
        chol_psd(c0)

    @property
    def n_populations(self) -> int:
        return len(self.populations)

    @property
    def state_dim(self) -> int:
        return self.obs_matrix.shape[1]

    @property
    def state_labels(self) -> tuple[str, ...]:
        labels: list[str] = []
        for pop in self.populations:
            labels.extend((f"level[{pop}]", f"trend[{pop}]"))
        if self.common_term:
            labels.append("common")
        return tuple(labels)

    def level_index(self, population: str) -> int:
        """Column of the level state for ``population``."""
        try:
            return 2 * self.populations.index(population)
        except ValueError:
            raise DomainError(f"unknown population {population!r}") from None

def _population_names(populations) -> tuple[str, ...]:
    if isinstance(populations, int):
        if populations < 1:
            raise DomainError(f"population count must be >= 1, got {populations}")
        return tuple(f"pop{j + 1}" for j in range(populations))
    return tuple(str(p) for p in populations)


def _trend_blocks(n_pops: int, state_dim: int) -> np.ndarray:
    g = np.zeros((state_dim, state_dim))
    for j in range(n_pops):
        k = 2 * j
        g[k, k] = 1.0
        g[k, k + 1] = 1.0
        g[k + 1, k + 1] = 1.0
    return g


def build_local_linear(
    populations,
    *,
    prior_mean=None,
    prior_scale: float = 100.0,
    d0: float = 3.0,
    s0_scale: float = 0.01,
) -> DlmSpec:
    """Model with one independent local linear trend per population.

    Dependence across populations enters only through the observational
    covariance, which is estimated jointly.
    """
    pops = _population_names(populations)
    j = len(pops)
    p = 2 * j
    f = np.zeros((j, p))
    f[np.arange(j), 2 * np.arange(j)] = 1.0
    g = _trend_blocks(j, p)
    m0, c0 = initial_prior(p, prior_mean, prior_scale)
    return DlmSpec(
        populations=pops,
        common_term=False,
        obs_matrix=f,
        evo_matrix=g,
        init_mean=m0,
        init_cov=c0,
        wishart=wishart_prior(d0, s0_scale, j),
    )


def build_common_term(
    populations,
    *,
    prior_mean=None,
    prior_scale: float = 100.0,
    d0: float = 3.0,
    s0_scale: float = 0.01,
) -> DlmSpec:
    """Local linear trends plus a shared baseline level.

    Every observation row reads its own level and the baseline; the
    baseline accumulates all population levels as age advances, acting as
    the mortality pattern the populations have in common.
    """
    pops = _population_names(populations)
    j = len(pops)
    p = 2 * j + 1
    f = np.zeros((j, p))
    f[np.arange(j), 2 * np.arange(j)] = 1.0
    f[:, p - 1] = 1.0
    g = _trend_blocks(j, p)
    g[p - 1, 2 * np.arange(j)] = 1.0
    g[p - 1, p - 1] = 1.0
    m0, c0 = initial_prior(p, prior_mean, prior_scale)
    return DlmSpec(
        populations=pops,
        common_term=True,
        obs_matrix=f,
        evo_matrix=g,
        init_mean=m0,
        init_cov=c0,
        wishart=wishart_prior(d0, s0_scale, j),
    )
