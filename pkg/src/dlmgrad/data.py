"""Mortality table ingestion and the derived rate surfaces.

The on-disk format is a delimited text file in long form with columns
``population, age, deaths, exposure``. Each (population, age) pair may
appear at most once; ages absent for a population become missing cells.
A table holding several calendar years of one population should encode
them as separate population labels (for example ``F2011``, ``F2012``),
which makes every downstream joint model available across years.

Rates are central death rates m = deaths / exposure, modelled on the log
scale. Cells with zero deaths or zero exposure carry no usable log rate
and are treated as missing, to be reconstructed by the sampler.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, ParseError

__all__ = [
    "MortalityTable",
    "RateSurface",
    "load_table",
    "central_rates",
    "death_probabilities",
    "mask_ages",
    "select_populations",
    "MISSING_SCENARIOS",
]

_COLUMNS = ("population", "age", "deaths", "exposure")

# Ready-made hold-out patterns of increasing severity for missing-data
# experiments, as inclusive age ranges applied to one population.
MISSING_SCENARIOS: dict[str, tuple[tuple[int, int], ...]] = {
    "a": ((4, 8),),
    "b": ((4, 10), (15, 17)),
    "c": ((3, 16),),
    "d": ((1, 25),),
    "e": ((1, 16), (23, 41)),
    "f": ((1, 45),),
}


@dataclass(frozen=True)
class MortalityTable:
    """Death counts and exposures on a common consecutive age grid.

    Arrays are shaped (populations, ages). ``missing`` marks cells with
    no usable observation; their counts are kept (they may hold the truth
    behind a simulated hold-out) but nothing downstream reads them.
    """

    populations: tuple[str, ...]
    ages: np.ndarray
    deaths: np.ndarray
    exposure: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        pops = tuple(str(p) for p in self.populations)
        ages = np.asarray(self.ages, dtype=int)
        deaths = np.asarray(self.deaths, dtype=float)
        exposure = np.asarray(self.exposure, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        for name, val in (
            ("populations", pops),
            ("ages", ages),
            ("deaths", deaths),
            ("exposure", exposure),
            ("missing", missing),
        ):
            object.__setattr__(self, name, val)
        if not pops:
            raise DomainError("table has no populations")
        if len(set(pops)) != len(pops):
            raise DomainError(f"duplicate population labels: {pops}")
        if ages.ndim != 1 or ages.size == 0:
            raise DomainError("table has no ages")
        if ages.size > 1 and not np.all(np.diff(ages) == 1):
            raise DomainError("table ages must be consecutive integers")
        shape = (len(pops), ages.size)
        for name, arr in (("deaths", deaths), ("exposure", exposure), ("missing", missing)):
            if arr.shape != shape:
                raise DomainError(f"{name} must have shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(deaths)) or not np.all(np.isfinite(exposure)):
            raise DomainError("deaths and exposure must be finite")
        if np.any(deaths < 0) or np.any(exposure < 0):
            raise DomainError("deaths and exposure must be non-negative")

    @property
    def n_populations(self) -> int:
        return len(self.populations)

    @property
    def n_ages(self) -> int:
        return self.ages.size

    def population_index(self, population: str) -> int:
        try:
            return self.populations.index(population)
        except ValueError:
            raise DomainError(
                f"unknown population {population!r}; table has {self.populations}"
            ) from None


@dataclass(frozen=True)
class RateSurface:
    """Log central death rates per (population, age), NaN where missing."""

    populations: tuple[str, ...]
    ages: np.ndarray
    log_rates: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        pops = tuple(str(p) for p in self.populations)
        ages = np.asarray(self.ages, dtype=int)
        rates = np.asarray(self.log_rates, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        for name, val in (
            ("populations", pops),
            ("ages", ages),
            ("log_rates", rates),
            ("missing", missing),
        ):
            object.__setattr__(self, name, val)
        shape = (len(pops), ages.size)
        if rates.shape != shape or missing.shape != shape:
            raise DomainError(f"rate surface arrays must have shape {shape}")
        if ages.size > 1 and not np.all(np.diff(ages) == 1):
            raise DomainError("rate surface ages must be consecutive integers")
        if np.any(np.isnan(rates) != missing) or np.any(np.isinf(rates)):
            raise DomainError("log rates must be NaN exactly at missing cells and finite elsewhere")

    @property
    def n_populations(self) -> int:
        return len(self.populations)


def _parse_schema(schema: dict | None):
    names = dict(zip(_COLUMNS, _COLUMNS))
    delimiter = ","
    if schema:
        unknown = set(schema) - set(_COLUMNS) - {"delimiter"}
        if unknown:
            raise ParseError(f"unknown schema keys: {sorted(unknown)}")
        delimiter = schema.get("delimiter", ",")
        for col in _COLUMNS:
            names[col] = schema.get(col, col)
    return names, delimiter


def load_table(path, schema: dict | None = None) -> MortalityTable:
    """Read a long-form delimited file into a :class:`MortalityTable`.

    Parameters
    ----------
    path : str or Path
        File with header ``population, age, deaths, exposure`` (any
        column order; extras rejected).
    schema : dict, optional
        Renames columns and/or sets ``delimiter``, for example
        ``{"population": "sex", "delimiter": ";"}``.
    """
    names, delimiter = _parse_schema(schema)
    rows: dict[tuple[str, int], tuple[float, float]] = {}
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle, delimiter=delimiter)
        if reader.fieldnames is None:
            raise ParseError(f"{path} is empty")
        got = [c.strip() for c in reader.fieldnames]
        want = [names[c] for c in _COLUMNS]
        if sorted(got) != sorted(want):
            raise ParseError(f"{path} header must be {want} in any order, got {got}")
        for lineno, row in enumerate(reader, start=2):
            try:
                pop = (row[names["population"]] or "").strip()
                age_txt = (row[names["age"]] or "").strip()
                deaths_txt = (row[names["deaths"]] or "").strip()
                exposure_txt = (row[names["exposure"]] or "").strip()
            except KeyError:
                raise ParseError(f"{path}:{lineno}: short row") from None
            if not pop:
                raise ParseError(f"{path}:{lineno}: empty population label")
            try:
                age = int(age_txt)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: age {age_txt!r} is not an integer") from None
            try:
                # An empty deaths field encodes a missing cell.
                deaths = float(deaths_txt) if deaths_txt else 0.0
                exposure = float(exposure_txt) if exposure_txt else 0.0
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric deaths or exposure") from None
            if not (math.isfinite(deaths) and math.isfinite(exposure)):
                raise ParseError(f"{path}:{lineno}: non-finite deaths or exposure")
            if deaths < 0 or exposure < 0:
                raise DomainError(f"{path}:{lineno}: negative deaths or exposure")
            if deaths > 0 and exposure <= 0:
                raise DomainError(
                    f"{path}:{lineno}: exposure must be positive when deaths are recorded"
                )
            key = (pop, age)
            if key in rows:
                raise ParseError(f"{path}:{lineno}: duplicate entry for {pop!r} age {age}")
            rows[key] = (deaths, exposure)
    if not rows:
        raise ParseError(f"{path} contains no data rows")

    populations = tuple(dict.fromkeys(pop for pop, _ in rows))
    lo = min(age for _, age in rows)
    hi = max(age for _, age in rows)
    ages = np.arange(lo, hi + 1)
    shape = (len(populations), ages.size)
    deaths = np.zeros(shape)
    exposure = np.zeros(shape)
    missing = np.ones(shape, dtype=bool)
    for (pop, age), (d, e) in rows.items():
        i = populations.index(pop)
        k = age - lo
        deaths[i, k] = d
        exposure[i, k] = e
        # Zero deaths give no usable log rate, so the cell stays missing.
        missing[i, k] = not (d > 0 and e > 0)
    return MortalityTable(
        populations=populations, ages=ages, deaths=deaths, exposure=exposure, missing=missing
    )


def central_rates(table: MortalityTable) -> RateSurface:
    """Log central death rates log(deaths / exposure) for each cell.

    Cells that are already missing, have zero deaths, or have zero
    exposure yield NaN and a missing flag: a zero count carries no
    information about the log rate beyond an upper bound, so it is
    reconstructed by the model instead.
    """
    usable = (~table.missing) & (table.deaths > 0) & (table.exposure > 0)
    rates = np.full(table.deaths.shape, np.nan)
    rates[usable] = np.log(table.deaths[usable] / table.exposure[usable])
    if np.any(np.isinf(rates)):
        raise DomainError("log rates overflowed; check deaths and exposure magnitudes")
    return RateSurface(
        populations=table.populations,
        ages=table.ages,
        log_rates=rates,
        missing=~usable,
    )


def death_probabilities(log_rates) -> np.ndarray:
    """Map log central rates to one-year death probabilities.

    Uses q = 1 - exp(-m) with m = exp(y), computed via expm1 so that
    tiny rates keep full precision. Strictly increasing in the input,
    with values in (0, 1) for any realistic log rate. NaN passes through.
    """
    y = np.asarray(log_rates, dtype=float)
    return -np.expm1(-np.exp(y))


def mask_ages(table: MortalityTable, population: str, age_ranges) -> MortalityTable:
    """Mark the given inclusive age ranges of one population as missing.

    The counts stay in place (they often hold the truth behind a
    simulated hold-out) but every downstream consumer honours the flag.
    Masking an already-missing cell is a no-op, so the call is
    idempotent.
    """
    i = table.population_index(population)
    missing = table.missing.copy()
    lo_age = int(table.ages[0])
    hi_age = int(table.ages[-1])
    for rng in age_ranges:
        try:
            lo, hi = (int(rng[0]), int(rng[1]))
        except (TypeError, ValueError, IndexError):
            raise DomainError(f"age range {rng!r} is not a (low, high) pair") from None
        if lo > hi:
            raise DomainError(f"age range {lo}..{hi} is reversed")
        if lo < lo_age or hi > hi_age:
            raise DomainError(
                f"age range {lo}..{hi} falls outside table ages {lo_age}..{hi_age}"
            )
        missing[i, lo - lo_age : hi - lo_age + 1] = True
    return replace(table, missing=missing)


def select_populations(table: MortalityTable, populations) -> MortalityTable:
    """Restrict a table to the given populations, in the given order."""
    wanted = [str(p) for p in populations]
    idx = [table.population_index(p) for p in wanted]
    return MortalityTable(
        populations=tuple(wanted),
        ages=table.ages,
        deaths=table.deaths[idx],
        exposure=table.exposure[idx],
        missing=table.missing[idx],
    )
