"""Synthetic table and surface builders shared by the test modules."""

from __future__ import annotations

import csv
import io

import numpy as np

from dlmgrad import MortalityTable, RateSurface


def random_spd(rng, p, scale=1.0, ridge=0.3):
    """Random symmetric positive definite matrix of size p."""
    a = rng.standard_normal((p, p))
    return scale * (a @ a.T / p + ridge * np.eye(p))


def table_from_log_rates(populations, ages, log_rates, exposure=2.0e5):
    """Mortality table whose central rates reproduce ``log_rates`` exactly."""
    y = np.asarray(log_rates, dtype=float)
    ages = np.asarray(ages, dtype=int)
    expo = np.full(y.shape, float(exposure))
    deaths = np.exp(y) * expo
    return MortalityTable(
        populations=tuple(populations),
        ages=ages,
        deaths=deaths,
        exposure=expo,
        missing=np.zeros(y.shape, dtype=bool),
    )


def surface_from_log_rates(populations, ages, log_rates, missing=None):
    y = np.asarray(log_rates, dtype=float)
    if missing is None:
        missing = np.zeros(y.shape, dtype=bool)
    missing = np.asarray(missing, dtype=bool)
    vals = y.copy()
    vals[missing] = np.nan
    return RateSurface(
        populations=tuple(populations),
        ages=np.asarray(ages, dtype=int),
        log_rates=vals,
        missing=missing,
    )


def table_csv_text(table: MortalityTable, skip_missing=True) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("population", "age", "deaths", "exposure"))
    for i, pop in enumerate(table.populations):
        for k, age in enumerate(table.ages):
            if skip_missing and table.missing[i, k]:
                continue
            writer.writerow(
                (pop, int(age), repr(float(table.deaths[i, k])), repr(float(table.exposure[i, k])))
            )
    return out.getvalue()


def write_table_csv(path, table: MortalityTable, skip_missing=True) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(table_csv_text(table, skip_missing=skip_missing))


def declining_curve(ages, level=-5.0, slope=-0.05):
    """Simple log-rate line used where the shape does not matter."""
    ages = np.asarray(ages, dtype=float)
    return level + slope * (ages - ages[0])


def bivariate_noisy_table(seed, ages=None, rho=0.9, sigma=0.08, bump=0.10, wave=0.0, wave_period=20.0):
    """Two-population table with a shared curved baseline and correlated noise.

    The baseline declines linearly and carries a smooth bump centred at
    age 9.5, well inside the 3..16 hold-out window the pooling studies
    mask; ``wave`` adds a gentle shared undulation across the whole age
    span. The populations differ by constant offsets. Returns the table
    plus the noise-free log-rate surface for scoring.
    """
    rng = np.random.default_rng(seed)
    if ages is None:
        ages = np.arange(1, 49)
    ages = np.asarray(ages, dtype=int)
    x = ages.astype(float)
    base = -5.3 - 0.028 * x + bump * np.exp(-(((x - 9.5) / 4.0) ** 2))
    base = base + wave * np.sin(2.0 * np.pi * (x - x[0]) / wave_period)
    offsets = np.array([0.15, -0.15])
    cov = sigma**2 * np.array([[1.0, rho], [rho, 1.0]])
    noise = rng.multivariate_normal(np.zeros(2), cov, size=ages.size).T
    y = base[None, :] + offsets[:, None] + noise
    table = table_from_log_rates(("A", "B"), ages, y)
    clean = base[None, :] + offsets[:, None]
    return table, y, clean
