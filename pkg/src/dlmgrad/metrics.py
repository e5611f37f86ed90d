"""Hold-out scoring of competing fits on reconstructed cells.

Predictions are scored against the truth kept back from the sampler:
squared error and absolute error of the posterior median, and the mean
width of the credible band as a sharpness measure. All three are
averaged over the evaluated cells only; observed cells never enter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .forecast import PredictiveSummary

__all__ = [
    "mspe",
    "mape",
    "mean_interval_width",
    "cells_from_mask",
    "ComparisonRow",
    "ComparisonReport",
    "compare",
]


def _paired(y_true, y_pred):
    t = np.asarray(y_true, dtype=float).ravel()
    p = np.asarray(y_pred, dtype=float).ravel()
    if t.shape != p.shape or t.size == 0:
        raise DomainError(f"need matching non-empty arrays, got {t.shape} and {p.shape}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
        raise DomainError("metric inputs must be finite")
    return t, p


def mspe(y_true, y_pred) -> float:
    """Mean squared prediction error."""
    t, p = _paired(y_true, y_pred)
    return float(np.mean((t - p) ** 2))


def mape(y_true, y_pred) -> float:
    """Mean absolute prediction error."""
    t, p = _paired(y_true, y_pred)
    return float(np.mean(np.abs(t - p)))


def mean_interval_width(lower, upper) -> float:
    """Average width of the credible band over the evaluated cells."""
    low, up = _paired(lower, upper)
    if np.any(up < low):
        raise DomainError("interval bounds are reversed")
    return float(np.mean(up - low))


def cells_from_mask(mask, populations, ages) -> tuple[tuple[str, int], ...]:
    """Expand a boolean (population, age) mask into labelled cells."""
    mask = np.asarray(mask, dtype=bool)
    populations = tuple(str(p) for p in populations)
    ages = np.asarray(ages, dtype=int)
    if mask.shape != (len(populations), ages.size):
        raise DomainError(f"mask must have shape {(len(populations), ages.size)}")
    return tuple(
        (populations[i], int(ages[k])) for i, k in zip(*np.nonzero(mask))
    )


@dataclass(frozen=True)
class ComparisonRow:
    scenario: str
    model: str
    pct_missing: float
    n_cells: int
    mspe: float
    mape: float
    interval_width: float
    best_mspe: bool = False
    best_mape: bool = False
    best_interval_width: bool = False


@dataclass(frozen=True)
class ComparisonReport:
    """Rows of hold-out scores, with per-scenario winners flagged."""

    rows: tuple[ComparisonRow, ...]
    scale: str = "log_rate"

    def merged(self, other: ComparisonReport) -> ComparisonReport:
        if other.scale != self.scale:
            raise DomainError(f"cannot merge reports on scales {self.scale!r} and {other.scale!r}")
        return ComparisonReport(rows=self.rows + other.rows, scale=self.scale)

    def to_text(self) -> str:
        header = (
            f"{'scenario':<10} {'model':<14} {'%missing':>8} {'cells':>5} "
            f"{'mspe':>12} {'mape':>12} {'width':>12}"
        )
        lines = [f"hold-out comparison on the {self.scale} scale", header, "-" * len(header)]
        for r in self.rows:
            marks = "".join(
                m for m, flag in (("s", r.best_mspe), ("a", r.best_mape), ("w", r.best_interval_width)) if flag
            )
            lines.append(
                f"{r.scenario:<10} {r.model:<14} {r.pct_missing:>8.1f} {r.n_cells:>5d} "
                f"{r.mspe:>12.6g} {r.mape:>12.6g} {r.interval_width:>12.6g} {marks}"
            )
        lines.append("")
        lines.append("winner marks: s lowest mspe, a lowest mape, w narrowest band")
        return "\n".join(lines)


def _flag_best(rows: list[ComparisonRow]) -> list[ComparisonRow]:
    out = list(rows)
    for attr, flag in (
        ("mspe", "best_mspe"),
        ("mape", "best_mape"),
        ("interval_width", "best_interval_width"),
    ):
        values = np.array([getattr(r, attr) for r in out])
        best = values.min()
        tol = 1e-12 * max(abs(best), 1.0)
        for i, r in enumerate(out):
            if values[i] <= best + tol:
                out[i] = replace(out[i], **{flag: True})
    return out


def compare(
    fits,
    cells,
    scenario: str = "",
    scale: str = "log_rate",
) -> ComparisonReport:
    """Score every fit on the same evaluation cells.

    Parameters
    ----------
    fits : sequence of (label, PredictiveSummary, RateSurface)
        Each fit's summary plus the surface holding the true values of
        the evaluated cells (typically the unmasked data).
    cells : sequence of (population, age)
        Cells to score; every fit must cover all of them and every truth
        surface must actually observe them.
    scale : str
        ``log_rate`` (default) or ``rate``.
    """
    cells = tuple((str(p), int(a)) for p, a in cells)
    if not cells:
        raise DomainError("no evaluation cells given")
    if scale not in ("log_rate", "rate"):
        raise DomainError(f"comparison scale must be 'log_rate' or 'rate', got {scale!r}")
    rows: list[ComparisonRow] = []
    for label, summary, truth in fits:
        if not isinstance(summary, PredictiveSummary):
            raise DomainError(f"fit {label!r} did not supply a predictive summary")
        y_true = np.empty(len(cells))
        y_pred = np.empty(len(cells))
        low = np.empty(len(cells))
        up = np.empty(len(cells))
        _, median, lower, upper = summary.scale(scale)
        for idx, (pop, age) in enumerate(cells):
            try:
                i_t = truth.populations.index(pop)
            except ValueError:
                raise DomainError(f"truth surface for {label!r} lacks population {pop!r}") from None
            k_t = age - int(truth.ages[0])
            if not 0 <= k_t < truth.ages.size:
                raise DomainError(f"truth surface for {label!r} lacks age {age}")
            if truth.missing[i_t, k_t]:
                raise DomainError(f"no held-out truth at ({pop!r}, {age}) for fit {label!r}")
            try:
                i_s = summary.populations.index(pop)
            except ValueError:
                raise DomainError(f"fit {label!r} does not cover population {pop!r}") from None
            k_s = age - int(summary.ages[0])
            if not 0 <= k_s < summary.ages.size:
                raise DomainError(f"fit {label!r} does not cover age {age}")
            truth_log = truth.log_rates[i_t, k_t]
            y_true[idx] = truth_log if scale == "log_rate" else np.exp(truth_log)
            y_pred[idx] = median[i_s, k_s]
            low[idx] = lower[i_s, k_s]
            up[idx] = upper[i_s, k_s]
        pops_hit = {pop for pop, _ in cells}
        denom = len(pops_hit) * truth.ages.size
        rows.append(
            ComparisonRow(
                scenario=scenario,
                model=str(label),
                pct_missing=100.0 * len(cells) / denom,
                n_cells=len(cells),
                mspe=mspe(y_true, y_pred),
                mape=mape(y_true, y_pred),
                interval_width=mean_interval_width(low, up),
            )
        )
    return ComparisonReport(rows=tuple(_flag_best(rows)), scale=scale)
