"""Figure rendering for the report paths.

Every CLI command that writes a delimited report also renders a figure
next to it. These helpers own the matplotlib usage so the rest of the
package stays import-light; the Agg backend keeps them headless-safe.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def _style(ax, xlabel: str, ylabel: str, title: str):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.25)


def save_fit_figure(surface, summary, path, title: str = "graduated mortality curves"):
    """Raw points, fitted median and bands per population."""
    fig, ax = plt.subplots(figsize=(9, 5.5), dpi=150)
    for i, pop in enumerate(summary.populations):
        color = _COLORS[i % len(_COLORS)]
        k = surface.populations.index(pop)
        obs = ~surface.missing[k]
        ax.plot(
            surface.ages[obs],
            surface.log_rates[k, obs],
            ".",
            color=color,
            markersize=4,
            alpha=0.55,
        )
        ax.plot(summary.ages, summary.fitted_median[i], color=color, linewidth=1.6, label=pop)
        ax.fill_between(
            summary.ages, summary.fitted_lower[i], summary.fitted_upper[i],
            color=color, alpha=0.22, linewidth=0,
        )
        ax.fill_between(
            summary.ages, summary.predictive_lower[i], summary.predictive_upper[i],
            color=color, alpha=0.10, linewidth=0,
        )
    _style(ax, "age", "log death rate", title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_forecast_figure(surface, summary, last_fit_age: int, path,
                         title: str = "graduation with extrapolation"):
    """Predictive median and band through the extrapolated ages."""
    fig, ax = plt.subplots(figsize=(9, 5.5), dpi=150)
    for i, pop in enumerate(summary.populations):
        color = _COLORS[i % len(_COLORS)]
        if pop in surface.populations:
            k = surface.populations.index(pop)
            obs = ~surface.missing[k]
            ax.plot(
                surface.ages[obs], surface.log_rates[k, obs],
                ".", color=color, markersize=4, alpha=0.55,
            )
        ax.plot(summary.ages, summary.log_median[i], color=color, linewidth=1.6, label=pop)
        ax.fill_between(
            summary.ages, summary.log_lower[i], summary.log_upper[i],
            color=color, alpha=0.18, linewidth=0,
        )
    ax.axvline(last_fit_age, color="0.4", linestyle="--", linewidth=1)
    _style(ax, "age", "log death rate", title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_comparison_figure(report, path, title: str = "hold-out comparison"):
    """Grouped bars of the three scores per scenario and model."""
    scenarios = list(dict.fromkeys(r.scenario for r in report.rows))
    models = list(dict.fromkeys(r.model for r in report.rows))
    metrics = (("mspe", "mspe"), ("mape", "mape"), ("interval_width", "band width"))
    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2), dpi=150, sharex=True)
    x = np.arange(len(scenarios))
    width = 0.8 / max(len(models), 1)
    for ax, (attr, label) in zip(axes, metrics):
        for m_idx, model in enumerate(models):
            values = []
            for scen in scenarios:
                match = [r for r in report.rows if r.scenario == scen and r.model == model]
                values.append(getattr(match[0], attr) if match else np.nan)
            ax.bar(
                x + (m_idx - (len(models) - 1) / 2) * width,
                values,
                width=width * 0.92,
                label=model,
                color=_COLORS[m_idx % len(_COLORS)],
            )
        ax.set_xticks(x)
        ax.set_xticklabels(scenarios)
        _style(ax, "scenario", label, label)
    axes[0].legend(frameon=False, fontsize=8)
    fig.suptitle(f"{title} ({report.scale} scale)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_plotdata_figure(rows, path, title: str = "plot data preview"):
    """Render the plot-data rows exactly as exported.

    ``rows`` are dicts with keys series, population, age, value, lower,
    upper; series 'raw' is drawn as points, everything else as a line
    with an optional band.
    """
    fig, ax = plt.subplots(figsize=(9, 5.5), dpi=150)
    pops = list(dict.fromkeys(r["population"] for r in rows))
    for i, pop in enumerate(pops):
        color = _COLORS[i % len(_COLORS)]
        for series in dict.fromkeys(r["series"] for r in rows if r["population"] == pop):
            sel = [r for r in rows if r["population"] == pop and r["series"] == series]
            ages = np.array([r["age"] for r in sel])
            values = np.array([r["value"] for r in sel])
            if series == "raw":
                ax.plot(ages, values, ".", color=color, markersize=4, alpha=0.55)
                continue
            style = "-" if series == "fitted" else ":"
            ax.plot(ages, values, style, color=color, linewidth=1.4,
                    label=f"{pop} {series}")
            lower = np.array([np.nan if r["lower"] is None else r["lower"] for r in sel])
            upper = np.array([np.nan if r["upper"] is None else r["upper"] for r in sel])
            if np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)):
                ax.fill_between(ages, lower, upper, color=color,
                                alpha=0.15 if series == "fitted" else 0.08, linewidth=0)
    _style(ax, "age", "log death rate", title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
