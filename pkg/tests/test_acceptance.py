"""Release acceptance suite.

Each test exercises one core guarantee end to end and prints a single
``criterion N (...): PASS/FAIL`` line with timing, so a full run reads
as a checklist. Tolerances and runtime budgets are asserted, not just
reported. The final data-reproduction check only runs when the user
points DLMGRAD_ONS_DATA at a real dataset; it is skipped otherwise.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import synthdata
from dlmgrad.cli import main
from dlmgrad.data import central_rates, mask_ages, select_populations
from dlmgrad.distributions import RngStream, mvn_sample, wishart_mean
from dlmgrad.forecast import (
    ForecastConfig,
    blend_convergence,
    extrapolate,
    first_crossing_age,
)
from dlmgrad.forecast import summarize_predictive
from dlmgrad.inference import (
    backward_sample,
    forward_filter,
    smooth_moments,
    state_discounts,
)
from dlmgrad.metrics import compare
from dlmgrad.model import (
    DiscountSchedule,
    DiscountSegment,
    build_common_term,
    build_local_linear,
)
from dlmgrad.sampler import (
    GibbsConfig,
    conditional_normal,
    impute_missing,
    predictive_log_rate_draws,
    run_gibbs,
    sample_phi,
    summarize,
)
from gaussian_oracle import JointOracle, implied_innovations

REPO_ROOT = Path(__file__).resolve().parents[1]

# Collected criterion lines; conftest echoes them after the run so they
# survive pytest's output capture.
REPORT_LINES: list[str] = []


def _report(num: int, title: str, ok: bool, detail: str, started: float, cap: float | None = None):
    elapsed = time.perf_counter() - started
    line = f"criterion {num} ({title}): {'PASS' if ok else 'FAIL'} - {detail} ({elapsed:.1f}s)"
    REPORT_LINES.append(line)
    print(line)
    assert ok, line
    if cap is not None:
        assert elapsed < cap, f"criterion {num} ran {elapsed:.1f}s, budget {cap:.0f}s"


def _block_spans(spec):
    spans = [(2 * k, 2 * k + 2) for k in range(spec.n_populations)]
    if spec.common_term:
        spans.append((2 * spec.n_populations, 2 * spec.n_populations + 1))
    return spans


def _per_age_schedule(rng, ages, populations):
    segments = []
    for age in ages:
        segments.append(
            DiscountSegment(delta=float(rng.uniform(0.55, 1.0)), age_lo=int(age), age_hi=int(age))
        )
    if len(populations) > 1 and rng.random() < 0.5:
        for age in ages:
            segments.append(
                DiscountSegment(
                    delta=float(rng.uniform(0.55, 1.0)),
                    age_lo=int(age),
                    age_hi=int(age),
                    population=populations[-1],
                )
            )
    return DiscountSchedule(tuple(segments))


def test_criterion_1_filter_and_smoother_match_joint_gaussian_oracle():
    started = time.perf_counter()
    master = np.random.default_rng(20260819)
    worst = 0.0
    instances = 24
    for _ in range(instances):
        j = int(master.integers(1, 3))
        n = int(master.integers(4, 7))
        common = j == 2 and master.random() < 0.4
        block = bool(master.random() < 0.3)
        pops = tuple(f"p{k + 1}" for k in range(j))
        builder = build_common_term if common else build_local_linear
        spec = builder(pops)
        spec = replace(
            spec,
            init_mean=master.normal(-4.0, 1.0, size=spec.state_dim),
            init_cov=float(master.uniform(0.5, 2.0)) * np.eye(spec.state_dim),
        )
        first = int(master.integers(1, 60))
        ages = np.arange(first, first + n)
        schedule = _per_age_schedule(master, ages, pops)
        v = synthdata.random_spd(master, j, scale=0.3)
        y = master.normal(-4.0, 0.7, size=(j, n))

        deltas = [state_discounts(spec, schedule, int(a)) for a in ages]
        spans = _block_spans(spec) if block else None
        w_list = implied_innovations(
            spec.obs_matrix, spec.evo_matrix, spec.init_cov, v, deltas, block_spans=spans
        )
        oracle = JointOracle(
            spec.obs_matrix, spec.evo_matrix, spec.init_mean, spec.init_cov, v, w_list
        )

        fpass = forward_filter(spec, y, ages, v, schedule, block_discount=block)
        for x in range(1, n + 1):
            for got, want in (
                (fpass.prior_means[x - 1], oracle.prior_state(x, y)),
                (fpass.forecast_means[x - 1], oracle.forecast(x, y)),
                (fpass.post_means[x - 1], oracle.filtered(x, y)),
            ):
                worst = max(worst, float(np.abs(got - want[0]).max()))
            worst = max(worst, float(np.abs(fpass.prior_covs[x - 1] - oracle.prior_state(x, y)[1]).max()))
            worst = max(worst, float(np.abs(fpass.forecast_covs[x - 1] - oracle.forecast(x, y)[1]).max()))
            worst = max(worst, float(np.abs(fpass.post_covs[x - 1] - oracle.filtered(x, y)[1]).max()))
        means, covs = smooth_moments(fpass, spec)
        for x in range(n + 1):
            mean, cov = oracle.smoothed(x, y)
            worst = max(worst, float(np.abs(means[x] - mean).max()))
            worst = max(worst, float(np.abs(covs[x] - cov).max()))
    _report(
        1,
        "filter and smoother vs joint-normal oracle",
        worst < 1e-8,
        f"max deviation {worst:.2e} over {instances} random instances",
        started,
        cap=10.0,
    )


def test_criterion_2_trajectory_sampler_reproduces_smoothing_law():
    started = time.perf_counter()
    spec = build_local_linear(1, prior_mean=[-4.0, 0.0], prior_scale=1.5)
    ages = np.arange(1, 5)
    y = np.array([[-4.2, -4.0, -4.3, -4.1]])
    v = np.array([[0.3]])
    schedule = DiscountSchedule(
        tuple(
            DiscountSegment(delta=d, age_lo=int(a), age_hi=int(a))
            for a, d in zip(ages, (0.9, 0.7, 0.95, 0.8))
        )
    )
    deltas = [state_discounts(spec, schedule, int(a)) for a in ages]
    w_list = implied_innovations(spec.obs_matrix, spec.evo_matrix, spec.init_cov, v, deltas)
    oracle = JointOracle(spec.obs_matrix, spec.evo_matrix, spec.init_mean, spec.init_cov, v, w_list)
    mean_oracle, cov_oracle = oracle.smoothed_joint(y)

    n_draws = 200_000
    fpass = forward_filter(spec, y, ages, v, schedule)
    flat = backward_sample(fpass, spec, RngStream(7), size=n_draws).reshape(n_draws, -1)
    emp_mean = flat.mean(axis=0)
    emp_cov = np.cov(flat.T)

    var = np.diag(cov_oracle)
    se_mean = np.sqrt(var / n_draws)
    se_cov = np.sqrt((np.outer(var, var) + cov_oracle**2) / n_draws)
    z_mean = np.abs(emp_mean - mean_oracle) / se_mean
    z_cov = np.abs(emp_cov - cov_oracle) / se_cov
    worst = max(float(z_mean.max()), float(z_cov.max()))
    _report(
        2,
        "trajectory draws match smoothing moments",
        worst <= 3.0,
        f"max |z| {worst:.2f} across {mean_oracle.size} means and {cov_oracle.size} covariances, {n_draws} draws",
        started,
        cap=60.0,
    )


def test_criterion_3_precision_draws_match_conjugate_posterior():
    started = time.perf_counter()
    spec = build_local_linear(2)
    n = 6
    rng = np.random.default_rng(31)
    states = rng.normal(-4.0, 0.5, size=(n + 1, spec.state_dim))
    fitted = (states[1:] @ spec.obs_matrix.T).T
    r0 = rng.normal(0.0, 0.3, size=n)
    r1 = 0.8 * r0 + 0.6 * rng.normal(0.0, 0.3, size=n)
    y = fitted + np.stack([r0, r1])
    prior = spec.wishart
    resid = y - fitted
    analytic = wishart_mean(prior.df0 + n / 2.0, prior.rate0 + 0.5 * (resid @ resid.T))

    n_draws = 100_000
    stream = RngStream(5150)
    acc = np.zeros((2, 2))
    for _ in range(n_draws):
        acc += sample_phi(states, y, spec, prior, stream)
    rel = np.abs(acc / n_draws - analytic) / np.abs(analytic)
    worst = float(rel.max())
    _report(
        3,
        "precision sampler matches conjugate posterior mean",
        worst < 0.02,
        f"max relative error {worst:.4f} over {n_draws} draws",
        started,
        cap=30.0,
    )


def test_criterion_4_imputation_matches_conditional_normal():
    started = time.perf_counter()
    # Worked two-population case first: observing a residual of +0.5 in
    # the first series shifts the second by 0.45 and leaves variance
    # 1 - 0.9^2 = 0.19.
    v = np.array([[1.0, 0.9], [0.9, 1.0]])
    gain, cond = conditional_normal(v, [0], [1])
    exact_ok = abs(gain[0, 0] - 0.9) < 1e-12 and abs(cond[0, 0] - 0.19) < 1e-12
    spec2 = build_local_linear(2)
    state = np.array([-4.0, 0.0, -4.5, 0.0])
    fitted = spec2.obs_matrix @ state
    y_row = np.array([fitted[0] + 0.5, np.nan])
    miss_row = np.array([False, True])
    got = impute_missing(state, v, y_row, miss_row, spec2, RngStream(123))
    hand_mean = np.array([fitted[1] + 0.9 * 0.5])
    want = np.atleast_1d(mvn_sample(hand_mean, np.array([[0.19]]), RngStream(123)))
    exact_ok = exact_ok and abs(float(got[0]) - float(want[0])) < 1e-12

    # Then empirical checks on random partitions up to four populations.
    master = np.random.default_rng(2718)
    n_draws = 100_000
    worst = 0.0
    cases = []
    for label, j, n_miss in (("2 of 4 missing", 4, 2), ("1 of 3 missing", 3, 1), ("all 4 missing", 4, 4)):
        spec = build_local_linear(j)
        cov = synthdata.random_spd(master, j, scale=0.5)
        state = master.normal(-4.0, 0.8, size=spec.state_dim)
        fitted = spec.obs_matrix @ state
        miss_row = np.zeros(j, dtype=bool)
        miss_row[master.choice(j, size=n_miss, replace=False)] = True
        y_row = fitted + master.normal(0.0, 0.4, size=j)
        y_row[miss_row] = np.nan
        obs = np.flatnonzero(~miss_row)
        miss = np.flatnonzero(miss_row)
        if obs.size:
            gain, cond = conditional_normal(cov, obs, miss)
            mean = fitted[miss] + gain @ (y_row[obs] - fitted[obs])
        else:
            mean, cond = fitted[miss], cov[np.ix_(miss, miss)]

        stream = RngStream(424242)
        draws = np.empty((n_draws, n_miss))
        for i in range(n_draws):
            draws[i] = impute_missing(state, cov, y_row, miss_row, spec, stream)
        var = np.diag(cond)
        z_mean = np.abs(draws.mean(axis=0) - mean) / np.sqrt(var / n_draws)
        emp_cov = np.cov(draws.T).reshape(n_miss, n_miss)
        z_cov = np.abs(emp_cov - cond) / np.sqrt((np.outer(var, var) + cond**2) / n_draws)
        case_worst = max(float(z_mean.max()), float(z_cov.max()))
        worst = max(worst, case_worst)
        cases.append(f"{label} |z| {case_worst:.2f}")
    _report(
        4,
        "imputation equals conditional normal",
        exact_ok and worst <= 3.0,
        f"worked case exact to 1e-12; {'; '.join(cases)} with {n_draws} draws each",
        started,
    )


def test_criterion_5_near_unit_discount_recovers_a_straight_line():
    started = time.perf_counter()
    ages = np.arange(1, 41)
    truth = -4.6 - 0.035 * (ages - 1)
    rng = np.random.default_rng(12)
    y = truth + 0.03 * rng.standard_normal(ages.size)
    table = synthdata.table_from_log_rates(("only",), ages, y[None, :])
    draws = run_gibbs(
        build_local_linear(("only",)),
        central_rates(table),
        DiscountSchedule.uniform(0.9999),
        GibbsConfig(iterations=500, burn_in=120, seed=17),
    )
    median = summarize(draws).fitted_median[0]
    line = np.polyval(np.polyfit(ages, median, 1), ages)
    worst = float(np.abs(median - line).max())
    _report(
        5,
        "discount near one collapses the fit to a line",
        worst < 1e-2,
        f"max distance from its own least-squares line {worst:.2e}",
        started,
        cap=30.0,
    )


def _posterior_mean_imputation_rmse(draws, y_true_panel):
    filled = draws.missing_values.mean(axis=0)
    errors = []
    for column, (i, k) in enumerate(zip(*np.nonzero(draws.missing_mask))):
        errors.append(filled[column] - y_true_panel[i, k])
    return float(np.sqrt(np.mean(np.square(errors))))


def test_criterion_6_pooling_beats_univariate_and_common_term_beats_plain_joint():
    started = time.perf_counter()
    replicates = 50
    hold_out = ((3, 16),)
    cells = [("A", age) for age in range(3, 17)]
    # Stiff population blocks and a looser shared scope: curvature the
    # populations share must be carried by the pooled structure, which
    # is exactly the regime the common-term model is built for.
    schedule = DiscountSchedule(
        (
            DiscountSegment(delta=0.80),
            DiscountSegment(delta=0.99, population="A"),
            DiscountSegment(delta=0.99, population="B"),
        )
    )
    gibbs = dict(iterations=240, burn_in=90)
    joint_rmse_wins = 0
    ct_wins = {"mspe": 0, "mape": 0, "wci": 0}
    for r in range(replicates):
        seed = 1000 + r
        table, y_true, _ = synthdata.bivariate_noisy_table(seed, wave=0.12)
        masked = mask_ages(table, "A", hold_out)
        truth = central_rates(table)

        d_uni = run_gibbs(
            build_local_linear(("A",)),
            central_rates(select_populations(masked, ("A",))),
            schedule,
            GibbsConfig(seed=seed, **gibbs),
        )
        d_joint = run_gibbs(
            build_local_linear(("A", "B")),
            central_rates(masked),
            schedule,
            GibbsConfig(seed=seed, **gibbs),
        )
        d_ct = run_gibbs(
            build_common_term(("A", "B")),
            central_rates(masked),
            schedule,
            GibbsConfig(seed=seed, **gibbs),
        )

        uni_rmse = _posterior_mean_imputation_rmse(d_uni, y_true[:1])
        joint_rmse = _posterior_mean_imputation_rmse(d_joint, y_true)
        joint_rmse_wins += joint_rmse < uni_rmse

        fits = []
        for label, d in (("joint", d_joint), ("joint-ct", d_ct)):
            pred = predictive_log_rate_draws(d)
            fits.append(
                (label, summarize_predictive(pred, d.populations, d.ages, (0.025, 0.975)), truth)
            )
        by_model = {row.model: row for row in compare(fits, cells).rows}
        ct_wins["mspe"] += by_model["joint-ct"].mspe <= by_model["joint"].mspe
        ct_wins["mape"] += by_model["joint-ct"].mape <= by_model["joint"].mape
        ct_wins["wci"] += by_model["joint-ct"].interval_width <= by_model["joint"].interval_width

    ok = joint_rmse_wins >= 0.9 * replicates and all(
        wins >= 0.8 * replicates for wins in ct_wins.values()
    )
    _report(
        6,
        "pooling improves imputation and the common term wins the joint comparison",
        ok,
        (
            f"joint imputation beat univariate in {joint_rmse_wins}/{replicates}; "
            f"common term no worse on mspe {ct_wins['mspe']}/{replicates}, "
            f"mape {ct_wins['mape']}/{replicates}, width {ct_wins['wci']}/{replicates}"
        ),
        started,
        cap=600.0,
    )


def test_criterion_7_terminal_age_blending_and_crossing_diagnostic():
    started = time.perf_counter()
    ages = np.arange(1, 31)
    y = np.stack(
        [
            -5.0 - 0.03 * (ages - 1),
            np.full(ages.size, -5.93),
        ]
    )
    rng = np.random.default_rng(8)
    table = synthdata.table_from_log_rates(("fast", "flat"), ages, y + 0.02 * rng.standard_normal(y.shape))
    draws = run_gibbs(
        build_local_linear(("fast", "flat")),
        central_rates(table),
        DiscountSchedule.uniform(0.95),
        GibbsConfig(iterations=300, burn_in=80, seed=23),
    )
    config = ForecastConfig(horizon=90, terminal_age=115, blend="linear")
    ext = extrapolate(draws, config, DiscountSchedule.uniform(0.95))
    ext_ages = np.arange(31, 121)
    blended = blend_convergence(ext, ext_ages, 30, config)
    medians = np.quantile(blended, 0.5, axis=0)
    tail = ext_ages >= 115
    tail_gap = float(np.abs(medians[0, tail] - medians[1, tail]).max())

    unblended = np.quantile(ext, 0.5, axis=0)
    crossing = first_crossing_age(unblended, ext_ages)
    ok = tail_gap <= 1e-12 and crossing is not None and 31 <= crossing <= 45
    _report(
        7,
        "blended curves coincide from the terminal age; crossings are flagged",
        ok,
        f"max median gap beyond the terminal age {tail_gap:.1e}; unblended curves cross at age {crossing}",
        started,
        cap=60.0,
    )


def test_criterion_8_fit_command_is_byte_deterministic(tmp_path):
    started = time.perf_counter()
    ages = np.arange(1, 13)
    rng = np.random.default_rng(3)
    y = synthdata.declining_curve(ages, -4.9, -0.04) + 0.03 * rng.standard_normal(ages.size)
    data = tmp_path / "table.csv"
    synthdata.write_table_csv(data, synthdata.table_from_log_rates(("only",), ages, y[None, :]))
    tracked = ("summary.csv", "vmatrix.csv", "table.csv", "draws.bin")
    contents = []
    for run in ("first", "second"):
        out = tmp_path / run
        code = main(
            [
                "fit",
                "--data",
                str(data),
                "--out",
                str(out),
                "--seed",
                "5",
                "--iterations",
                "80",
                "--burn-in",
                "20",
            ]
        )
        assert code == 0
        contents.append({name: (out / name).read_bytes() for name in tracked})
    same = all(contents[0][name] == contents[1][name] for name in tracked)
    _report(
        8,
        "repeated fit runs are byte identical",
        same,
        "summary.csv, vmatrix.csv, table.csv and draws.bin all match",
        started,
    )


@pytest.mark.skipif(
    not os.environ.get("DLMGRAD_ONS_DATA"),
    reason="set DLMGRAD_ONS_DATA to a population,age,deaths,exposure csv to run the reproduction study",
)
def test_criterion_9_reproduction_script_on_real_data(tmp_path):
    started = time.perf_counter()
    out = tmp_path / "reproduction"
    proc = subprocess.run(
        [
            sys.executable,
            str(REPO_ROOT / "scripts" / "reproduce_ons_studies.py"),
            "--data",
            os.environ["DLMGRAD_ONS_DATA"],
            "--out",
            str(out),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads((out / "reproduction.json").read_text(encoding="utf-8"))
    figures = [out / name for name in ("study1.png", "study2.png", "study3.png")]
    ok = (
        report["band_coverage"] >= 0.9
        and report["male_above_female_share"] >= 0.9
        and all(fig.exists() for fig in figures)
    )
    _report(
        9,
        "reproduction study on user-supplied data",
        ok,
        (
            f"fitted bands cover {report['band_coverage']:.0%} of raw points; male curve above "
            f"female at {report['male_above_female_share']:.0%} of adult ages"
        ),
        started,
    )
