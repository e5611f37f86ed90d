"""End-to-end tests of the command line interface.

The expensive two-population fit lives in the session-scoped
``small_fit`` fixture; everything here layers commands on top of it or
runs deliberately tiny fits.
"""

from __future__ import annotations

import csv
import json
import shutil

import numpy as np
import pytest

import synthdata
from dlmgrad.cli import main

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _tiny_table(path, seed=0, n_ages=6):
    ages = np.arange(1, n_ages + 1)
    y = synthdata.declining_curve(ages)
    y = y + 0.02 * np.random.default_rng(seed).standard_normal(y.shape)
    table = synthdata.table_from_log_rates(("only",), ages, y[None, :])
    synthdata.write_table_csv(path, table)
    return path


def _tiny_fit_args(data, out, extra=()):
    return [
        "fit",
        "--data",
        str(data),
        "--out",
        str(out),
        "--iterations",
        "30",
        "--burn-in",
        "10",
        *extra,
    ]


class TestFitOutputs:
    def test_files_exist(self, small_fit):
        out, _ = small_fit
        for name in ("table.csv", "summary.csv", "vmatrix.csv", "draws.bin", "manifest.json", "fit.png"):
            assert (out / name).exists(), name
        assert (out / "fit.png").read_bytes()[:8] == PNG_MAGIC

    def test_summary_schema(self, small_fit):
        out, _ = small_fit
        rows = _read_csv(out / "summary.csv")
        assert set(rows[0]) == {"population", "age", "series", "mean", "median", "lower", "upper"}
        # Two populations, twenty ages, two series each.
        assert len(rows) == 2 * 20 * 2
        assert {r["series"] for r in rows} == {"fitted", "predictive"}
        assert {r["population"] for r in rows} == {"men", "women"}
        for r in rows:
            assert float(r["lower"]) <= float(r["median"]) <= float(r["upper"])

    def test_vmatrix_schema(self, small_fit):
        out, _ = small_fit
        rows = _read_csv(out / "vmatrix.csv")
        assert len(rows) == 4
        diag = [r for r in rows if r["row"] == r["col"]]
        assert all(float(r["mean"]) > 0 for r in diag)

    def test_manifest(self, small_fit):
        out, data = small_fit
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["kind"] == "fit"
        assert manifest["sampler"]["seed"] == 11
        assert manifest["sampler"]["iterations"] == 160
        assert manifest["data"]["populations"] == ["men", "women"]
        assert manifest["data"]["age_range"] == [1, 20]
        assert len(manifest["data"]["sha256"]) == 64
        assert manifest["model"]["common_term"] is False
        assert manifest["schedule"]
        assert manifest["files"]["figure"] == "fit.png"
        diag = manifest["diagnostics"]
        assert set(diag) >= {"max_rhat", "min_ess"}
        for value in diag.values():
            assert value is None or isinstance(value, float)
        assert all(manifest["checks"].values())

    def test_table_round_trip(self, small_fit, tmp_path):
        out, data = small_fit
        # The copied table refits to the same manifest inputs.
        assert (out / "table.csv").read_text(encoding="utf-8").splitlines()[0] == (
            "population,age,deaths,exposure"
        )


class TestForecast:
    def test_outputs(self, small_fit, tmp_path, capsys):
        out, _ = small_fit
        fc_dir = tmp_path / "fc"
        code = main(
            [
                "forecast",
                str(out),
                "--horizon",
                "5",
                "--terminal-age",
                "115",
                "--blend",
                "linear",
                "--out",
                str(fc_dir),
            ]
        )
        assert code == 0
        rows = _read_csv(fc_dir / "forecast.csv")
        # Twenty fitted plus five extended ages, three scales, two pops.
        assert len(rows) == 2 * 25 * 3
        assert {r["scale"] for r in rows} == {"log_rate", "rate", "death_prob"}
        assert {int(r["age"]) for r in rows} == set(range(1, 26))
        for r in rows:
            if r["scale"] == "death_prob":
                assert 0.0 < float(r["median"]) < 1.0
        manifest = json.loads((fc_dir / "forecast_manifest.json").read_text(encoding="utf-8"))
        assert manifest["kind"] == "forecast"
        assert manifest["config"] == {
            "horizon": 5,
            "terminal_age": 115,
            "blend": "linear",
            "delta": None,
        }
        assert manifest["ages"] == [1, 25]
        assert "crossing_age" in manifest
        assert (fc_dir / "forecast.png").read_bytes()[:8] == PNG_MAGIC
        text = capsys.readouterr().out
        assert "cross" in text

    def test_defaults_come_from_fit_manifest(self, small_fit, tmp_path):
        out, _ = small_fit
        copy = tmp_path / "fitcopy"
        shutil.copytree(out, copy)
        manifest_path = copy / "manifest.json"
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest["forecast_defaults"] = {
            "horizon": 4,
            "terminal_age": None,
            "blend": "none",
            "delta": 0.9,
        }
        manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
        assert main(["forecast", str(copy)]) == 0
        fc = json.loads((copy / "forecast_manifest.json").read_text(encoding="utf-8"))
        assert fc["config"] == {"horizon": 4, "terminal_age": None, "blend": "none", "delta": 0.9}
        assert fc["ages"] == [1, 24]
        # Default output directory is the fit directory itself.
        assert (copy / "forecast.csv").exists()

    def test_flag_overrides_manifest_default(self, small_fit, tmp_path):
        out, _ = small_fit
        copy = tmp_path / "fitcopy"
        shutil.copytree(out, copy)
        manifest_path = copy / "manifest.json"
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest["forecast_defaults"]["horizon"] = 4
        manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
        assert main(["forecast", str(copy), "--horizon", "2"]) == 0
        fc = json.loads((copy / "forecast_manifest.json").read_text(encoding="utf-8"))
        assert fc["config"]["horizon"] == 2

    def test_missing_horizon_is_a_parse_error(self, small_fit, tmp_path, capsys):
        out, _ = small_fit
        code = main(["forecast", str(out), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "error[parse]" in capsys.readouterr().err

    def test_bad_fit_dir(self, tmp_path, capsys):
        code = main(["forecast", str(tmp_path), "--horizon", "3"])
        assert code == 2
        assert "error[parse]" in capsys.readouterr().err


class TestPlotdata:
    def test_round_trip_preserves_text(self, small_fit, tmp_path):
        out, _ = small_fit
        dest = tmp_path / "plots"
        assert main(["plotdata", str(out), "--out", str(dest)]) == 0
        rows = _read_csv(dest / "plotdata.csv")
        raw = [r for r in rows if r["series"] == "raw"]
        fitted = [r for r in rows if r["series"] == "fitted"]
        predictive = [r for r in rows if r["series"] == "predictive"]
        assert len(raw) == 40
        assert len(fitted) == 40 and len(predictive) == 40
        assert all(r["lower"] == "" and r["upper"] == "" for r in raw)
        # Fitted medians are carried over byte for byte from summary.csv.
        summary = {
            (r["population"], r["age"], r["series"]): (r["median"], r["lower"], r["upper"])
            for r in _read_csv(out / "summary.csv")
        }
        for r in fitted:
            assert (r["value"], r["lower"], r["upper"]) == summary[(r["population"], r["age"], "fitted")]
        assert (dest / "plotdata.png").read_bytes()[:8] == PNG_MAGIC

    def test_rejects_foreign_summary(self, tmp_path, capsys):
        (tmp_path / "summary.csv").write_text("a,b\n1,2\n", encoding="utf-8")
        _tiny_table(tmp_path / "table.csv")
        code = main(["plotdata", str(tmp_path)])
        assert code == 2
        assert "does not look like a fit summary" in capsys.readouterr().err


class TestExportDraws:
    def test_export(self, small_fit, tmp_path):
        out, _ = small_fit
        dest = tmp_path / "draws.csv"
        assert main(["export-draws", str(out), "--out", str(dest)]) == 0
        lines = dest.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "draw,kind,label,age,value"
        draw_ids = {line.split(",", 1)[0] for line in lines[1:]}
        # 160 sweeps minus 40 burn-in, one chain.
        assert len(draw_ids) == 120
        kinds = {line.split(",")[1] for line in lines[1:]}
        assert kinds == {"state", "precision", "obs_cov"}


class TestSimulateMissing:
    def test_preset_and_custom_scenarios(self, small_fit, tmp_path, capsys):
        _, data = small_fit
        out = tmp_path / "sim"
        code = main(
            [
                "simulate-missing",
                "--data",
                str(data),
                "--out",
                str(out),
                "--scenario",
                "a:men",
                "--scenario",
                "gap=women:10-12",
                "--models",
                "joint,univariate",
                "--iterations",
                "40",
                "--burn-in",
                "10",
                "--seed",
                "3",
            ]
        )
        assert code == 0
        rows = _read_csv(out / "report.csv")
        assert len(rows) == 4
        assert {r["scenario"] for r in rows} == {"a", "gap"}
        assert {r["model"] for r in rows} == {"joint", "univariate"}
        a_rows = [r for r in rows if r["scenario"] == "a"]
        assert all(r["n_cells"] == "5" for r in a_rows)
        assert sum(r["best_mspe"] == "true" for r in a_rows) >= 1
        text = (out / "report.txt").read_text(encoding="utf-8")
        assert "scenario" in text and "gap" in text
        assert (out / "comparison.png").read_bytes()[:8] == PNG_MAGIC
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["kind"] == "simulate-missing"
        assert manifest["models"] == ["joint", "univariate"]
        assert manifest["scenarios"][0]["population"] == "men"
        assert capsys.readouterr().out.strip()

    def test_unknown_model(self, small_fit, tmp_path, capsys):
        _, data = small_fit
        code = main(
            [
                "simulate-missing",
                "--data",
                str(data),
                "--out",
                str(tmp_path / "s"),
                "--scenario",
                "a:men",
                "--models",
                "joint,oracle",
            ]
        )
        assert code == 2
        assert "unknown model 'oracle'" in capsys.readouterr().err

    def test_malformed_scenario(self, small_fit, tmp_path, capsys):
        _, data = small_fit
        base = ["simulate-missing", "--data", str(data), "--out", str(tmp_path / "s")]
        assert main(base + ["--scenario", "men"]) == 2
        assert main(base + ["--scenario", "men:5"]) == 2
        assert main(base + ["--scenario", "men:lo-hi"]) == 2
        capsys.readouterr()

    def test_nothing_recoverable(self, tmp_path, capsys):
        # Age 3 is absent from the table, so masking just it leaves no
        # held-out truth to score against.
        data = tmp_path / "gappy.csv"
        ages = np.arange(1, 7)
        y = synthdata.declining_curve(ages)
        table = synthdata.table_from_log_rates(("only",), ages, y[None, :])
        missing = np.zeros_like(table.missing)
        missing[0, 2] = True
        table = type(table)(
            populations=table.populations,
            ages=table.ages,
            deaths=table.deaths,
            exposure=table.exposure,
            missing=missing,
        )
        synthdata.write_table_csv(data, table)
        code = main(
            [
                "simulate-missing",
                "--data",
                str(data),
                "--out",
                str(tmp_path / "s"),
                "--scenario",
                "hole=only:3-3",
                "--models",
                "univariate",
            ]
        )
        assert code == 2
        assert "no cells with recoverable truth" in capsys.readouterr().err


class TestSeedPrecedence:
    def _seed_of(self, out):
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        return manifest["sampler"]["seed"]

    def test_flag_beats_config_and_env(self, tmp_path, monkeypatch):
        data = _tiny_table(tmp_path / "t.csv")
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 42\n", encoding="utf-8")
        monkeypatch.setenv("GRADUATE_SEED", "7")
        out = tmp_path / "a"
        assert main(_tiny_fit_args(data, out, ("--config", str(cfg), "--seed", "99"))) == 0
        assert self._seed_of(out) == 99

    def test_config_beats_env(self, tmp_path, monkeypatch):
        data = _tiny_table(tmp_path / "t.csv")
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 42\n", encoding="utf-8")
        monkeypatch.setenv("GRADUATE_SEED", "7")
        out = tmp_path / "b"
        assert main(_tiny_fit_args(data, out, ("--config", str(cfg)))) == 0
        assert self._seed_of(out) == 42

    def test_env_fallback(self, tmp_path, monkeypatch):
        data = _tiny_table(tmp_path / "t.csv")
        monkeypatch.setenv("GRADUATE_SEED", "7")
        out = tmp_path / "c"
        assert main(_tiny_fit_args(data, out)) == 0
        assert self._seed_of(out) == 7

    def test_default_seed_is_one(self, tmp_path, monkeypatch):
        data = _tiny_table(tmp_path / "t.csv")
        monkeypatch.delenv("GRADUATE_SEED", raising=False)
        out = tmp_path / "d"
        assert main(_tiny_fit_args(data, out)) == 0
        assert self._seed_of(out) == 1

    def test_invalid_env_seed(self, tmp_path, monkeypatch, capsys):
        data = _tiny_table(tmp_path / "t.csv")
        monkeypatch.setenv("GRADUATE_SEED", "soon")
        code = main(_tiny_fit_args(data, tmp_path / "e"))
        assert code == 2
        assert "GRADUATE_SEED must be an integer" in capsys.readouterr().err


class TestErrorChannel:
    def test_parse_exit_code(self, tmp_path, capsys):
        code = main(["fit", "--data", str(tmp_path / "absent.csv")])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error[parse]:")

    def test_domain_exit_code(self, tmp_path, capsys):
        data = _tiny_table(tmp_path / "t.csv")
        cfg = tmp_path / "run.cfg"
        cfg.write_text("populations = ghost\n", encoding="utf-8")
        code = main(_tiny_fit_args(data, tmp_path / "o", ("--config", str(cfg))))
        assert code == 3
        assert capsys.readouterr().err.startswith("error[domain]:")

    def test_missing_config_file(self, tmp_path, capsys):
        data = _tiny_table(tmp_path / "t.csv")
        code = main(_tiny_fit_args(data, tmp_path / "o", ("--config", str(tmp_path / "no.cfg"))))
        assert code == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["--version"])
        assert excinfo.value.code == 0
        assert capsys.readouterr().out.startswith("dlmgrad ")
