import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mistr.cli import (
    CONFIG_DEFAULTS,
    EXIT_ESTIMATION,
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    main,
    parse_config,
    _config_to_params,
)


def _write_config(path, **overrides):
    base = {
        "method": "mistr", "M": 40, "Q": 1, "K": 3, "n_min": 6, "A": 4,
        "trees": 32, "ell": 8, "min_node": 5, "t_max": 4, "horizon": 3,
        "seed": 5,
    }
    base.update(overrides)
    path.write_text("\n".join(f"{k} = {v}" for k, v in base.items()) + "\n")
    return path


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = main(["simulate", "--setting", "4", "--n", "250", "--seed", "7",
                 "--out", str(out), "--n-mc", "400"])
    assert code == EXIT_OK
    return out


class TestSimulate:
    def test_outputs_present_with_manifest_rate(self, sim_dir):
        assert (sim_dir / "data.csv").exists()
        assert (sim_dir / "truth.csv").exists()
        assert (sim_dir / "quantiles.csv").exists()
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert abs(manifest["diagnostics"]["censoring_rate"] - 0.21) < 0.08

    def test_rerun_is_byte_identical(self, sim_dir, tmp_path):
        out2 = tmp_path / "again"
        assert main(["simulate", "--setting", "4", "--n", "250", "--seed", "7",
                     "--out", str(out2), "--n-mc", "400"]) == EXIT_OK
        for name in ("data.csv", "truth.csv", "quantiles.csv"):
            assert (sim_dir / name).read_bytes() == (out2 / name).read_bytes()

    def test_iv_setting_emits_instrument_column(self, tmp_path):
        out = tmp_path / "iv"
        assert main(["simulate", "--setting", "201", "--n", "200", "--seed", "1",
                     "--out", str(out), "--skip-truth"]) == EXIT_OK
        header = (out / "data.csv").read_text().splitlines()[0].split(",")
        assert "z" in header

    def test_unknown_setting_exits_validation(self, tmp_path):
        assert main(["simulate", "--setting", "zzz", "--n", "10",
                     "--out", str(tmp_path / "x")]) == EXIT_VALIDATION

    def test_unwritable_path_exits_io(self):
        assert main(["simulate", "--setting", "4", "--n", "10",
                     "--out", "/proc/definitely/not/writable"]) == EXIT_IO


class TestConfig:
    def test_paper_default_config_accepted(self, tmp_path):
        cfg = _write_config(tmp_path / "c.txt", M=1000, Q=3, A=200, trees=2000,
                            ell=8, t_max=12, horizon=11)
        parsed = parse_config(cfg)
        study, g, rist, forest = _config_to_params(parsed)
        assert forest.n_trees == 2000 and forest.ell == 8
        assert rist.n_imputations == 200

    def test_horizon_beyond_tmax_rejected(self, tmp_path):
        cfg = _write_config(tmp_path / "c.txt", t_max=3, horizon=4)
        with pytest.raises(Exception):
            _config_to_params(parse_config(cfg))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("method = mistr\nbogus = 3\nt_max = 4\nhorizon = 3\n")
        from mistr.errors import ValidationError
        with pytest.raises(ValidationError, match="bogus"):
            parse_config(path)

    def test_defaults_fill_in(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("method = ipcw\nt_max = 4\nhorizon = 3\n")
        cfg = parse_config(path)
        assert cfg["trees"] == CONFIG_DEFAULTS["trees"]
        assert cfg["clamp"] == CONFIG_DEFAULTS["clamp"]


@pytest.fixture(scope="module")
def fit_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    cfg = _write_config(out / "cfg.txt")
    code = main(["fit", "--data", str(sim_dir / "data.csv"),
                 "--config", str(cfg), "--out", str(out / "run"),
                 "--dump-imputations"])
    assert code == EXIT_OK
    return out / "run"


class TestFitPredict:
    def test_model_artifacts_and_imputation_dump(self, fit_dir):
        assert (fit_dir / "model" / "model.json").exists()
        assert (fit_dir / "model" / "rist.npz").exists()
        dumps = sorted((fit_dir / "imputations").glob("*.csv"))
        assert len(dumps) == 4

    def test_predict_on_training_covariates(self, fit_dir, sim_dir, tmp_path):
        out_csv = tmp_path / "est.csv"
        code = main(["predict", "--model", str(fit_dir),
                     "--queries", str(sim_dir / "data.csv"),
                     "--out", str(out_csv)])
        assert code == EXIT_OK
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 250
        for row in rows:
            a_n = 4 - int(row["n_excluded_imputations"])
            total = float(row["total_var"])
            rhs = float(row["within_var"]) + (1 + 1 / a_n) * float(row["between_var"])
            assert abs(total - rhs) <= 1e-12

    def test_iv_method_without_instrument_rejected(self, sim_dir, tmp_path):
        cfg = _write_config(tmp_path / "cfg.txt", method="mistr-iv")
        code = main(["fit", "--data", str(sim_dir / "data.csv"),
                     "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert code == EXIT_VALIDATION

    def test_single_imputation_variance_na(self, sim_dir, tmp_path):
        cfg = _write_config(tmp_path / "cfg.txt", A=1)
        run = tmp_path / "run"
        assert main(["fit", "--data", str(sim_dir / "data.csv"),
                     "--config", str(cfg), "--out", str(run)]) == EXIT_OK
        out_csv = tmp_path / "est.csv"
        assert main(["predict", "--model", str(run),
                     "--queries", str(sim_dir / "quantiles.csv"),
                     "--out", str(out_csv)]) == EXIT_OK
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        assert all(row["total_var"] == "nan" for row in rows)

    def test_estimation_failure_exit_code(self, tmp_path):
        # every unit censored before the horizon: nothing informative remains
        data = tmp_path / "d.csv"
        lines = ["x1,w,time,event"]
        rng = np.random.default_rng(0)
        for i in range(40):
            lines.append(f"{rng.random():.3f},{i % 2},1,0")
        data.write_text("\n".join(lines) + "\n")
        cfg = _write_config(tmp_path / "cfg.txt", method="cf-complete",
                            t_max=5, horizon=4)
        code = main(["fit", "--data", str(data), "--config", str(cfg),
                     "--out", str(tmp_path / "run")])
        assert code == EXIT_ESTIMATION


class TestBenchmarkReport:
    def test_smoke_benchmark_and_report(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["benchmark", "--settings", "4", "--profile", "smoke",
                     "--out", str(out), "--seed", "3"])
        assert code == EXIT_OK
        scatter = (out / "scatter_4_mistr.csv").read_text().splitlines()
        assert len(scatter) - 1 == 200  # smoke profile test size
        assert main(["report", "--results", str(out)]) == EXIT_OK
        report = (out / "report.md").read_text()
        assert "mistr" in report and "ipcw" in report
        # winner bolding marks the row minimum
        payload = json.loads((out / "benchmark_results.json").read_text())
        rnd_mse = {r["method"]: r["mean"] for r in payload["results"]
                   if r["test_set"] == "random" and r["metric"] == "mse"}
        best = min(rnd_mse, key=rnd_mse.get)
        row = next(l for l in report.splitlines()
                   if l.startswith("| 4 | random | mse"))
        cells = [c.strip() for c in row.split("|")[4:-1]]
        methods = [m.strip() for m in report.splitlines()[8].split("|")[4:-1]]
        assert cells[methods.index(best)].startswith("**")

    def test_benchmark_order_invariance(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out, order in ((a, "4,3"), (b, "3,4")):
            assert main(["benchmark", "--settings", order, "--profile", "smoke",
                         "--methods", "cf-complete", "--out", str(out),
                         "--seed", "1"]) == EXIT_OK
        assert (a / "benchmark_results.csv").read_bytes() == \
               (b / "benchmark_results.csv").read_bytes()

    def test_empty_report(self, tmp_path):
        assert main(["report", "--results", str(tmp_path)]) == EXIT_OK
