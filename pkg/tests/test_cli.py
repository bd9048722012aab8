"""End-to-end command-line behavior: artifacts, determinism, exit codes."""

import json
from pathlib import Path

import pytest

from sparsefda.cli import main, _read_table

SCENARIO = {
    "window": [0, 12],
    "n_subjects": 60,
    "time_design": {"kind": "uniform", "min_obs": 4, "max_obs": 7},
    "variables": [
        {"name": "len",
         "mean": {"kind": "affine", "intercept": 60, "slope": 1.0},
         "noise_sd": 0.5,
         "components": [
             {"eigenvalue": 4.0, "basis": "fourier", "index": 1},
             {"eigenvalue": 1.0, "basis": "fourier", "index": 2},
         ]},
        {"name": "wt",
         "mean": {"kind": "saturating", "base": 3, "gain": 6, "rate": 0.25},
         "noise_sd": 0.4,
         "components": [
             {"eigenvalue": 2.0, "basis": "legendre", "index": 0},
             {"eigenvalue": 0.5, "basis": "legendre", "index": 1},
         ]},
    ],
    "scalar_fields": [
        {"name": "mom_edu", "kind": "numeric", "mean": 8, "sd": 3},
        {"name": "sex", "kind": "categorical", "levels": ["f", "m"],
         "probs": [0.5, 0.5], "baseline": "f"},
    ],
    "cluster": {"field": "site", "count": 4, "effect_sd": 0.8},
    "outcome": {
        "name": "dev_score", "intercept": 100,
        "terms": [
            {"kind": "score", "variable": "len", "component": 1,
             "coef": 3.0},
            {"kind": "numeric", "field": "mom_edu", "coef": 0.5},
            {"kind": "level", "field": "sex", "level": "m", "coef": -1.0},
        ],
        "noise_sd": 2.0,
    },
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    scen = root / "scenario.json"
    scen.write_text(json.dumps(SCENARIO))
    return root, scen


def run_pipeline(scen, out, extra=()):
    return main([
        "pipeline", "--scenario", str(scen), "--seed", "5",
        "--out", str(out), "--grid-size", "21", "--bw-mean", "1.0",
        "--bw-cov", "1.0", "--bw-cross", "2.0", "--k-boot", "8",
        *extra,
    ])


@pytest.fixture(scope="module")
def run1(ws):
    root, scen = ws
    out = root / "run1"
    assert run_pipeline(scen, out) == 0
    return out


def _file_bytes(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())
            if p.is_file()}


def _manifest(d: Path) -> dict:
    return json.loads((d / "manifest.json").read_text())


class TestPipeline:
    def test_stages_and_artifacts(self, run1):
        man = _manifest(run1)
        assert man["command"] == "pipeline"
        assert {s: v["status"] for s, v in man["stages"].items()} == {
            "data": "ok", "residualize": "ok", "fpca": "ok",
            "score_lm": "ok", "correlations": "ok", "fcr": "ok",
        }
        for name in man["artifacts"]:
            assert (run1 / name).is_file(), name
        expected = {
            "observations.csv", "subjects.csv", "schema.json", "truth.json",
            "residualization.json", "residuals.csv",
            "len_model.json", "len_fve.csv", "len_scores.csv",
            "len_design_counts.csv", "wt_model.json", "wt_fve.csv",
            "wt_scores.csv", "wt_design_counts.csv",
            "score_lm_single.json", "score_lm_single.csv",
            "score_lm_joint.json", "score_lm_joint.csv",
            "correlations.csv", "corr_traj_len.csv", "corr_traj_wt.csv",
            "corr_len_wt.csv", "fcr.json", "fcr.csv",
        }
        assert expected <= set(man["artifacts"])

    def test_manifest_covers_directory(self, run1):
        files = set(_file_bytes(run1)) - {"manifest.json"}
        man = _manifest(run1)
        assert files == set(man["artifacts"])

    def test_rerun_is_byte_identical(self, ws, run1):
        root, scen = ws
        out2 = root / "run2"
        assert run_pipeline(scen, out2) == 0
        b1, b2 = _file_bytes(run1), _file_bytes(out2)
        assert sorted(b1) == sorted(b2)
        for name in b1:
            assert b1[name] == b2[name], f"{name} differs between runs"
        assert _manifest(run1)["config_hash"] == _manifest(out2)["config_hash"]

    def test_threads_do_not_change_bytes(self, ws, run1):
        root, scen = ws
        out4 = root / "run4"
        assert run_pipeline(scen, out4, ["--threads", "4"]) == 0
        b1, b4 = _file_bytes(run1), _file_bytes(out4)
        assert sorted(b1) == sorted(b4)
        for name in b1:
            assert b1[name] == b4[name], f"{name} differs with threads=4"

    def test_csv_meta_lines(self, run1):
        man = _manifest(run1)
        lines = (run1 / "len_fve.csv").read_text().splitlines()
        assert lines[0].startswith("# tool: sparsefda ")
        assert lines[1] == f"# config: {man['config_hash']}"
        assert lines[2] == "# seed: 5"

    def test_table_schemas(self, run1):
        header, rows = _read_table(run1 / "len_fve.csv")
        assert header == ["variable", "component", "eigenvalue", "fve",
                          "cumulative_fve", "retained"]
        assert rows and rows[0]["variable"] == "len"

        header, rows = _read_table(run1 / "correlations.csv")
        assert header == ["column", "r", "lo50", "hi50", "lo95", "hi95",
                          "n", "k_boot"]
        assert {r["column"] for r in rows} >= {"len.pc1", "wt.pc1"}
        for r in rows:
            lo, hi = float(r["lo95"]), float(r["hi95"])
            assert lo <= float(r["r"]) <= hi

        header, _ = _read_table(run1 / "fcr.csv")
        assert header[:7] == ["time", "coefficient", "estimate",
                              "std_estimate", "cond", "ridge_used",
                              "singular"]

        header, rows = _read_table(run1 / "score_lm_single.csv")
        assert header == ["term", "estimate", "lo95", "hi95", "p"]
        terms = [r["term"] for r in rows]
        assert terms[0] == "intercept"
        assert any(":" in t for t in terms)  # interaction present

    def test_stage_isolation_without_scalars(self, ws, run1):
        root, _ = ws
        out = root / "iso"
        rc = main([
            "pipeline", "--data", str(run1 / "observations.csv"),
            "--schema", str(run1 / "schema.json"),
            "--outcome-field", "dev_score",
            "--out", str(out), "--grid-size", "21",
            "--bw-mean", "1.0", "--bw-cov", "1.0",
        ])
        assert rc == 3
        man = _manifest(out)
        assert man["stages"]["residualize"]["status"] == "failed"
        assert man["stages"]["fpca"]["status"] == "ok"
        for later in ("score_lm", "correlations", "fcr"):
            assert man["stages"][later]["status"] == "skipped"
        assert (out / "len_model.json").is_file()
        assert not (out / "residuals.csv").exists()


class TestSubcommands:
    def test_ingest(self, ws, run1, tmp_path):
        rc = main(["ingest", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--scalars", str(run1 / "subjects.csv"),
                   "--out", str(tmp_path)])
        assert rc == 0
        summary = json.loads((tmp_path / "ingest_summary.json").read_text())
        assert set(summary["variables"]) == {"len", "wt"}
        assert summary["variables"]["len"] == 60
        assert (tmp_path / "rejects.csv").is_file()

    def test_qc(self, ws, run1, tmp_path):
        rc = main(["qc", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--scalars", str(run1 / "subjects.csv"),
                   "--qc-schedule", "0,3,6,9,12", "--qc-tolerance", "1.6",
                   "--qc-max-missed", "3", "--out", str(tmp_path)])
        assert rc == 0
        rep = json.loads((tmp_path / "qc_report.json").read_text())
        assert "excluded_by_rule" in rep and "remaining_subjects" in rep

    def test_fpca_and_designplot(self, ws, run1, tmp_path):
        rc = main(["fpca", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--variable", "len", "--grid-size", "15",
                   "--bw-mean", "1.0", "--bw-cov", "1.0",
                   "--out", str(tmp_path / "f")])
        assert rc == 0
        model = json.loads((tmp_path / "f" / "len_model.json").read_text())
        assert len(model["grid"]) == 15
        rc = main(["designplot", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--variable", "len", "--out", str(tmp_path / "d")])
        assert rc == 0
        header, _ = _read_table(tmp_path / "d" / "len_design_counts.csv")
        assert header == ["time_j", "time_k", "count"]

    def test_crosscov_and_corr(self, ws, run1, tmp_path):
        common = ["--data", str(run1 / "observations.csv"),
                  "--schema", str(run1 / "schema.json"),
                  "--scalars", str(run1 / "subjects.csv"),
                  "--bw-mean", "1.0", "--bw-cov", "1.0",
                  "--grid-size", "15"]
        rc = main(["crosscov", "--variables", "len,wt",
                   "--out", str(tmp_path / "cc"), *common])
        assert rc == 0
        assert (tmp_path / "cc" / "crosscov_len_wt.json").is_file()
        header, rows = _read_table(tmp_path / "cc" / "crosscov_len_wt.csv")
        assert header == ["s", "t", "value"] and len(rows) == 15 * 15

        rc = main(["corr", "--variables", "len,wt", "--variable", "len",
                   "--outcome-field", "dev_score",
                   "--out", str(tmp_path / "co"), *common])
        assert rc == 0
        header, rows = _read_table(tmp_path / "co" / "corr_len_wt.csv")
        assert header == ["s", "t", "correlation", "clamped"]
        assert all(abs(float(r["correlation"])) <= 1.0 for r in rows)
        header, _ = _read_table(
            tmp_path / "co" / "corr_traj_len_dev_score.csv")
        assert header[:2] == ["time", "correlation"]

    def test_residualize_score_lm_bootstrap(self, ws, run1, tmp_path):
        rc = main(["residualize", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--scalars", str(run1 / "subjects.csv"),
                   "--outcome-field", "dev_score",
                   "--out", str(tmp_path / "r")])
        assert rc == 0
        fitd = json.loads(
            (tmp_path / "r" / "residualization.json").read_text())
        assert "sigma_eps" in fitd and fitd["n"] == 60

        rc = main(["score-lm", "--scores", str(run1 / "len_scores.csv"),
                   "--response", str(tmp_path / "r" / "residuals.csv"),
                   "--score-columns", "pc1_norm,pc2_norm",
                   "--out", str(tmp_path / "s")])
        assert rc == 0
        lm = json.loads((tmp_path / "s" / "score_lm.json").read_text())
        assert set(lm["coefficients"]) == {"intercept", "pc1_norm",
                                           "pc2_norm"}

        rc = main(["bootstrap", "--scores", str(run1 / "len_scores.csv"),
                   "--response", str(tmp_path / "r" / "residuals.csv"),
                   "--score-columns", "pc1_norm,pc2_norm",
                   "--k-boot", "20", "--seed", "3",
                   "--out", str(tmp_path / "b")])
        assert rc == 0
        header, rows = _read_table(tmp_path / "b" / "correlations.csv")
        assert [r["column"] for r in rows] == ["pc1_norm", "pc2_norm"]

    def test_fcr(self, ws, run1, tmp_path):
        rc = main(["fcr", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--scalars", str(run1 / "subjects.csv"),
                   "--variables", "len,wt", "--response", "dev_score",
                   "--grid-size", "15", "--bw-mean", "1.0",
                   "--bw-cov", "1.5", "--out", str(tmp_path)])
        assert rc == 0
        fit = json.loads((tmp_path / "fcr.json").read_text())
        assert fit["functional"] == ["len", "wt"]
        assert fit["response"] == "dev_score"


class TestConfigHandling:
    def test_config_file_supplies_flags(self, ws, run1, tmp_path):
        cfgfile = tmp_path / "run.toml"
        cfgfile.write_text(
            f'data = "{run1 / "observations.csv"}"\n'
            f'schema = "{run1 / "schema.json"}"\n'
            'variable = "len"\n'
            "grid_size = 15\n"
            "bw_mean = 1.0\n"
            "bw_cov = 1.0\n"
        )
        out1 = tmp_path / "a"
        assert main(["fpca", "--config", str(cfgfile),
                     "--out", str(out1)]) == 0
        model = json.loads((out1 / "len_model.json").read_text())
        assert len(model["grid"]) == 15

        out2 = tmp_path / "b"
        assert main(["fpca", "--config", str(cfgfile), "--grid-size", "11",
                     "--out", str(out2)]) == 0
        model = json.loads((out2 / "len_model.json").read_text())
        assert len(model["grid"]) == 11
        # estimation settings feed the config hash
        assert (_manifest(out1)["config_hash"]
                != _manifest(out2)["config_hash"])

    def test_unknown_config_key_rejected(self, ws, run1, tmp_path):
        cfgfile = tmp_path / "bad.toml"
        cfgfile.write_text('grid_sizes = 3\n')
        rc = main(["qc", "--config", str(cfgfile),
                   "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2


class TestExitCodes:
    def test_missing_data_file(self, ws, run1, tmp_path, capsys):
        rc = main(["fpca", "--data", str(tmp_path / "nope.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--variable", "len", "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_simulate_requires_seed(self, ws, tmp_path):
        _, scen = ws
        rc = main(["simulate", "--scenario", str(scen),
                   "--out", str(tmp_path)])
        assert rc == 2

    def test_bootstrap_requires_seed_with_k_boot(self, ws, run1, tmp_path):
        rc = main(["bootstrap", "--scores", str(run1 / "len_scores.csv"),
                   "--response", str(run1 / "residuals.csv"),
                   "--k-boot", "10", "--out", str(tmp_path)])
        assert rc == 2

    def test_unknown_variable_is_a_data_error(self, ws, run1, tmp_path):
        rc = main(["fpca", "--data", str(run1 / "observations.csv"),
                   "--schema", str(run1 / "schema.json"),
                   "--variable", "zzz", "--bw-mean", "1.0",
                   "--bw-cov", "1.0", "--out", str(tmp_path)])
        assert rc == 3

    def test_empty_cohort_leaves_no_outputs(self, ws, run1, tmp_path):
        lines = (run1 / "observations.csv").read_text().splitlines()
        header = next(ln for ln in lines if not ln.startswith("#"))
        empty = tmp_path / "empty.csv"
        empty.write_text(header + "\n")
        out = tmp_path / "o"
        rc = main(["ingest", "--data", str(empty),
                   "--schema", str(run1 / "schema.json"),
                   "--out", str(out)])
        assert rc == 3
        assert not any(out.iterdir())
