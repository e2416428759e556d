import json

import pytest

from entlab.cli import EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, main

SMALL = ["--set", "num_prompts=16", "--set", "vocab_size=3", "--set", "response_len=2", "--set", "steps=12", "--set", "epochs=2", "--set", "eta=0.2"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["run", "--out", str(out), "--seed", "3", *SMALL]) == EXIT_OK
    return out


class TestRun:
    def test_outputs_and_sources(self, run_dir):
        man = json.loads((run_dir / "manifest.json").read_text())
        assert man["config"]["seed"] == 3 and man["sources"]["seed"] == "--seed"
        assert man["sources"]["out"] == "--out" and man["sources"]["steps"] == "--set"

    def test_config_file(self, tmp_path):
        conf = tmp_path / "c.txt"
        conf.write_text("steps=0\nnum_prompts=4\n")
        assert main(["run", "--config", str(conf), "--out", str(tmp_path / "r")]) == EXIT_OK
        assert json.loads((tmp_path / "r" / "manifest.json").read_text())["sources"]["steps"] == f"{conf}:1"

    @pytest.mark.parametrize(
        "argv",
        [[], ["nope"], ["run", "--set", "bogus=1"], ["run", "--seed", "x"], ["run", "--set", "loss=npg"], ["run", "--config", "/nonexistent/c.txt"]],
    )
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == EXIT_USAGE
        assert "error" in capsys.readouterr().err


class TestVerify:
    def test_default_exit_zero(self, capsys):
        assert main(["verify-dynamics"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "err(eta)/err(eta/2)" in out and "median ratio pg" in out

    def test_fault_exit_nonzero(self, capsys):
        assert main(["verify-dynamics", "--fault", "--instances", "10"]) == EXIT_INVARIANT
        assert "Prop-1" in capsys.readouterr().err


class TestFitPredict:
    def test_fit_prints_json(self, run_dir, capsys):
        assert main(["fit", str(run_dir)]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["ceiling"] == doc["b"] - doc["a"] and doc["n_points"] == 12

    def test_predict_writes_csv(self, run_dir, tmp_path):
        assert main(["predict", str(run_dir), "--fraction", "0.5", "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / "predictions.csv").read_text().startswith("step,entropy,R_true,R_pred\n")

    def test_missing_source(self, tmp_path, capsys):
        assert main(["fit", str(tmp_path / "missing.csv")]) == EXIT_USAGE
        assert "missing.csv" in capsys.readouterr().err


class TestPlotAndReport:
    def test_plot_data_all_kinds(self, run_dir, tmp_path, capsys):
        assert main(["plot-data", str(run_dir), "--out", str(tmp_path)]) == EXIT_OK
        assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
            f"{k}.tsv" for k in ("entropy_curve", "fit_curve", "cov_curve", "consumption", "quantiles")
        )

    def test_plot_data_missing_named(self, tmp_path, capsys):
        assert main(["plot-data", str(tmp_path / "ghost"), "--kind", "entropy_curve", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "ghost" in capsys.readouterr().err

    def test_cov_report(self, run_dir, capsys):
        assert main(["cov-report", str(run_dir)]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert [ln.split("\t")[0] for ln in lines] == ["Top 0.02%", "Top 0.2%", "Top 2%", "Top 20%", "Top 50%", "All"]
