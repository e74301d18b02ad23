import json

import numpy as np
import pytest

from statengine.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, sweep_crossover
from statengine.datagen import gaussian
from statengine.models import make_spec
from statengine.storage import load_svmlight


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    return code


# -- gen -------------------------------------------------------------------------------------------


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.svm", tmp_path / "b.svm"
    assert run(["--seed", 3, "gen", "gaussian", 50, 5, 0.4, "--out", a]) == EXIT_OK
    assert run(["--seed", 3, "gen", "gaussian", 50, 5, 0.4, "--out", b]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    m = load_svmlight(a)
    assert m.shape == (50, 5)


def test_gen_binary_and_graph(tmp_path):
    assert run(["gen", "diag-ls", 10, "--binary", "--out", tmp_path / "d.dwmx"]) == EXIT_OK
    assert run(["gen", "ising-chain", 4, 0.5, "--out", tmp_path / "c.fg"]) == EXIT_OK
    assert (tmp_path / "d.dwmx").stat().st_size > 0
    assert (tmp_path / "c.fg").read_text().strip()


@pytest.mark.parametrize("argv", [["gen", "nope", 1], ["gen", "gaussian", 10], ["gen", "diag-ls", "x"]])
def test_gen_bad_recipe(tmp_path, argv):
    out = tmp_path / "x.svm"
    assert run(argv + ["--out", out]) == EXIT_USAGE
    assert not out.exists()


# -- train ------------------------------------------------------------------------------------------


def test_train_writes_runs_and_summary(tmp_path, capsys):
    out = tmp_path / "o"
    code = run(["--seed", 1, "train", "--recipe", "diag-ls 20", "--task", "ls", "--steps", "0.1,0.5", "--epochs", 30, "--out", out])
    assert code == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == ["run-eta0.1.json", "run-eta0.5.json", "summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["optimum"] == pytest.approx(0.0, abs=1e-12)
    assert {r["step_size"] for r in summary["grid"]} == {0.1, 0.5}
    assert summary["best"]["epochs_to_1pct"] is not None
    trace = json.loads((out / "run-eta0.5.json").read_text())
    assert trace["plan"]["seed"] == 1 and trace["plan"]["spec"]["kind"] == "ls"
    assert trace["epochs"][0]["epoch"] == 0
    text = capsys.readouterr().out
    assert "plan: access=" in text and "best step size" in text


def test_train_csv_has_plan_header(tmp_path):
    out = tmp_path / "o"
    assert run(["train", "--recipe", "diag-ls 10", "--task", "ls", "--steps", "0.5", "--epochs", 5, "--format", "csv", "--out", out]) == EXIT_OK
    lines = (out / "run-eta0.5.csv").read_text().splitlines()
    assert lines[0].startswith("# plan: ")
    json.loads(lines[0][len("# plan: "):])
    assert (out / "summary.csv").read_text().startswith("step_size,")


def test_train_replay_reproduces_plan(tmp_path):
    out, again = tmp_path / "o", tmp_path / "r"
    argv = ["--seed", 7, "train", "--recipe", "gaussian 200 10 0.5", "--task", "ls", "--steps", "0.05", "--epochs", 10]
    assert run(argv + ["--force-access", "col", "--out", out]) == EXIT_OK
    first = json.loads((out / "run-eta0.05.json").read_text())
    assert run(["train", "--replay", out / "run-eta0.05.json", "--out", again]) == EXIT_OK
    second = json.loads((again / "run-eta0.05.json").read_text())
    assert first["plan"] == second["plan"]
    # single worker: same plan and seed give the same losses
    assert [e["loss"] for e in first["epochs"]] == [e["loss"] for e in second["epochs"]]


def test_train_all_diverge_exit_numeric(tmp_path):
    out = tmp_path / "o"
    argv = ["train", "--recipe", "gaussian 100 10 0.5", "--task", "ls", "--steps", "100", "--epochs", 20, "--force-access", "row", "--out", out]
    assert run(argv) == EXIT_NUMERIC
    assert not out.exists()


def test_train_partial_divergence_recorded(tmp_path):
    out = tmp_path / "o"
    argv = ["train", "--recipe", "gaussian 100 10 0.5", "--task", "ls", "--steps", "100,0.01", "--epochs", 20, "--force-access", "row", "--out", out]
    assert run(argv) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    reasons = {r["step_size"]: r["stop_reason"] for r in summary["grid"]}
    assert reasons[100.0] == "diverged" and reasons[0.01] != "diverged"
    assert not (out / "run-eta100.json").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--task", "ls"],
        ["train", "--recipe", "diag-ls 5"],
        ["train", "--recipe", "diag-ls 5", "--data", "x.svm", "--task", "ls"],
        ["train", "--data", "missing.svm", "--task", "ls"],
        ["train", "--recipe", "diag-ls 5", "--task", "ls", "--steps", "a,b"],
        ["train", "--recipe", "diag-ls 5", "--task", "ls", "--steps", "-1"],
        ["train", "--recipe", "ising-chain 5 1", "--task", "ls"],
        ["train", "--recipe", "diag-ls 5", "--task", "ls", "--force-data-rep", "importance", "--force-access", "col"],
    ],
)
def test_train_usage_errors(tmp_path, argv):
    out = tmp_path / "o"
    assert run(argv + ["--out", out]) == EXIT_USAGE
    assert not out.exists()


def test_train_malformed_data_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.svm"
    p.write_text("1 1:0.5\n-1 2:x\n")
    assert run(["train", "--data", p, "--task", "svm", "--out", tmp_path / "o"]) == EXIT_USAGE
    assert "2" in capsys.readouterr().err


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", "nope"])
    assert exc.value.code == EXIT_USAGE


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("seed = 11\nnodes = 1\ncores_per_node = 1\n")
    out = tmp_path / "o"
    assert run(["--config", cfg, "train", "--recipe", "diag-ls 5", "--task", "ls", "--steps", "0.5", "--epochs", 2, "--out", out]) == EXIT_OK
    assert json.loads((out / "run-eta0.5.json").read_text())["plan"]["seed"] == 11
    # an explicit flag wins over the file
    assert run(["--config", cfg, "--seed", 2, "train", "--recipe", "diag-ls 5", "--task", "ls", "--steps", "0.5", "--epochs", 2, "--out", out]) == EXIT_OK
    assert json.loads((out / "run-eta0.5.json").read_text())["plan"]["seed"] == 2


# -- sweep-crossover ---------------------------------------------------------------------------------


def test_sweep_rows(tmp_path):
    out = tmp_path / "s.csv"
    assert run(["sweep-crossover", "--recipe", "gaussian 400 30 0.3", "--fractions", "0.1,0.5,1", "--out", out]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0].split(",")[:4] == ["keep_fraction", "cost_ratio", "row_epoch_ms", "col_epoch_ms"]
    assert len(lines) == 4
    ratios = [float(line.split(",")[1]) for line in lines[1:]]
    assert all(r > 0 for r in ratios)


def test_sweep_library_ratio_falls_with_rows():
    m = gaussian(600, 40, 0.5, seed=2)
    spec = make_spec("svm", 40, 0.01, 0.01)
    rows = sweep_crossover(m, spec, (0.05, 0.3, 1.0))
    assert [r["N"] for r in rows] == sorted(r["N"] for r in rows)
    assert np.all(np.diff([r["cost_ratio"] for r in rows]) < 0)


def test_sweep_bad_fractions(tmp_path):
    assert run(["sweep-crossover", "--recipe", "diag-ls 5", "--fractions", "0,2"]) == EXIT_USAGE


# -- calibrate ---------------------------------------------------------------------------------------


def test_calibrate_dry_run(tmp_path, capsys):
    cfg = tmp_path / "c.conf"
    assert run(["--config", cfg, "calibrate", "--dry-run", "--trial-size", 1 << 22]) in (EXIT_OK, EXIT_USAGE)
    assert not cfg.exists()


def test_calibrate_persists(tmp_path):
    cfg = tmp_path / "c.conf"
    code = run(["--config", cfg, "calibrate"])
    assert code == EXIT_OK
    assert "alpha" in cfg.read_text()


# -- gibbs --------------------------------------------------------------------------------------------


def test_gibbs_compare(tmp_path, capsys):
    out = tmp_path / "g.json"
    argv = ["--nodes", 2, "gibbs", "--recipe", "ising-chain 6 0.5", "--compare", "--sweeps", 400, "--burn-in", 50, "--exact", "--out", out]
    assert run(argv) == EXIT_OK
    report = json.loads(out.read_text())
    assert [r["strategy"] for r in report["runs"]] == ["pernode", "permachine"]
    assert report["runs"][0]["chains"] == 2 and report["runs"][1]["chains"] == 1
    assert np.allclose(np.sum(report["exact_marginals"], axis=1), 1.0)
    assert capsys.readouterr().out.count("samples/sec") == 2


def test_gibbs_samples_csv(tmp_path):
    smp = tmp_path / "s.csv"
    assert run(["gibbs", "--recipe", "ising-chain 3 0.5", "--sweeps", 20, "--burn-in", 10, "--samples", smp, "--out", tmp_path / "g.json"]) == EXIT_OK
    lines = smp.read_text().splitlines()
    assert lines[0] == "chain,sweep,var,value"
    assert len(lines) == 1 + 10 * 3


def test_gibbs_malformed_graph_line(tmp_path, capsys):
    g = tmp_path / "g.fg"
    g.write_text("2 1\nfactor 1 0 2 0.0 oops\n")
    out = tmp_path / "g.json"
    assert run(["gibbs", "--graph", g, "--out", out]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err
    assert not out.exists()


def test_gibbs_bad_recipe():
    assert run(["gibbs", "--recipe", "diag-ls 5"]) == EXIT_USAGE


# -- bench-sum -------------------------------------------------------------------------------------------


def test_bench_sum_two_rows(tmp_path):
    out = tmp_path / "b.csv"
    assert run(["--nodes", 2, "--cores-per-node", 2, "bench-sum", "--size", 100_000, "--repeats", 1, "--out", out]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "strategy,sum,seconds,gb_per_s"
    assert [line.split(",")[0] for line in lines[1:]] == ["shared", "pernode"]
    sums = [float(line.split(",")[1]) for line in lines[1:]]
    assert sums[0] == pytest.approx(sums[1], rel=1e-9)
