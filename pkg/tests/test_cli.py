import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from gridflow.cli import main
from gridflow.datagen import load_dataset
from gridflow.oracle import check_feasible, load_solutions, solve_dcopf

SMALL_MODEL = ["--m", "2", "--hops", "0,1", "--latent", "8", "--qk-dim", "4", "--link-dim", "8",
               "--mlp-hidden", "8"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    data = str(d)
    assert main(["gen-data", "--out", data, "--nodes", "5", "--steps", "120", "--seed", "3"]) == 0
    assert main(["solve", "--data", data]) == 0
    assert main(["train", "--data", data, "--epochs", "3", *SMALL_MODEL]) == 0
    assert main(["infer", "--data", data]) == 0
    assert main(["project-dispatch", "--data", data]) == 0
    return d


def test_gen_data_twice_identical(tmp_path):
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        assert main(["gen-data", "--seed", "7", "--nodes", "33", "--steps", "24", "--out", str(tmp_path / sub)]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_list == cmp.right_list and not cmp.diff_files
    assert load_dataset(tmp_path / "a").network.n_nodes == 33


def test_gen_data_missing_dir(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "nope")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--data", str(tmp_path), "--bogus"])
    assert exc.value.code == 1


def test_help_lists_every_flag():
    out = subprocess.run([sys.executable, "-m", "gridflow", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--epochs", "--alpha", "--hops", "--resume", "--seed", "--threads", "--no-early-stop"):
        assert flag in out.stdout


def test_solve_outputs(pipeline):
    ds = load_dataset(pipeline)
    sol = load_solutions(ds.network, pipeline / "solutions.csv")
    assert len(sol.steps) == 120 and np.all(sol.objective >= 0)
    for s, f, g in zip(ds.snapshots[:20], sol.flows, sol.gen_output):
        assert check_feasible(ds.network, s, f, g).feasible
    assert sol.objective[0] == pytest.approx(solve_dcopf(ds.network, ds.snapshots[0]).objective, rel=1e-12)


def test_stage_outputs_reproducible(pipeline, tmp_path):
    data = str(pipeline)
    for name, argv in [("solutions.csv", ["solve"]), ("predictions.npz", ["infer"]),
                       ("dispatch.csv", ["project-dispatch"])]:
        before = (pipeline / name).read_bytes()
        assert main([*argv, "--data", data]) == 0
        assert (pipeline / name).read_bytes() == before, name
    assert main(["train", "--data", data, "--epochs", "3", *SMALL_MODEL, "--out", str(tmp_path / "m.npz"),
                 "--log", str(tmp_path / "log.csv")]) == 0
    assert (tmp_path / "m.npz").read_bytes() == (pipeline / "model.npz").read_bytes()


def test_predictions_contents(pipeline):
    ds = load_dataset(pipeline)
    with np.load(pipeline / "predictions.npz") as z:
        assert z["f_hat"].shape == (len(ds.test), ds.network.n_links)
        assert z["node_att"].shape == (len(ds.test), 2, 5, 5)
        assert np.all(np.abs(z["f_hat"]) < 1) and z["hops"].tolist() == [0, 1]


def test_eval_pca_bench(pipeline):
    data = str(pipeline)
    assert main(["eval", "--data", data]) == 0
    rep = json.loads((pipeline / "report" / "report.json").read_text())
    assert rep["imbalance_after"]["grand_mean"] <= 1e-3
    assert rep["dispatch_balance_residual"] <= 1e-3
    assert set(rep["baselines"]) == {"mean", "lr", "knn"}
    assert (pipeline / "report" / "maape_cdf.png").exists()
    assert main(["pca", "--data", data]) == 0
    windows = json.loads((pipeline / "pca.json").read_text())["windows"]
    assert [w["hops"] for w in windows] == [0, 1]
    assert main(["bench", "--data", data, "--repeats", "1", "--n-snapshots", "5"]) == 0
    assert set(json.loads((pipeline / "bench.json").read_text())["seconds_per_100"]) == {
        "model", "model_projection", "oracle"}


def test_eval_without_dispatch_is_missing_input(pipeline, tmp_path, capsys):
    for name in ("network.json", "snapshots.csv", "manifest.json", "solutions.csv", "solutions.json",
                 "predictions.npz"):
        (tmp_path / name).write_bytes((pipeline / name).read_bytes())
    assert main(["eval", "--data", str(tmp_path)]) == 2
    assert "run `gridflow project-dispatch` first" in capsys.readouterr().err
    assert main(["infer", "--data", str(tmp_path)]) == 2


def test_config_precedence(pipeline, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(pipeline), "bench": {"repeats": 1, "n_snapshots": 3}}))
    out = tmp_path / "b.json"
    assert main(["--config", str(cfg), "bench", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["repeats"] == 1
    monkeypatch.setenv("GRIDFLOW_CONFIG", str(cfg))
    assert main(["bench", "--out", str(out), "--repeats", "2"]) == 0
    assert json.loads(out.read_text())["repeats"] == 2
    cfg.write_text(json.dumps({"data": str(pipeline), "bench": {"repetitions": 1}}))
    assert main(["bench"]) == 1


def test_infeasible_solve_exits_3(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--nodes", "3", "--steps", "4"]) == 0
    lines = (tmp_path / "snapshots.csv").read_text().splitlines()
    cols = lines[1].split(",")
    cols[2] = "1e9"  # one node's demand far beyond the whole grid's capacity
    lines[1] = ",".join(cols)
    (tmp_path / "snapshots.csv").write_text("\n".join(lines) + "\n")
    assert main(["solve", "--data", str(tmp_path)]) == 3
    assert "infeasible" in capsys.readouterr().err
