import json

import numpy as np
import pytest

from cignn.cli import main
from cignn.data import GraphCollection, GraphSignal, GraphSpec, load_collection, write_collection
from cignn.errors import CignnWarning
from cignn.graphs import load_adjacency_csv

FAST = ["--epochs", "3", "--patience", "2", "--neurons", "4", "--batch", "64"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "1", "--nodes", "3", "--length", "120", "--out", str(out)]) == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--manifest", str(dataset), "--out", str(out), *FAST]) == 0
    return out


def test_synth_manifest_loads(dataset):
    c = load_collection(dataset)
    assert [g.graph_id for g in c.graphs] == ["demand", "context1"]
    assert c.length == 120 and c.graphs[0].role == "target"
    gaps = np.diff(c.timestamps).astype("timedelta64[s]").astype(int)
    assert np.all(gaps == c.interval_seconds)


def test_build_graph_duplicated_series(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(120, 3))
    v[:, 1] = v[:, 0]
    stamps = np.datetime64("2021-03-01T00:00:00", "s") + np.arange(120) * np.timedelta64(900, "s")
    nodes = ("a", "b", "c")
    spec = GraphSpec("load", "target", nodes, ("v",))
    c = GraphCollection((spec,), (GraphSignal("load", v[:, :, None], stamps, nodes, ("v",)),), 900, None)
    manifest = write_collection(c, tmp_path / "data")
    assert main(["build-graph", "--manifest", str(manifest), "--out", str(tmp_path / "g")]) == 0
    a = load_adjacency_csv(tmp_path / "g" / "adjacency_load.csv").values
    assert a[0, 1] == pytest.approx(1.0) and a[1, 0] == pytest.approx(1.0)
    assert np.all(np.diag(a) == 0)
    summary = json.loads((tmp_path / "g" / "graph_summary.json").read_text())
    assert summary["load"]["n"] == 3
    meta = json.loads((tmp_path / "g" / "metadata.json").read_text())
    assert meta["command"] == "build-graph" and "manifest.json" in meta["inputs"]


def test_build_graph_spatial_cutoff_gives_empty_matrix(dataset, tmp_path):
    with pytest.warns(CignnWarning):
        rc = main(["build-graph", "--manifest", str(dataset), "--mode", "spatial", "--kappa", "1e-9",
                   "--out", str(tmp_path)])
    assert rc == 0
    assert np.all(load_adjacency_csv(tmp_path / "adjacency_demand.csv").values == 0)


def test_build_graph_spatial_without_coordinates(tmp_path):
    v = np.random.default_rng(1).normal(size=(120, 2, 1))
    stamps = np.datetime64("2021-01-01", "s") + np.arange(120) * np.timedelta64(3600, "s")
    spec = GraphSpec("g", "target", ("a", "b"), ("v",))
    manifest = write_collection(GraphCollection((spec,), (GraphSignal("g", v, stamps, ("a", "b"), ("v",)),),
                                                3600, None), tmp_path / "d")
    out = tmp_path / "o"
    rc = main(["build-graph", "--manifest", str(manifest), "--mode", "spatial", "--out", str(out)])
    assert rc == 2
    err = json.loads((out / "error.json").read_text())
    assert err["exit_code"] == 2 and "coordinates" in err["message"]


def test_missing_manifest_exit_code(tmp_path, capsys):
    rc = main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert rc == 2
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert doc["type"] == "ConfigError" and "not found" in doc["message"]


def test_train_outputs(trained):
    ckpt = json.loads((trained / "checkpoint.json").read_text())
    meta = json.loads((trained / "metadata.json").read_text())
    assert meta["train_config"]["window"] == 6 and meta["train_config"]["horizon"] == 3
    assert meta["train_config"]["cheb_order"] == 1 and meta["graph_config"]["dcca_window"] == 4
    assert set(meta["versions"]) == {"cignn", "python", "numpy"}
    assert "timestamp" not in json.dumps(meta).lower()
    assert ckpt
    header = (trained / "train_log.csv").read_text().splitlines()[0]
    assert "second" not in header
    assert "second" in (trained / "train_log_timed.csv").read_text().splitlines()[0]


def test_no_fusion_flag(dataset, tmp_path):
    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path), "--no-fusion", *FAST]) == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["train_config"]["fusion"] is False


def test_train_with_adjacency_dir(dataset, tmp_path):
    assert main(["build-graph", "--manifest", str(dataset), "--out", str(tmp_path / "g")]) == 0
    rc = main(["train", "--manifest", str(dataset), "--adjacency-dir", str(tmp_path / "g"),
               "--out", str(tmp_path / "r"), *FAST])
    assert rc == 0
    meta = json.loads((tmp_path / "r" / "metadata.json").read_text())
    assert set(meta["adjacency_inputs"]) == {"adjacency_demand.csv", "adjacency_context1.csv"}


def test_evaluate_with_baselines(dataset, trained, tmp_path):
    rc = main(["evaluate", "--checkpoint", str(trained / "checkpoint.json"), "--manifest", str(dataset),
               "--baselines", "--out", str(tmp_path)])
    assert rc == 0
    for name in ("cignn", "var", "ha"):
        lines = (tmp_path / f"report_{name}.csv").read_text().splitlines()
        assert lines[0] == "model,graph,role,horizon,mae,rmse"
    assert len((tmp_path / "report_cignn.csv").read_text().splitlines()) == 1 + 2 * 3
    assert len((tmp_path / "report_ha.csv").read_text().splitlines()) == 1 + 2


def test_evaluate_architecture_mismatch(trained, tmp_path):
    other = tmp_path / "other"
    assert main(["synth", "--seed", "2", "--nodes", "5", "--length", "120", "--out", str(other)]) == 0
    rc = main(["evaluate", "--checkpoint", str(trained / "checkpoint.json"), "--manifest",
               str(other / "manifest.json"), "--out", str(tmp_path / "e")])
    assert rc == 2
    msg = json.loads((tmp_path / "e" / "error.json").read_text())["message"]
    assert "demand nodes: checkpoint 3, data 5" in msg and "context1 nodes: checkpoint 3, data 5" in msg


def test_evaluate_horizon_mismatch(dataset, trained, tmp_path):
    rc = main(["evaluate", "--checkpoint", str(trained / "checkpoint.json"), "--manifest", str(dataset),
               "--horizon", "5", "--out", str(tmp_path)])
    assert rc == 2


def test_insufficient_data_exit_code(tmp_path):
    assert main(["synth", "--length", "20", "--out", str(tmp_path / "d")]) == 0
    rc = main(["train", "--manifest", str(tmp_path / "d" / "manifest.json"), "--out", str(tmp_path / "o"), *FAST])
    assert rc == 3
    assert json.loads((tmp_path / "o" / "error.json").read_text())["error"]


def test_thread_limit(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("CIGNN_THREADS", "1")
    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path / "a"), *FAST]) == 0
    monkeypatch.setenv("CIGNN_THREADS", "zero")
    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path / "b"), *FAST]) == 2


def test_ablate_command(dataset, tmp_path):
    assert main(["ablate", "--manifest", str(dataset), "--out", str(tmp_path), *FAST]) == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert set(meta["horizon_average_mae"]) == {"fusion_on", "fusion_off"}
    assert (tmp_path / "loss_curves.png").exists()


def test_long_window_and_horizon(tmp_path):
    assert main(["synth", "--seed", "3", "--nodes", "3", "--length", "300", "--out", str(tmp_path / "d")]) == 0
    manifest = str(tmp_path / "d" / "manifest.json")
    args = ["--window", "24", "--horizon", "6", "--epochs", "2", "--patience", "2", "--neurons", "4", "--batch", "64"]
    assert main(["train", "--manifest", manifest, "--out", str(tmp_path / "r"), *args]) == 0
    rc = main(["evaluate", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"), "--manifest", manifest,
               "--out", str(tmp_path / "e")])
    assert rc == 0
    rows = (tmp_path / "e" / "report_cignn.csv").read_text().splitlines()[1:]
    assert sorted({int(r.split(",")[3]) for r in rows}) == [1, 2, 3, 4, 5, 6]
