import csv
import json

import numpy as np
import pytest

from anchoral.cli import main, verify_manifest, CliError
from anchoral.graph import generate_twin_networks, load_anchor_map, load_edge_list

FAST = ["--set", "dim=6", "--set", "epochs_initial=10", "--set", "epochs_incremental=3",
        "--set", "metric_k=5", "--set", "lambda_cross=1", "--set", "lambda_classify=1"]
ACTIVE = FAST + ["--set", "bs=3", "--set", "budget=6", "--set", "split_initial=4",
                 "--set", "split_validate=5", "--set", "split_test=5",
                 "--set", "eer_shortlist=10", "--set", "eer_eval=40"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["generate", "--out", str(d), "--n", "50", "--seed", "7", "--base-edge-prob", "0.1"]) == 0
    return d


def test_generate_is_deterministic(data, tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--n", "50", "--seed", "7", "--base-edge-prob", "0.1"]) == 0
    for name in ("graph_a.edges", "graph_b.edges", "anchors.tsv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_generate_outputs_roundtrip(data):
    lines = (data / "anchors.tsv").read_text().splitlines()
    assert len(lines) == 25
    ds = generate_twin_networks(50, 0.1, 0.5, 0.1, seed=7)
    ga = load_edge_list(data / "graph_a.edges")
    assert ga.node_count == 50 and np.array_equal(ga.edges, ds.graph_a.edges)
    assert np.array_equal(load_anchor_map(data / "anchors.tsv", 50, 50), ds.anchors)
    verify_manifest(data)


def test_train_writes_deterministic_csv(data, tmp_path):
    for out in ("t1", "t2"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / out), "--eta", "0.3,0.7",
                     "--repeats", "2"] + FAST) == 0
    for name in ("metrics.csv", "metrics_summary.csv", "model_eta0.30.ckpt"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t2" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "t1" / "metrics.csv")))
    assert len(rows) == 4 and {r["eta"] for r in rows} == {"0.3", "0.7"}
    man = verify_manifest(tmp_path / "t1")
    assert man["config"]["metric_k"] == 5 and str(data / "anchors.tsv") in man["inputs"]


def test_train_rejects_bad_eta(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--eta", "1.2"]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error\tinvalid_eta\t")


def test_active_report_cycle(data, tmp_path, capsys):
    for mode in ("dalaup", "random"):
        assert main(["active", "--data", str(data), "--out", str(tmp_path / mode), "--mode", mode,
                     "--repeats", "2"] + ACTIVE) == 0
    assert (tmp_path / "dalaup" / "seed_1" / "trace.csv").exists()
    rep = tmp_path / "report.csv"
    assert main(["report", str(tmp_path / "dalaup"), str(tmp_path / "random"), "--out", str(rep)]) == 0
    rows = list(csv.DictReader(open(rep)))
    assert len(rows) == 3
    assert "dalaup_test_p_at_k_mean" in rows[0] and "random_test_p_at_k_sd" in rows[0]
    single = tmp_path / "single.csv"
    assert main(["report", str(tmp_path / "dalaup"), "--out", str(single)]) == 0
    summ = list(csv.DictReader(open(tmp_path / "dalaup" / "summary.csv")))
    got = list(csv.DictReader(open(single)))
    assert [r["dalaup_test_p_at_k_mean"] for r in got] == [r["test_p_at_k_mean"] for r in summ]
    # rerun of the same command reproduces the summary byte for byte
    assert main(["active", "--data", str(data), "--out", str(tmp_path / "again"), "--mode", "random",
                 "--repeats", "2"] + ACTIVE) == 0
    assert (tmp_path / "again" / "summary.csv").read_bytes() == (tmp_path / "random" / "summary.csv").read_bytes()

    # incompatible configs
    assert main(["active", "--data", str(data), "--out", str(tmp_path / "other"), "--mode", "ie",
                 "--repeats", "2"] + ACTIVE + ["--set", "bs=2"]) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "dalaup"), str(tmp_path / "other"), "--out", str(rep)]) == 1
    assert "incompatible_runs" in capsys.readouterr().err


def test_report_missing_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["report", str(missing), "--out", str(tmp_path / "r.csv")]) == 1
    err = capsys.readouterr().err.strip()
    assert err == f"error\tmissing_path\trun directory not found: {missing}"


def test_tampered_dataset_is_rejected(data, tmp_path, capsys):
    import shutil
    copy = tmp_path / "d"
    shutil.copytree(data, copy)
    with open(copy / "anchors.tsv", "a") as fh:
        fh.write("# edited\n")
    with pytest.raises(CliError):
        verify_manifest(copy)
    assert main(["train", "--data", str(copy), "--out", str(tmp_path / "o")]) == 1
    assert "digest_mismatch" in capsys.readouterr().err


def test_missing_dataset_files(tmp_path, capsys):
    assert main(["active", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error\tmissing_path\t")


def test_unknown_config_key(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--set", "wat=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_manifest_is_rerunnable(data):
    man = json.loads((data / "manifest.json").read_text())
    assert man["generator"]["seed"] == 7 and man["command"] == "generate"
