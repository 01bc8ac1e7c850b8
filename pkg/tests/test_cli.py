import csv
import json

import numpy as np
import pytest
import yaml

from fuelwatch.cli import PipelineConfig, ConfigInvalid, main
from fuelwatch.ingest import read_feature_csv, FEATURES

SMALL = {
    "data": {"synth": {"clusters": 3, "sites_per_cluster": 5, "visits_per_site": 40,
                       "anomaly_rates": {1: 0.05, 2: 0.05, 3: 0.05}, "shift_strength": 0.0}},
    "model": {"kind": "GBDT", "hyperparams": {"n_estimators": 30, "max_depth": 4}},
    "explain": {"background_size": 30, "rows": 5},
}


def write_config(path, doc=SMALL):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return str(path)


def run(argv, capsys):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def masked(path):
    doc = json.loads(path.read_text())
    doc["metadata"]["generated_at"] = None
    return doc


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.yaml")
    out = root / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    return root, cfg, out


def test_config_defaults_and_overrides(tmp_path):
    cfg = PipelineConfig.load(write_config(tmp_path / "c.yaml"), {"seed": 7})
    assert cfg.seed == 7
    assert cfg.fleet().clusters == 3 and cfg.fleet().seed == 7
    assert cfg.model_spec().hyperparams["seed"] == 7
    assert cfg.config_hash() == PipelineConfig.load(tmp_path / "c.yaml", {"seed": 7}).config_hash()
    assert cfg.config_hash() != PipelineConfig.load(tmp_path / "c.yaml", {"seed": 8}).config_hash()


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigInvalid):
        PipelineConfig.load(write_config(tmp_path / "c.yaml", {"modle": {}}))


def test_synth_writes_fleet(tmp_path, capsys):
    code, out, _ = run(["synth", "--config", write_config(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    assert json.loads(out)["n_records"] == 600
    with (tmp_path / "o" / "fleet.csv").open() as fh:
        assert sum(1 for _ in csv.reader(fh)) == 601
    meta = json.loads((tmp_path / "o" / "synth.json").read_text())["metadata"]
    assert set(meta) == {"command", "tool_version", "config_hash", "dataset_hash", "seed", "generated_at"}


def test_label_is_idempotent(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
    first = tmp_path / "labeled.csv"
    second = tmp_path / "relabeled.csv"
    assert main(["label", str(tmp_path / "fleet.csv"), str(first), "--quiet"]) == 0
    assert main(["label", str(first), str(second), "--quiet"]) == 0
    a = read_feature_csv(first, FEATURES)
    b = read_feature_csv(second, FEATURES)
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.X, b.X)
    rep = json.loads(first.with_suffix(".report.json").read_text())
    assert sum(rep["class_counts"].values()) == rep["n_rows"] == 600


def test_train_outputs(trained):
    _, _, out = trained
    for name in ("model.json", "test.csv", "config.resolved.yaml", "metrics.json"):
        assert (out / name).is_file()
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["metadata"]["dataset_hash"]
    assert doc["resolved_config"]["data"]["synth"]["clusters"] == 3
    assert yaml.safe_load((out / "config.resolved.yaml").read_text()) == doc["resolved_config"]
    assert doc["test_metrics"]["f1"]["macro"] > 0.8


def test_train_determinism(trained, tmp_path):
    _, cfg, out = trained
    again = tmp_path / "again"
    assert main(["train", "--config", cfg, "--out", str(again), "--quiet"]) == 0
    assert (out / "model.json").read_bytes() == (again / "model.json").read_bytes()
    a, b = masked(out / "metrics.json"), masked(again / "metrics.json")
    a["model"]["path"] = b["model"]["path"] = None
    a["resolved_config"]["out"] = b["resolved_config"]["out"] = None
    assert a == b


def test_seed_changes_model(trained, tmp_path):
    _, cfg, out = trained
    assert main(["train", "--config", cfg, "--seed", "1", "--out", str(tmp_path), "--quiet"]) == 0
    h0 = json.loads((out / "metrics.json").read_text())["model"]["model_hash"]
    h1 = json.loads((tmp_path / "metrics.json").read_text())["model"]["model_hash"]
    assert h0 != h1


def test_evaluate_matches_train_report(trained, tmp_path):
    _, cfg, out = trained
    assert main(["evaluate", "--model", str(out / "model.json"), "--data", str(out / "test.csv"),
                 "--out", str(tmp_path), "--quiet"]) == 0
    ev = json.loads((tmp_path / "evaluation.json").read_text())
    tr = json.loads((out / "metrics.json").read_text())
    assert ev["metrics"] == tr["test_metrics"]
    assert ev["model_hash"] == tr["model"]["model_hash"]


def test_explain_outputs(trained, tmp_path, capsys):
    _, cfg, out = trained
    code, stdout, _ = run(["explain", "--config", cfg, "--model", str(out / "model.json"),
                           "--data", str(out / "test.csv"), "--rows", "4", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(stdout)["n_explained"] == 4
    exps = json.loads((tmp_path / "explanations.json").read_text())
    assert len(exps) == 4
    assert (tmp_path / "shap_summary.csv").read_text().count("\n") > 1


def test_audit_outputs(trained, tmp_path):
    _, cfg, out = trained
    assert main(["audit", "--config", cfg, "--model", str(out / "model.json"),
                 "--data", str(out / "test.csv"), "--out", str(tmp_path), "--quiet"]) == 0
    doc = json.loads((tmp_path / "audit.json").read_text())
    assert doc["thresholds"]["fair_zone"] == [0.8, 1.25]
    rows = list(csv.DictReader((tmp_path / "dir.csv").open()))
    assert len(rows) + len(doc["diagnostics"]) == 3


def test_audit_from_config_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    for d in ("a", "b"):
        assert main(["audit", "--config", cfg, "--out", str(tmp_path / d), "--quiet"]) == 0
    assert masked(tmp_path / "a" / "audit.json") == masked(tmp_path / "b" / "audit.json")
    assert (tmp_path / "a" / "dir.csv").read_bytes() == (tmp_path / "b" / "dir.csv").read_bytes()


def test_crosscluster_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["crosscluster", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 0
    doc = json.loads((tmp_path / "crosscluster.json").read_text())
    assert len(doc["generalization_matrix"]["cells"]) == 9
    for metric in ("f1_macro", "accuracy", "mmd"):
        lines = (tmp_path / f"crosscluster_{metric}.csv").read_text().splitlines()
        assert len(lines) == 4


def test_bench(trained, tmp_path):
    _, _, out = trained
    assert main(["bench", "--model", str(out / "model.json"), "--data", str(out / "test.csv"),
                 "--rows", "50", "--repeats", "2", "--out", str(tmp_path), "--quiet"]) == 0
    doc = json.loads((tmp_path / "bench.json").read_text())
    assert doc["latency"]["latency_per_row_median_s"] > 0
    assert doc["latency"]["n_rows"] == 50


def test_missing_file_exit_code(tmp_path, capsys):
    code, _, err = run(["evaluate", "--model", str(tmp_path / "nope.json"), "--data", str(tmp_path / "x.csv"),
                        "--out", str(tmp_path)], capsys)
    assert code == 3
    doc = json.loads(err)
    assert doc["error"] == "FileIO" and doc["command"] == "evaluate"


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = write_config(tmp_path / "c.yaml", {"model": {"kind": "SVM"}})
    code, _, err = run(["train", "--config", bad, "--out", str(tmp_path)], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "ConfigInvalid"


def test_unparsable_yaml_exit_code(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("model: [unclosed\n")
    code, _, err = run(["synth", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)], capsys)
    assert code == 2


def test_model_version_exit_code(trained, tmp_path, capsys):
    _, _, out = trained
    doc = json.loads((out / "model.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(doc))
    code, _, err = run(["evaluate", "--model", str(tmp_path / "m.json"), "--data", str(out / "test.csv"),
                        "--out", str(tmp_path)], capsys)
    assert code == 4
    assert json.loads(err)["error"] == "ModelVersionMismatch"


def test_train_evaluate_default_fleet(tmp_path):
    out = tmp_path / "default"
    assert main(["train", "--out", str(out), "--quiet"]) == 0
    assert main(["evaluate", "--model", str(out / "model.json"), "--data", str(out / "test.csv"),
                 "--out", str(out), "--quiet"]) == 0
    ev = json.loads((out / "evaluation.json").read_text())
    assert ev["metrics"]["f1"]["macro"] >= 0.95
