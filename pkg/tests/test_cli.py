import csv
import json

import pytest

from vcbm.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from vcbm.metrics import MetricReport
from vcbm.synthdata import dataset_checksum
from vcbm.schema import MANEUVERS

SHAPE = "16,24,24,3"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("generate", "--n", 80, "--seed", 7, "--out", out, "--shape", SHAPE) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert run("train", "--dataset-dir", dataset, "--out", out, "--epochs", 40, "--lr", 0.03, "--k", 3) == EXIT_OK
    return out


def test_generate_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--n", 100, "--seed", 7, "--out", tmp_path / d, "--shape", SHAPE) == EXIT_OK
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")


def test_generate_requires_out(capsys):
    assert run("generate", "--n", 5) == EXIT_USAGE


def test_generate_refuses_non_empty_out(tmp_path):
    (tmp_path / "junk").write_text("x")
    assert run("generate", "--n", 5, "--out", tmp_path, "--shape", SHAPE) == EXIT_USAGE
    assert run("generate", "--n", 5, "--out", tmp_path, "--shape", SHAPE, "--force") == EXIT_OK


def test_generate_split_counts(dataset):
    counts = json.loads((dataset / "split_counts.json").read_text())
    for m in MANEUVERS:
        c = counts[m]
        n = sum(c.values())
        if n >= 3:
            for split, ratio in zip(("train", "val", "test"), (0.7, 0.2, 0.1)):
                assert abs(c[split] - ratio * n) <= 1
    manifest = json.loads((dataset / "run_manifest.json").read_text())
    assert manifest["command"] == "generate" and set(manifest["artifacts"]) >= {"manifest.jsonl", "split_counts.json"}


def test_bad_shape_is_usage_error(tmp_path):
    assert run("generate", "--n", 5, "--out", tmp_path / "x", "--shape", "16,24") == EXIT_USAGE


def test_train_writes_log_and_manifest(trained):
    with open(trained / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == list(range(40))
    manifest = json.loads((trained / "run_manifest.json").read_text())
    assert manifest["config"]["k"] == 3 and manifest["dataset"]["checksum"]
    assert "timestamp" not in json.dumps(manifest)


def test_train_with_lambda_zero_config(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda": 0.0, "epochs": 1, "k": 3}))
    assert run("train", "--dataset-dir", dataset, "--out", tmp_path / "r", "--config", cfg) == EXIT_OK
    assert json.loads((tmp_path / "r" / "lambda_check.json").read_text())["passed"]


def test_flags_override_config_file(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 5, "k": 3}))
    assert run("train", "--dataset-dir", dataset, "--out", tmp_path / "r", "--config", cfg, "--epochs", 1) == EXIT_OK
    assert json.loads((tmp_path / "r" / "run_manifest.json").read_text())["config"]["epochs"] == 1


def test_unknown_config_key(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epoch": 5}))
    assert run("train", "--dataset-dir", dataset, "--out", tmp_path / "r", "--config", cfg) == EXIT_USAGE


def test_resume_continues_epoch_numbering(dataset, tmp_path):
    assert run("train", "--dataset-dir", dataset, "--out", tmp_path / "a", "--epochs", 1, "--k", 3) == EXIT_OK
    assert run("train", "--dataset-dir", dataset, "--out", tmp_path / "b", "--epochs", 3,
               "--resume", tmp_path / "a" / "checkpoint.json") == EXIT_OK
    rows = json.loads((tmp_path / "b" / "train_log.json").read_text())
    assert [r["epoch"] for r in rows] == [0, 1, 2]


def test_dataset_dir_from_environment(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("VCBM_DATASET_DIR", str(dataset))
    assert run("train", "--out", tmp_path / "r", "--epochs", 1, "--k", 3) == EXIT_OK


def test_missing_dataset_is_data_error(tmp_path, monkeypatch):
    monkeypatch.delenv("VCBM_DATASET_DIR", raising=False)
    assert run("train", "--dataset-dir", tmp_path / "nope", "--out", tmp_path / "r") == EXIT_DATA
    assert run("train", "--out", tmp_path / "r2") == EXIT_USAGE


def test_divergence_is_numeric_failure(dataset, tmp_path):
    assert run("train", "--dataset-dir", dataset, "--out", tmp_path / "r", "--epochs", 3, "--k", 3, "--lr", 1e6) == EXIT_NUMERIC


def test_eval_report_and_sanity_direction(trained, dataset, tmp_path):
    for split in ("train", "val"):
        assert run("eval", "--checkpoint", trained / "checkpoint.json", "--dataset-dir", dataset,
                   "--split", split, "--out", tmp_path / split) == EXIT_OK
    tr = json.loads((tmp_path / "train" / "report.json").read_text())
    va = json.loads((tmp_path / "val" / "report.json").read_text())
    assert set(tr) == set(MetricReport.__dataclass_fields__)
    assert tr["action_acc"] >= va["action_acc"]
    with open(tmp_path / "val" / "predictions.csv") as fh:
        assert len(list(csv.DictReader(fh))) == va["n_samples"]


def test_eval_unknown_split(trained, dataset, tmp_path):
    assert run("eval", "--checkpoint", trained / "checkpoint.json", "--dataset-dir", dataset,
               "--split", "holdout", "--out", tmp_path / "e") == EXIT_USAGE


def test_eval_missing_checkpoint(dataset, tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "none.json", "--dataset-dir", dataset, "--out", tmp_path / "e") == EXIT_DATA


def test_export_tsne(trained, dataset, tmp_path):
    args = ["export-tsne", "--checkpoint", trained / "checkpoint.json", "--dataset-dir", dataset,
            "--perplexity", 10, "--iterations", 300, "--seed", 4]
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    a = (tmp_path / "a" / "tsne.csv").read_bytes()
    assert a == (tmp_path / "b" / "tsne.csv").read_bytes()
    with open(tmp_path / "a" / "tsne.csv") as fh:
        rows = list(csv.DictReader(fh))
    samples = [r for r in rows if r["kind"] == "sample"]
    anchors = [r for r in rows if r["kind"] == "anchor"]
    assert len(samples) == 80
    present = {i for r in samples for i, b in enumerate(r["label"]) if b == "1"}
    assert len(anchors) == len(present)
    assert all(not r["label"].isdigit() for r in anchors)


def test_ablate_command(dataset, tmp_path):
    assert run("ablate", "--dataset-dir", dataset, "--out", tmp_path / "a", "--axis", "lambda",
               "--values", "0,0.5", "--epochs", 1, "--k", 3, "--seeds", 0, 1) == EXIT_OK
    with open(tmp_path / "a" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["value"], r["seed"]) for r in rows] == [("0", "0"), ("0.5", "0"), ("0", "1"), ("0.5", "1")]


def test_ablate_rejects_bad_value_early(dataset, tmp_path):
    assert run("ablate", "--dataset-dir", dataset, "--out", tmp_path / "a", "--axis", "severity",
               "--values", "1,3", "--epochs", 1) == EXIT_USAGE


@pytest.mark.parametrize("command", ["train", "eval", "export-tsne"])
def test_replay_is_bit_identical(command, trained, dataset, tmp_path):
    if command == "train":
        src = tmp_path / "orig"
        assert run("train", "--dataset-dir", dataset, "--out", src, "--epochs", 2, "--k", 3) == EXIT_OK
    else:
        src = tmp_path / "orig"
        extra = ["--perplexity", 10, "--iterations", 250] if command == "export-tsne" else []
        assert run(command, "--checkpoint", trained / "checkpoint.json", "--dataset-dir", dataset, "--out", src, *extra) == EXIT_OK
    assert run("replay", "--manifest", src / "run_manifest.json", "--out", tmp_path / "re") == EXIT_OK
    m1 = json.loads((src / "run_manifest.json").read_text())
    m2 = json.loads((tmp_path / "re" / "run_manifest.json").read_text())
    assert m1["artifacts"] == m2["artifacts"]
    for name in m1["artifacts"]:
        assert (src / name).read_bytes() == (tmp_path / "re" / name).read_bytes()
