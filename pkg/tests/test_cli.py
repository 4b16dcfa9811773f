import json

import numpy as np
import pytest

from latentcir.cli import main
from latentcir.retrieval import write_composite_queries
from latentcir.views import CropConfig, load_manifest, synth_dataset

TOY_CONFIG = """
seed = 0
max_steps = 6
batch_size = 4
dtype = float64
lr = 0.001
warmup_steps = 2
tau = 20.0
encoder_d = 32
encoder_g = 4
predictor_blocks = 2
predictor_dim = 16
predictor_heads = 8
"""


def write_config(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(TOY_CONFIG + extra)
    return path


@pytest.fixture()
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["synth-data", "--n", "8", "--out", str(out), "--seed", "3"]) == 0
    return out / "manifest.jsonl"


# synth-data -----------------------------------------------------------------


def test_synth_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth-data", "--n", "4", "--out", str(a), "--seed", "7"]) == 0
    assert main(["synth-data", "--n", "4", "--out", str(b), "--seed", "7"]) == 0
    for entry in load_manifest(a / "manifest.jsonl"):
        assert (a / entry["image"]).read_bytes() == (b / entry["image"]).read_bytes()
    assert (a / "manifest.jsonl").read_text() == (b / "manifest.jsonl").read_text()
    assert (a / "run_manifest.json").exists()


def test_synth_data_rejects_zero(tmp_path, capsys):
    assert main(["synth-data", "--n", "0", "--out", str(tmp_path / "x")]) == 1
    assert "at least 1" in capsys.readouterr().err


def test_synth_data_default_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth-data", "--n", "2"]) == 0
    assert (tmp_path / "data" / "synth" / "manifest.jsonl").exists()


def test_unknown_flag_is_validation_error(tmp_path, capsys):
    assert main(["synth-data", "--n", "2", "--bogus"]) == 1
    assert "error" in capsys.readouterr().err


# train ------------------------------------------------------------------------


def test_train_writes_artifacts_and_prints_losses(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "final losses" in printed and "L_pred" in printed
    assert (out / "checkpoint.npz").exists()
    assert (out / "run_manifest.json").exists()
    steps = [json.loads(l)["step"] for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert steps == list(range(6))


def test_train_resume_continues_without_gaps(tmp_path, dataset):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out)]) == 0
    code = main([
        "train", "--config", str(cfg), "--data", str(dataset), "--out", str(out),
        "--resume", str(out / "checkpoint.npz"), "--set", "max_steps=10",
    ])
    assert code == 0
    steps = [json.loads(l)["step"] for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert steps == list(range(10))


def test_train_bad_config_key_names_nearest(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path, "warmup_step = 3\n")
    code = main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "r")])
    assert code == 1
    assert "warmup_steps" in capsys.readouterr().err


def test_train_missing_data_is_runtime_failure(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "r")])
    assert code == 2


def test_train_set_overrides_win(tmp_path, dataset):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out),
                 "--set", "max_steps=3"]) == 0
    steps = (out / "metrics.jsonl").read_text().splitlines()
    assert len(steps) == 3


# evaluate ------------------------------------------------------------------------


@pytest.fixture()
def trained(tmp_path, dataset):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out)]) == 0
    return out / "checkpoint.npz"


def test_evaluate_self_retrieval_image_mode(tmp_path, dataset, trained):
    pairs = synth_dataset(8, np.random.default_rng(3))
    queries = write_composite_queries(pairs, CropConfig(), np.random.default_rng(0), tmp_path / "q")
    # self-retrieval: reference the originals themselves
    records = [json.loads(l) for l in queries.read_text().splitlines()]
    for rec, pair in zip(records, pairs):
        rec["reference"] = f"../data/{dict((e['id'], e['image']) for e in load_manifest(dataset))[pair.id]}"
    queries.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    out = tmp_path / "eval"
    code = main([
        "evaluate", "--checkpoint", str(trained), "--queries", str(queries),
        "--gallery", str(dataset), "--k", "10,5,1", "--mode", "image", "--out", str(out),
    ])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["ks"] == [1, 5, 10]  # normalized ascending
    assert report["recall"]["1"] == 1.0
    assert (out / "report.txt").exists() and (out / "run_manifest.json").exists()


def test_evaluate_composed_mode_and_gallery_cache(tmp_path, dataset, trained):
    pairs = synth_dataset(8, np.random.default_rng(3))
    queries = write_composite_queries(pairs, CropConfig(), np.random.default_rng(0), tmp_path / "q")
    out = tmp_path / "eval"
    code = main([
        "evaluate", "--checkpoint", str(trained), "--queries", str(queries),
        "--gallery", str(dataset), "--k", "1,5", "--out", str(out),
    ])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["queries"] == 8
    assert len(report["ranks"]) == 8


def test_evaluate_reruns_identically(tmp_path, dataset, trained):
    pairs = synth_dataset(8, np.random.default_rng(3))
    queries = write_composite_queries(pairs, CropConfig(), np.random.default_rng(0), tmp_path / "q")
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        assert main([
            "evaluate", "--checkpoint", str(trained), "--queries", str(queries),
            "--gallery", str(dataset), "--k", "1,5", "--out", str(out),
        ]) == 0
        outs.append((out / "report.json").read_text())
    assert outs[0] == outs[1]


def test_evaluate_dimension_mismatch_is_explicit(tmp_path, dataset, trained, capsys):
    from latentcir.retrieval import Gallery, save_gallery

    bad = save_gallery(
        tmp_path / "bad.npz",
        Gallery(ids=("a", "b"), features=np.ones((2, 48))),
    )
    pairs = synth_dataset(4, np.random.default_rng(3))
    queries = write_composite_queries(pairs, CropConfig(), np.random.default_rng(0), tmp_path / "q")
    code = main([
        "evaluate", "--checkpoint", str(trained), "--queries", str(queries),
        "--gallery", str(bad), "--k", "1",
    ])
    assert code == 1
    assert "dimension mismatch" in capsys.readouterr().err


def test_evaluate_bad_k_values(tmp_path, dataset, trained, capsys):
    code = main([
        "evaluate", "--checkpoint", str(trained), "--queries", "q.jsonl",
        "--gallery", str(dataset), "--k", "1,two",
    ])
    assert code == 1


# verify ---------------------------------------------------------------------------


def test_verify_invariants_suite(capsys):
    assert main(["verify", "--suite", "invariants", "--samples", "50"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] invariants" in out


def test_verify_oracle_suite(capsys):
    assert main(["verify", "--suite", "oracle", "--instances", "5"]) == 0
    assert "mismatch counts" in capsys.readouterr().out


def test_workers_flag_gives_identical_results(tmp_path, dataset, trained):
    pairs = synth_dataset(8, np.random.default_rng(3))
    queries = write_composite_queries(pairs, CropConfig(), np.random.default_rng(0), tmp_path / "q")
    outs = []
    for name, workers in (("w1", "1"), ("w2", "2")):
        out = tmp_path / name
        assert main([
            "evaluate", "--checkpoint", str(trained), "--queries", str(queries),
            "--gallery", str(dataset), "--k", "1,5", "--out", str(out),
            "--workers", workers,
        ]) == 0
        outs.append((out / "report.json").read_text())
    assert outs[0] == outs[1]


def test_run_manifest_captures_arguments(tmp_path):
    out = tmp_path / "d"
    assert main(["synth-data", "--n", "3", "--out", str(out), "--seed", "9"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "synth-data"
    assert manifest["seed"] == 9
    assert manifest["arguments"]["n"] == 3
    assert "version" in manifest and "started_at" in manifest
