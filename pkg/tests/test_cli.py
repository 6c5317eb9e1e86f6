import json

import pytest

from ctxdiff.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_IO, EXIT_OK, main
from ctxdiff.manifest import RunManifest, blob_sha1


def run(*argv):
    return main([str(a) for a in argv])


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert run("gen-data", "--out", root / "data", "--n", 400, "--seed", 1) == EXIT_OK
    cfg = write_config(root / "cfg.json", {
        "train": {"dataset": str(root / "data" / "data.csv"), "steps": 20, "batch_size": 32,
                  "schedule": {"kind": "cosine", "T": 20},
                  "adapter": {"variant": "learned", "hidden": 8},
                  "denoiser": {"hidden": 16, "depth": 1}},
    })
    assert run("train", "--config", cfg, "--out", root / "train") == EXIT_OK
    return root


def test_gen_data_outputs(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--n", 10) == EXIT_OK
    lines = (tmp_path / "data.csv").read_text().splitlines()
    assert lines[0] == "x_1,x_2,class" and len(lines) == 11
    man = RunManifest.read(tmp_path / "manifest.json")
    assert man.command == "gen-data" and "data.csv" in man.outputs


def test_gen_data_empty(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--n", 0) == EXIT_OK
    assert (tmp_path / "data.csv").read_text() == "x_1,x_2,class\n"


def test_gen_data_repeatable(tmp_path):
    run("gen-data", "--out", tmp_path / "a", "--n", 50, "--seed", 3)
    run("gen-data", "--out", tmp_path / "b", "--n", 50, "--seed", 3)
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()


def test_rerun_from_manifest_is_identical(trained, tmp_path):
    src = trained / "train"
    assert run("train", "--config", src / "manifest.json", "--out", tmp_path) == EXIT_OK
    for name in ("checkpoint.ckpt", "metrics.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (src / name).read_bytes()


def test_train_manifest_records_checkpoint_hash(trained):
    man = RunManifest.read(trained / "train" / "manifest.json")
    blob = (trained / "train" / "checkpoint.ckpt").read_bytes()
    assert man.checkpoint_sha1 == blob_sha1(blob)
    assert man.dataset_fingerprint


def test_train_zero_steps(trained, tmp_path):
    data = trained / "data" / "data.csv"
    assert run("train", "--dataset", data, "--steps", 0, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "metrics.csv").read_text() == "step,loss\n"
    assert (tmp_path / "checkpoint.ckpt").exists()


def test_train_missing_dataset_field(tmp_path, capsys):
    assert run("train", "--out", tmp_path) == EXIT_CONFIG
    assert "train.dataset: required" in capsys.readouterr().err


def test_train_dataset_file_missing(tmp_path):
    assert run("train", "--dataset", tmp_path / "nope.csv", "--out", tmp_path) == EXIT_IO


def test_config_errors_listed_together(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", {
        "train": {"steps": "many", "colour": 1, "schedule": {"kind": "cosine", "T": 10, "s": 1}},
        "plots": {},
    })
    assert run("train", "--config", cfg, "--out", tmp_path) == EXIT_CONFIG
    err = capsys.readouterr().err
    for needle in ("train.steps", "train.colour", "train.schedule.s", "plots: unknown section"):
        assert needle in err


def test_sample_outputs_and_determinism(trained, tmp_path):
    ckpt = trained / "train" / "checkpoint.ckpt"
    for sub in ("a", "b"):
        assert run("sample", "--checkpoint", ckpt, "--n-per-class", 5, "--mode", "ddim",
                   "--stride", 4, "--svg", "--out", tmp_path / sub) == EXIT_OK
    a = (tmp_path / "a" / "samples.csv").read_text()
    assert a == (tmp_path / "b" / "samples.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == "x_1,x_2,class,seed,mode" and len(lines) == 11
    assert (tmp_path / "a" / "samples.svg").exists()


def test_sample_zero_per_class(trained, tmp_path):
    ckpt = trained / "train" / "checkpoint.ckpt"
    assert run("sample", "--checkpoint", ckpt, "--n-per-class", 0, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "samples.csv").read_text() == "x_1,x_2,class,seed,mode\n"


def test_sample_rejects_tampered_checkpoint(trained, tmp_path):
    blob = (trained / "train" / "checkpoint.ckpt").read_bytes()
    bad = blob.replace(b'"steps":20', b'"steps":21', 1)
    assert bad != blob
    (tmp_path / "bad.ckpt").write_bytes(bad)
    assert run("sample", "--checkpoint", tmp_path / "bad.ckpt", "--out", tmp_path) == EXIT_CONFIG


def test_nelbo_repeatable_and_paired(trained, tmp_path):
    ckpt = trained / "train" / "checkpoint.ckpt"
    data = trained / "data" / "data.csv"
    for sub in ("a", "b"):
        assert run("nelbo", "--checkpoint", ckpt, "--dataset", data, "--items", 30,
                   "--baseline", ckpt, "--out", tmp_path / sub) == EXIT_OK
    a = (tmp_path / "a" / "nelbo.json").read_text()
    assert a == (tmp_path / "b" / "nelbo.json").read_text()
    report = json.loads(a)
    assert report["comparison"]["difference"] == 0.0
    assert report["items"] == 30


def test_verify_passes_and_fault_fails(tmp_path):
    fast = ("--mc-samples", 100_000, "--bayes-cases", 50)
    assert run("verify", *fast, "--out", tmp_path / "ok") == EXIT_OK
    checks = json.loads((tmp_path / "ok" / "verify.json").read_text())
    assert checks and all(c["pass"] for c in checks)
    assert (tmp_path / "ok" / "oracle_errors.csv").read_text().startswith("alpha_bar")
    assert run("verify", *fast, "--fault", "drop_transition_prev_bias", "--out", tmp_path / "bad") == EXIT_FAIL


def test_verify_zero_adapter_only(tmp_path):
    assert run("verify", "--zero-adapter-only", "--mc-samples", 100_000, "--bayes-cases", 50,
               "--out", tmp_path) == EXIT_OK


def test_unknown_fault_is_config_error(tmp_path):
    assert run("verify", "--fault", "nope", "--out", tmp_path) == EXIT_CONFIG


def test_threads_flag(tmp_path):
    assert run("gen-data", "--n", 5, "--threads", 1, "--out", tmp_path) == EXIT_OK
    assert run("gen-data", "--n", 5, "--threads", 0, "--out", tmp_path) == EXIT_CONFIG
