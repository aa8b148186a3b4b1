"""CLI harness tests: exit codes, determinism of generate, train smoke
runs with resume and NaN fault injection, evaluate / predict / baseline /
inspect-spectrum outputs and the idempotent re-evaluation path.
"""

import json
import os

import numpy as np
import pytest

from spectralsde.cli import main
from spectralsde.io_utils import load_json


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small generated dataset plus a quick trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "generator": "controlled-complex",
        "n_trajectories": 12,
        "seed": 5,
        "control_policy": "sd",
        "obs_min": 4,
        "obs_max": 7,
        "horizon": 5.0,
        "store_truth": False,
    }
    spec_path = root / "spec.json"
    write_json(spec_path, spec)
    data_dir = root / "data"
    assert main(["generate", "--config", str(spec_path),
                 "--out-dir", str(data_dir)]) == 0

    config = {
        "model": {
            "latent_dim": 2, "obs_dim": 1, "control_dim": 1,
            "context_dim": 0, "n_complex_pairs": 1,
            "stability_constraint": True, "update_interval": 1.0,
            "target_hidden": [8],
        },
        "train": {"epochs": 2, "batch_size": 4, "lr": 3e-3, "seed": 1},
    }
    cfg_path = root / "train.json"
    write_json(cfg_path, config)
    run_dir = root / "run"
    assert main(["train", "--config", str(cfg_path),
                 "--data", str(data_dir / "train.jsonl"),
                 "--val", str(data_dir / "val.jsonl"),
                 "--out-dir", str(run_dir)]) == 0
    return {"root": root, "spec": spec_path, "data": data_dir,
            "config": cfg_path, "run": run_dir}


def test_generate_outputs_and_determinism(workdir, tmp_path):
    data = workdir["data"]
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
        assert (data / name).exists()
    again = tmp_path / "again"
    assert main(["generate", "--config", str(workdir["spec"]),
                 "--out-dir", str(again)]) == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl"):
        assert (data / name).read_bytes() == (again / name).read_bytes()
    manifest = load_json(data / "manifest.json")
    assert manifest["seed"] == 5
    assert manifest["config_hash"]
    assert set(manifest["dataset_hashes"]) == {"train.jsonl", "val.jsonl",
                                               "test.jsonl"}


def test_generate_invalid_spec_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    write_json(bad, {"generator": "controlled-complex", "n_trajectories": -3,
                     "seed": 0})
    rc = main(["generate", "--config", str(bad), "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "n_trajectories" in capsys.readouterr().err


def test_generate_seed_override_changes_bytes(workdir, tmp_path):
    other = tmp_path / "other"
    assert main(["generate", "--config", str(workdir["spec"]), "--seed", "99",
                 "--out-dir", str(other)]) == 0
    assert (other / "train.jsonl").read_bytes() != \
        (workdir["data"] / "train.jsonl").read_bytes()


def test_train_outputs(workdir):
    run = workdir["run"]
    ckpt = load_json(run / "checkpoint.json")
    assert ckpt["format_version"] == 1
    assert "adam" in ckpt
    log = load_json(run / "metrics_log.json")["log"]
    assert len(log) == 2
    assert all(np.isfinite(e["val_nll"]) for e in log)


def test_train_resume_continues_step_counter(workdir, tmp_path):
    run2 = tmp_path / "resumed"
    assert main(["train", "--config", str(workdir["config"]),
                 "--data", str(workdir["data"] / "train.jsonl"),
                 "--val", str(workdir["data"] / "val.jsonl"),
                 "--resume", str(workdir["run"] / "checkpoint.json"),
                 "--out-dir", str(run2)]) == 0
    first = load_json(workdir["run"] / "checkpoint.json")["adam"]["step"]
    second = load_json(run2 / "checkpoint.json")["adam"]["step"]
    assert first > 0
    assert second > first


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_train_nan_abort_dumps_diagnostics(workdir, tmp_path, capsys):
    cfg = load_json(workdir["config"])
    cfg["train"]["lr"] = 1e3  # fault injection
    cfg["train"]["epochs"] = 60
    cfg["model"]["stability_constraint"] = False
    bad_cfg = tmp_path / "bad_train.json"
    write_json(bad_cfg, cfg)
    out = tmp_path / "nan_run"
    rc = main(["train", "--config", str(bad_cfg),
               "--data", str(workdir["data"] / "train.jsonl"),
               "--val", str(workdir["data"] / "val.jsonl"),
               "--out-dir", str(out)])
    assert rc == 4
    dump = load_json(out / "nan_dump.json")
    assert "error" in dump and "param_norms" in dump


def test_train_rejects_unknown_config_section(workdir, tmp_path):
    cfg = load_json(workdir["config"])
    cfg["extra_section"] = {}
    bad = tmp_path / "bad.json"
    write_json(bad, cfg)
    assert main(["train", "--config", str(bad),
                 "--data", str(workdir["data"] / "train.jsonl"),
                 "--out-dir", str(tmp_path / "x")]) == 2


def test_missing_dataset_is_data_error(workdir, tmp_path):
    assert main(["train", "--config", str(workdir["config"]),
                 "--data", str(tmp_path / "nope.jsonl"),
                 "--out-dir", str(tmp_path / "y")]) == 3


def test_evaluate_and_reevaluate_idempotent(workdir, tmp_path):
    ev1 = tmp_path / "ev1"
    assert main(["evaluate", "--checkpoint", str(workdir["run"] / "checkpoint.json"),
                 "--data", str(workdir["data"] / "test.jsonl"),
                 "--out-dir", str(ev1), "--seed", "3"]) == 0
    report = load_json(ev1 / "report.json")
    assert np.isfinite(report["metrics"]["mse"]["value"])
    assert (ev1 / "report.csv").exists()
    assert (ev1 / "predictions.json").exists()

    ev2 = tmp_path / "ev2"
    assert main(["evaluate", "--predictions", str(ev1 / "predictions.json"),
                 "--data", str(workdir["data"] / "test.jsonl"),
                 "--out-dir", str(ev2), "--seed", "3"]) == 0
    r1 = load_json(ev1 / "report.json")
    r2 = load_json(ev2 / "report.json")
    assert r1["metrics"] == r2["metrics"]
    assert r1["curves"] == r2["curves"]


def test_evaluate_ood_pairing(workdir, tmp_path):
    spec = load_json(workdir["spec"])
    spec["control_policy"] = "ood"
    ood_spec = tmp_path / "ood_spec.json"
    write_json(ood_spec, spec)
    ood_dir = tmp_path / "ood_data"
    assert main(["generate", "--config", str(ood_spec),
                 "--out-dir", str(ood_dir)]) == 0
    ev = tmp_path / "ev_ood"
    assert main(["evaluate", "--checkpoint", str(workdir["run"] / "checkpoint.json"),
                 "--data", str(workdir["data"] / "test.jsonl"),
                 "--ood-data", str(ood_dir / "test.jsonl"),
                 "--out-dir", str(ev)]) == 0
    report = load_json(ev / "report.json")
    assert "ood" in report
    assert report["ood"]["ratio"] > 0
    csv_text = (ev / "report.csv").read_text()
    assert "ood_degradation_ratio" in csv_text
    assert ",ood," in csv_text and ",test," in csv_text


def test_predict_subcommand(workdir, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(workdir["run"] / "checkpoint.json"),
                 "--data", str(workdir["data"] / "test.jsonl"),
                 "--protocol", "standard", "--out-dir", str(out)]) == 0
    blob = load_json(out / "predictions.json")
    assert blob["protocol"] == "standard"
    assert len(blob["records"]) > 0


def test_baseline_subcommand(workdir, tmp_path):
    out = tmp_path / "naive"
    assert main(["baseline", "--data", str(workdir["data"] / "test.jsonl"),
                 "--out-dir", str(out)]) == 0
    report = load_json(out / "naive_report.json")
    assert report["split"] == "naive"
    assert np.isfinite(report["metrics"]["mse"]["value"])


def test_inspect_spectrum_subcommand(workdir, tmp_path):
    out = tmp_path / "spec"
    assert main(["inspect-spectrum",
                 "--checkpoint", str(workdir["run"] / "checkpoint.json"),
                 "--data", str(workdir["data"] / "test.jsonl"),
                 "--out-dir", str(out)]) == 0
    summary = load_json(out / "spectrum.json")
    assert summary["class"] in ("real", "complex", "imaginary")
    assert "entry0.a" in summary["components"]
    assert (out / "spectrum.csv").exists()


def test_invalid_protocol_is_config_error(workdir, tmp_path):
    assert main(["evaluate", "--checkpoint", str(workdir["run"] / "checkpoint.json"),
                 "--data", str(workdir["data"] / "test.jsonl"),
                 "--protocol", "weird", "--out-dir", str(tmp_path / "z")]) == 2


def test_pipeline_rerun_bit_exact(workdir, tmp_path):
    """generate -> train -> evaluate, twice, identical bytes."""

    def pipeline(base):
        d = base / "data"
        assert main(["generate", "--config", str(workdir["spec"]),
                     "--out-dir", str(d)]) == 0
        r = base / "run"
        assert main(["train", "--config", str(workdir["config"]),
                     "--data", str(d / "train.jsonl"),
                     "--val", str(d / "val.jsonl"), "--out-dir", str(r)]) == 0
        e = base / "ev"
        assert main(["evaluate", "--checkpoint", str(r / "checkpoint.json"),
                     "--data", str(d / "test.jsonl"), "--out-dir", str(e),
                     "--seed", "7"]) == 0
        return d, r, e

    d1, r1, e1 = pipeline(tmp_path / "p1")
    d2, r2, e2 = pipeline(tmp_path / "p2")
    for a, b in [(d1 / "train.jsonl", d2 / "train.jsonl"),
                 (r1 / "checkpoint.json", r2 / "checkpoint.json"),
                 (r1 / "metrics_log.json", r2 / "metrics_log.json"),
                 (e1 / "report.json", e2 / "report.json"),
                 (e1 / "report.csv", e2 / "report.csv"),
                 (e1 / "manifest.json", e2 / "manifest.json")]:
        assert a.read_bytes() == b.read_bytes(), a
