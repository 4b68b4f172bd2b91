import json
from pathlib import Path

import numpy as np
import pytest

from nld.cli import config_hash, main
from nld.model import NldModel


TOY_CONFIG = {
    "model": {
        "mode": "overdamped",
        "latent_dim": 2,
        "obs_dim": 5,
        "enc_hidden": 8,
        "context_dim": 4,
        "energy_hidden": [8],
        "control_hidden": [8],
        "decoder_hidden": [8],
        "dt": 0.05,
        "constants": {"train_gamma": False, "train_beta": False},
        "seed": 3,
    },
    "train": {"lr": 2e-3, "epochs": 3, "warmup_epochs": 2, "batch_size": 4, "seed": 3},
}


def _generate(tmp_path, n=6, length=12, seed=5, obs_dim=5):
    data = tmp_path / "data"
    rc = main(["generate", "--experiment", "1", "--sequences", str(n), "--length",
               str(length), "--seed", str(seed), "--out", str(data),
               "--obs-dim", str(obs_dim)])
    assert rc == 0
    return data


def _train(tmp_path, data, extra=()):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    out = tmp_path / "run"
    rc = main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), *extra])
    assert rc == 0
    return out


def test_generate_writes_artifacts(tmp_path):
    data = _generate(tmp_path)
    lines = (data / "sequences.jsonl").read_text().strip().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[0])
    assert len(rec["obs"]) == 12 and len(rec["obs"][0]) == 5
    header = json.loads((data / "header.json").read_text())
    assert header["n_sequences"] == 6
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(manifest["config"])
    assert str(data / "sequences.jsonl") in manifest["artifacts"]


def test_generate_byte_identical_reruns(tmp_path):
    a = _generate(tmp_path / "a")
    b = _generate(tmp_path / "b")
    assert (a / "sequences.jsonl").read_bytes() == (b / "sequences.jsonl").read_bytes()
    assert (a / "header.json").read_bytes() == (b / "header.json").read_bytes()


def test_generate_reproducible_from_manifest(tmp_path):
    a = _generate(tmp_path / "a")
    cfg = json.loads((a / "manifest.json").read_text())["config"]
    rc = main(["generate", "--experiment", str(cfg["experiment"]),
               "--sequences", str(cfg["sequences"]), "--length", str(cfg["length"]),
               "--seed", str(cfg["seed"]), "--obs-dim", str(cfg["obs_dim"]),
               "--out", str(tmp_path / "b")])
    assert rc == 0
    assert (a / "sequences.jsonl").read_bytes() == (tmp_path / "b" / "sequences.jsonl").read_bytes()


def test_generate_missing_out_exits_2(tmp_path, capsys):
    rc = main(["generate", "--experiment", "1", "--sequences", "2",
               "--length", "5", "--seed", "1"])
    assert rc == 2


def test_train_writes_artifacts(tmp_path):
    data = _generate(tmp_path)
    out = _train(tmp_path, data)
    assert (out / "checkpoint.json").exists()
    hist = (out / "loss_history.csv").read_text().strip().splitlines()
    assert hist[0] == "epoch,elbo,recon,kl_path,kl_z0,skipped_batches"
    assert len(hist) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    model = NldModel.load(out / "checkpoint.json")
    assert model.config.mode == "overdamped"


def test_train_baseline_mode(tmp_path):
    data = _generate(tmp_path)
    out = _train(tmp_path, data, extra=("--mode", "nsde-baseline"))
    model = NldModel.load(out / "checkpoint.json")
    assert model.config.mode == "nsde-baseline"
    assert any(k.startswith("drift.") for k in model.params)


def test_train_invalid_mode_exits_2(tmp_path):
    data = _generate(tmp_path)
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    rc = main(["train", "--config", str(cfg), "--data", str(data),
               "--out", str(tmp_path / "x"), "--mode", "galilean"])
    assert rc == 2


def test_train_multiple_seeds(tmp_path):
    data = _generate(tmp_path)
    cfg = tmp_path / "config.json"
    doc = json.loads(json.dumps(TOY_CONFIG))
    doc["train"]["epochs"] = 1
    cfg.write_text(json.dumps(doc))
    out = tmp_path / "multi"
    rc = main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out),
               "--seeds", "1,2"])
    assert rc == 0
    assert (out / "seed_1" / "checkpoint.json").exists()
    assert (out / "seed_2" / "checkpoint.json").exists()


def test_analyze_untrained_checkpoint(tmp_path):
    data = _generate(tmp_path)
    out = _train(tmp_path, data)
    report_path = tmp_path / "report.json"
    rc = main(["analyze", "--checkpoint", str(out / "checkpoint.json"),
               "--out", str(report_path),
               "--samples", "60", "--burn-in", "500", "--thin", "5", "--dt", "0.02"])
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert len(report["minima"]) >= 1
    for key in ("weights_sampling", "weights_zeroth", "weights_second"):
        assert abs(sum(report[key]) - 1.0) < 1e-9
    assert len(report["hessians"][0]) == 2


def test_analyze_requires_checkpoint(tmp_path):
    rc = main(["analyze", "--out", str(tmp_path / "r.json")])
    assert rc == 2


def test_analyze_rank_by(tmp_path):
    data = _generate(tmp_path)
    cfg = tmp_path / "config.json"
    doc = json.loads(json.dumps(TOY_CONFIG))
    doc["train"]["epochs"] = 1
    cfg.write_text(json.dumps(doc))
    out = tmp_path / "multi"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--seeds", "1,2"]) == 0
    ranking = tmp_path / "ranking.csv"
    rc = main(["analyze", "--checkpoint-dir", str(out), "--rank-by", "second-order",
               "--target", "0.3333,0.3333,0.3334", "--out", str(ranking),
               "--samples", "40", "--burn-in", "300", "--thin", "5", "--dt", "0.02"])
    assert rc == 0
    lines = ranking.read_text().strip().splitlines()
    assert lines[0] == "rank,checkpoint,n_minima,l1_sampling,l1_zeroth,l1_second"
    assert len(lines) == 3


def test_segment_and_formats(tmp_path):
    data = _generate(tmp_path, n=4, length=10)
    out = _train(tmp_path, data)
    seg_out = tmp_path / "seg"
    rc = main(["segment", "--checkpoint", str(out / "checkpoint.json"),
               "--data", str(data), "--out", str(seg_out),
               "--samples", "50", "--burn-in", "300", "--thin", "5", "--dt", "0.02",
               "--assign-tol", "100.0"])
    assert rc == 0
    first = (seg_out / "seq_00000.csv").read_text().strip().splitlines()
    assert first[0] == "step,predicted_label,true_label"
    assert len(first) == 11
    sidecar = json.loads((seg_out / "seq_00000.json").read_text())
    assert sidecar["kind"] == "segmentation"
    assert sidecar["rows"] == 10
    summary = json.loads((seg_out / "summary.json").read_text())
    assert summary["sequences"] == 4
    assert summary["mean_accuracy"] is not None


def test_segment_without_truth(tmp_path):
    data = _generate(tmp_path, n=2, length=8)
    # strip ground-truth states
    seq_file = data / "sequences.jsonl"
    stripped = [json.dumps({"obs": json.loads(line)["obs"]})
                for line in seq_file.read_text().strip().splitlines()]
    seq_file.write_text("\n".join(stripped) + "\n")
    header = json.loads((data / "header.json").read_text())
    header["spec"] = None
    (data / "header.json").write_text(json.dumps(header))
    out = _train(tmp_path, data)
    seg_out = tmp_path / "seg"
    rc = main(["segment", "--checkpoint", str(out / "checkpoint.json"),
               "--data", str(data), "--out", str(seg_out),
               "--samples", "40", "--burn-in", "300", "--thin", "5", "--dt", "0.02",
               "--assign-tol", "100.0"])
    assert rc == 0
    rows = (seg_out / "seq_00000.csv").read_text().strip().splitlines()
    assert rows[1].endswith(",")  # empty true_label column
    summary = json.loads((seg_out / "summary.json").read_text())
    assert summary["mean_accuracy"] is None


def test_segment_empty_dataset_exits_2(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "sequences.jsonl").write_text("")
    out_model = _train(tmp_path, _generate(tmp_path / "g"))
    rc = main(["segment", "--checkpoint", str(out_model / "checkpoint.json"),
               "--data", str(data), "--out", str(tmp_path / "seg")])
    assert rc == 2


def test_export_native_grid(tmp_path):
    data = _generate(tmp_path)
    out = _train(tmp_path, data)
    prefix = tmp_path / "grid"
    rc = main(["export", "--checkpoint", str(out / "checkpoint.json"),
               "--out", str(prefix), "--bounds=-1,1,-1,1", "--res", "3,3"])
    assert rc == 0
    lines = (prefix.with_suffix(".csv")).read_text().strip().splitlines()
    assert lines[0] == "u,v,E"
    assert len(lines) == 10
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    assert sidecar["kind"] == "energy"
    assert sidecar["bounds"] == [[-1.0, 1.0], [-1.0, 1.0]]


def test_export_quiver(tmp_path):
    data = _generate(tmp_path)
    out = _train(tmp_path, data)
    prefix = tmp_path / "drift"
    rc = main(["export", "--checkpoint", str(out / "checkpoint.json"),
               "--out", str(prefix), "--quiver", "--bounds=-1,1,-1,1", "--res", "4,4"])
    assert rc == 0
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    assert sidecar["kind"] == "drift"
    assert sidecar["columns"] == ["u", "v", "du", "dv"]
    # drift rows equal -grad E / gamma at the grid points
    model = NldModel.load(out / "checkpoint.json")
    rows = np.loadtxt(prefix.with_suffix(".csv"), delimiter=",", skiprows=1)
    pts = rows[:, :2]
    expected = -model.energy_grad_np(pts) / model.gamma_value()
    assert np.allclose(rows[:, 2:], expected, atol=1e-12)


def test_export_energy_on_baseline_exits_2(tmp_path):
    data = _generate(tmp_path)
    out = _train(tmp_path, data, extra=("--mode", "nsde-baseline"))
    rc = main(["export", "--checkpoint", str(out / "checkpoint.json"),
               "--out", str(tmp_path / "g"), "--bounds=-1,1,-1,1", "--res", "3,3"])
    assert rc == 2


def test_train_reproducible_from_manifest(tmp_path):
    data = _generate(tmp_path)
    (tmp_path / "a").mkdir()
    out_a = _train(tmp_path / "a", data)
    manifest = json.loads((out_a / "manifest.json").read_text())
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(json.dumps({"model": manifest["config"]["model"],
                                "train": manifest["config"]["train"]}))
    out_b = tmp_path / "b"
    rc = main(["train", "--config", str(cfg2), "--data", str(data), "--out", str(out_b)])
    assert rc == 0
    assert (out_a / "checkpoint.json").read_bytes() == (out_b / "checkpoint.json").read_bytes()
    assert (out_a / "loss_history.csv").read_bytes() == (out_b / "loss_history.csv").read_bytes()
