"""Rendering acceptance: every export kind from a real pipeline run.

Drives the primary `nld` CLI as a subprocess (the only coupling is the
documented artifact formats), renders each export kind, and checks the
machine-readable metadata against the sidecars.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from plotkit import FigureSpec, metadata_path, render, render_all


def nld(*args):
    proc = subprocess.run([sys.executable, "-m", "nld", *map(str, args)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, f"nld {args} failed:\n{proc.stderr}"
    return proc


TOY_CONFIG = {
    "model": {
        "mode": "overdamped", "latent_dim": 2, "obs_dim": 4,
        "enc_hidden": 6, "context_dim": 3,
        "energy_hidden": [8], "control_hidden": [8], "decoder_hidden": [8],
        "dt": 0.05, "constants": {"train_gamma": False, "train_beta": False},
        "seed": 2,
    },
    "train": {"lr": 2e-3, "epochs": 1, "warmup_epochs": 1, "batch_size": 4, "seed": 2},
}


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    nld("generate", "--experiment", 1, "--sequences", 4, "--length", 12,
        "--seed", 5, "--out", data, "--obs-dim", 4)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    run = root / "run"
    nld("train", "--config", cfg, "--data", data, "--out", run)
    ck = run / "checkpoint.json"
    nld("export", "--checkpoint", ck, "--out", root / "energy",
        "--bounds=-1.5,1.5,-1.5,1.5", "--res", "9,9")
    nld("export", "--checkpoint", ck, "--out", root / "drift", "--quiver",
        "--bounds=-1.5,1.5,-1.5,1.5", "--res", "7,7")
    seg = root / "seg"
    nld("segment", "--checkpoint", ck, "--data", data, "--out", seg,
        "--samples", 30, "--burn-in", 200, "--thin", 3, "--dt", 0.02,
        "--assign-tol", 1000.0)
    return root


def test_criterion_9_all_kinds_render_with_matching_bounds(artifacts, tmp_path):
    t0 = time.time()
    cases = [
        ("contour", artifacts / "energy.csv"),
        ("surface", artifacts / "energy.csv"),
        ("quiver", artifacts / "drift.csv"),
        ("flowlines", artifacts / "drift.csv"),
        ("segmentation", artifacts / "seg" / "seq_00000.csv"),
    ]
    for kind, csv_path in cases:
        out = tmp_path / f"{kind}.png"
        spec = FigureSpec(input_csv=csv_path, sidecar=csv_path.with_suffix(".json"),
                          kind=kind, output=out)
        render(spec)
        assert out.exists(), kind
        meta = json.loads(metadata_path(out).read_text())
        sidecar = json.loads(csv_path.with_suffix(".json").read_text())
        assert meta["bounds"] == sidecar["bounds"], kind
        assert meta["rows"] == sidecar["rows"], kind
    elapsed = time.time() - t0
    assert elapsed < 60.0, f"rendering took {elapsed:.1f}s"
    print(f"\n[criterion 9] PASS: contour/surface/quiver/flowlines/segmentation all "
          f"rendered with sidecar-matching bounds in {elapsed:.1f}s")


def test_criterion_9_table3_style_summary_and_timeline(artifacts, tmp_path):
    # the segment command reports Table-3-style statistics (mean/std accuracy)
    summary = json.loads((artifacts / "seg" / "summary.json").read_text())
    assert "mean_accuracy" in summary and "std_accuracy" in summary
    # and its per-sequence CSV renders as a timeline with one band per label
    csv_path = artifacts / "seg" / "seq_00001.csv"
    out = tmp_path / "timeline.png"
    render(FigureSpec(input_csv=csv_path, sidecar=csv_path.with_suffix(".json"),
                      kind="segmentation", output=out))
    assert out.exists()


def test_render_all_gallery_over_pipeline_exports(artifacts, tmp_path):
    gallery = tmp_path / "gallery"
    images = render_all(artifacts, gallery)
    assert {i.name for i in images} == {"energy.png", "drift.png"}
    assert (gallery / "index.html").exists()
