import json
from pathlib import Path

import numpy as np
import pytest

from plotkit import FigureSpec, MissingSidecar, SchemaMismatch, metadata_path, render, render_all
from plotkit.cli import main


def write_energy_grid(path: Path, res=3, bounds=((-1.0, 1.0), (-1.0, 1.0))):
    us = np.linspace(bounds[0][0], bounds[0][1], res)
    vs = np.linspace(bounds[1][0], bounds[1][1], res)
    rows = [(u, v, 0.5 * (u * u + v * v)) for u in us for v in vs]
    with open(path, "w") as f:
        f.write("u,v,E\n")
        for r in rows:
            f.write(",".join(repr(float(x)) for x in r) + "\n")
    sidecar = {
        "kind": "energy",
        "origin": [0.0, 0.0],
        "basis": [[1.0, 0.0], [0.0, 1.0]],
        "bounds": [list(bounds[0]), list(bounds[1])],
        "resolution": [res, res],
        "rows": len(rows),
        "columns": ["u", "v", "E"],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return sidecar


def write_drift_grid(path: Path, res=4):
    us = vs = np.linspace(-1, 1, res)
    rows = [(u, v, -u, -v) for u in us for v in vs]
    with open(path, "w") as f:
        f.write("u,v,du,dv\n")
        for r in rows:
            f.write(",".join(repr(float(x)) for x in r) + "\n")
    sidecar = {
        "kind": "drift",
        "origin": [0.0, 0.0],
        "basis": [[1.0, 0.0], [0.0, 1.0]],
        "bounds": [[-1.0, 1.0], [-1.0, 1.0]],
        "resolution": [res, res],
        "rows": len(rows),
        "columns": ["u", "v", "du", "dv"],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return sidecar


def write_segmentation(path: Path, n=40, with_truth=True):
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 3, size=n)
    with open(path, "w") as f:
        f.write("step,predicted_label,true_label\n")
        for k in range(n):
            truth = (pred[k] + (k % 7 == 0)) % 3 if with_truth else ""
            f.write(f"{k},{pred[k]},{truth}\n")
    sidecar = {
        "kind": "segmentation",
        "rows": n,
        "bounds": [[0.0, float(n - 1)], [0.0, 2.0]],
        "n_labels": 3,
        "columns": ["step", "predicted_label", "true_label"],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return sidecar


def test_contour_render_metadata_matches_sidecar(tmp_path):
    csv = tmp_path / "grid.csv"
    sidecar = write_energy_grid(csv)
    out = tmp_path / "grid.png"
    spec = FigureSpec(input_csv=csv, sidecar=csv.with_suffix(".json"),
                      kind="contour", output=out)
    render(spec)
    assert out.exists()
    meta = json.loads(metadata_path(out).read_text())
    assert meta["bounds"] == sidecar["bounds"] == [[-1.0, 1.0], [-1.0, 1.0]]
    assert meta["rows"] == 9


@pytest.mark.parametrize("kind", ["contour", "surface"])
def test_energy_kinds(tmp_path, kind):
    csv = tmp_path / "e.csv"
    write_energy_grid(csv, res=5)
    spec = FigureSpec(csv, csv.with_suffix(".json"), kind, tmp_path / f"{kind}.png")
    render(spec)
    assert (tmp_path / f"{kind}.png").exists()


@pytest.mark.parametrize("kind", ["quiver", "flowlines"])
def test_drift_kinds(tmp_path, kind):
    csv = tmp_path / "d.csv"
    write_drift_grid(csv, res=6)
    spec = FigureSpec(csv, csv.with_suffix(".json"), kind, tmp_path / f"{kind}.png")
    render(spec)
    assert (tmp_path / f"{kind}.png").exists()


def test_segmentation_timeline(tmp_path):
    csv = tmp_path / "seq.csv"
    sidecar = write_segmentation(csv)
    spec = FigureSpec(csv, csv.with_suffix(".json"), "segmentation", tmp_path / "seq.png")
    render(spec)
    meta = json.loads(metadata_path(tmp_path / "seq.png").read_text())
    assert meta["bounds"] == sidecar["bounds"]


def test_segmentation_without_truth(tmp_path):
    csv = tmp_path / "seq.csv"
    write_segmentation(csv, with_truth=False)
    spec = FigureSpec(csv, csv.with_suffix(".json"), "segmentation", tmp_path / "seq.png")
    render(spec)
    assert (tmp_path / "seq.png").exists()


def test_kind_schema_mismatch(tmp_path):
    csv = tmp_path / "e.csv"
    write_energy_grid(csv)
    spec = FigureSpec(csv, csv.with_suffix(".json"), "flowlines", tmp_path / "x.png")
    with pytest.raises(SchemaMismatch):
        render(spec)


def test_missing_sidecar(tmp_path):
    csv = tmp_path / "e.csv"
    write_energy_grid(csv)
    csv.with_suffix(".json").unlink()
    spec = FigureSpec(csv, csv.with_suffix(".json"), "contour", tmp_path / "x.png")
    with pytest.raises(MissingSidecar):
        render(spec)


def test_render_does_not_touch_inputs(tmp_path):
    csv = tmp_path / "e.csv"
    write_energy_grid(csv)
    before_csv = csv.read_bytes()
    before_sidecar = csv.with_suffix(".json").read_bytes()
    spec = FigureSpec(csv, csv.with_suffix(".json"), "contour", tmp_path / "e.png")
    render(spec)
    assert csv.read_bytes() == before_csv
    assert csv.with_suffix(".json").read_bytes() == before_sidecar


def test_render_all_empty_dir(tmp_path):
    images = render_all(tmp_path)
    assert images == []
    index = (tmp_path / "index.html").read_text()
    assert "gallery" in index


def test_render_all_three_exports(tmp_path):
    write_energy_grid(tmp_path / "energy.csv")
    write_drift_grid(tmp_path / "drift.csv")
    write_segmentation(tmp_path / "seq_00000.csv")
    images = render_all(tmp_path)
    assert len(images) == 3
    index = (tmp_path / "index.html").read_text()
    for img in images:
        assert img.name in index


def test_render_all_skips_unparseable(tmp_path):
    write_energy_grid(tmp_path / "good.csv")
    (tmp_path / "bad.csv").write_text("not,a,grid\n1,2\n")
    (tmp_path / "bad.json").write_text("{}")
    images = render_all(tmp_path)
    assert [i.name for i in images] == ["good.png"]


def test_render_all_idempotent_bytes(tmp_path):
    write_energy_grid(tmp_path / "energy.csv")
    out1 = tmp_path / "o1"
    out2 = tmp_path / "o2"
    render_all(tmp_path, out1)
    render_all(tmp_path, out2)
    assert (out1 / "energy.png").read_bytes() == (out2 / "energy.png").read_bytes()
    assert (out1 / "index.html").read_bytes() == (out2 / "index.html").read_bytes()


def test_cli_render_and_render_all(tmp_path):
    csv = tmp_path / "e.csv"
    write_energy_grid(csv)
    rc = main(["render", "--kind", "contour", "--in", str(csv),
               "--out", str(tmp_path / "e.png")])
    assert rc == 0
    assert (tmp_path / "e.png").exists()
    rc = main(["render-all", "--dir", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "index.html").exists()


def test_cli_schema_mismatch_exit_code(tmp_path):
    csv = tmp_path / "e.csv"
    write_energy_grid(csv)
    rc = main(["render", "--kind", "quiver", "--in", str(csv),
               "--out", str(tmp_path / "x.png")])
    assert rc == 2
