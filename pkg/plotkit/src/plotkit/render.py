"""Render exported artifacts into figures with machine-checkable metadata.

Checks are metadata-based: every render writes ``<image>.meta.json`` whose
bounds echo the input sidecar, so correctness is verifiable without pixel
comparisons.  Inputs are never modified.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import (FigureSpec, GRID_KINDS, MissingSidecar, PlotkitError, SchemaMismatch,
                 default_sidecar, load_grid, load_segmentation, load_sidecar)

log = logging.getLogger("plotkit")

_PNG_METADATA = {"Software": "plotkit"}


def render(spec: FigureSpec) -> Path:
    """Render one figure; returns the image path, writes metadata beside it."""
    sidecar = load_sidecar(spec)
    fig = plt.figure(figsize=(6.0, 5.0))
    try:
        if spec.kind in GRID_KINDS:
            _render_grid(fig, spec, sidecar)
        else:
            _render_segmentation(fig, spec, sidecar)
        fig.savefig(spec.output, dpi=120, metadata=_PNG_METADATA)
    finally:
        plt.close(fig)
    meta = {
        "image": str(spec.output),
        "kind": spec.kind,
        "bounds": sidecar["bounds"],
        "rows": sidecar["rows"],
        "input": str(spec.input_csv),
    }
    meta_path = metadata_path(spec.output)
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1)
    return spec.output


def metadata_path(image: Path) -> Path:
    return Path(str(image) + ".meta.json")


def _render_grid(fig, spec: FigureSpec, sidecar: dict):
    us, vs, fields = load_grid(spec, sidecar)
    (u0, u1), (v0, v1) = sidecar["bounds"]
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    if spec.kind == "contour":
        ax = fig.add_subplot(111)
        cs = ax.contourf(uu, vv, fields[:, :, 0], levels=30, cmap="viridis")
        ax.contour(uu, vv, fields[:, :, 0], levels=12, colors="k", linewidths=0.4)
        fig.colorbar(cs, ax=ax)
    elif spec.kind == "surface":
        ax = fig.add_subplot(111, projection="3d")
        ax.plot_surface(uu, vv, fields[:, :, 0], cmap="viridis", linewidth=0)
        ax.set_zlabel("E")
    elif spec.kind == "quiver":
        ax = fig.add_subplot(111)
        ax.quiver(uu, vv, fields[:, :, 0], fields[:, :, 1], angles="xy")
    else:  # flowlines
        ax = fig.add_subplot(111)
        for line in _flow_lines(us, vs, fields[:, :, 0], fields[:, :, 1]):
            ax.plot(line[:, 0], line[:, 1], lw=0.8, color="tab:blue")
    ax.set_xlim(u0, u1)
    ax.set_ylim(v0, v1)
    ax.set_xlabel(spec.xlabel)
    ax.set_ylabel(spec.ylabel)
    ax.set_title(spec.title or f"{spec.kind}: {spec.input_csv.name}")


def _bilinear(us, vs, field, p):
    """Bilinear interpolation of a (nu, nv) field at point p = (u, v)."""
    u = np.clip(p[0], us[0], us[-1])
    v = np.clip(p[1], vs[0], vs[-1])
    i = min(int(np.searchsorted(us, u) - 1), len(us) - 2)
    j = min(int(np.searchsorted(vs, v) - 1), len(vs) - 2)
    i = max(i, 0)
    j = max(j, 0)
    tu = (u - us[i]) / (us[i + 1] - us[i])
    tv = (v - vs[j]) / (vs[j + 1] - vs[j])
    return ((1 - tu) * (1 - tv) * field[i, j] + tu * (1 - tv) * field[i + 1, j]
            + (1 - tu) * tv * field[i, j + 1] + tu * tv * field[i + 1, j + 1])


def _flow_lines(us, vs, du, dv, seeds_per_axis: int = 8, n_steps: int = 240):
    """Integrate the drift grid with RK2 from a uniform seed sub-grid."""
    h = 0.01 * max(us[-1] - us[0], vs[-1] - vs[0])
    lines = []
    for su in np.linspace(us[0], us[-1], seeds_per_axis + 2)[1:-1]:
        for sv in np.linspace(vs[0], vs[-1], seeds_per_axis + 2)[1:-1]:
            p = np.array([su, sv])
            pts = [p.copy()]
            for _ in range(n_steps):
                k1 = np.array([_bilinear(us, vs, du, p), _bilinear(us, vs, dv, p)])
                mid = p + 0.5 * h * k1
                k2 = np.array([_bilinear(us, vs, du, mid), _bilinear(us, vs, dv, mid)])
                p = p + h * k2
                if not (us[0] <= p[0] <= us[-1] and vs[0] <= p[1] <= vs[-1]):
                    break
                pts.append(p.copy())
            if len(pts) > 1:
                lines.append(np.stack(pts))
    return lines


def _render_segmentation(fig, spec: FigureSpec, sidecar: dict):
    steps, pred, true = load_segmentation(spec)
    n_labels = int(sidecar.get("n_labels", max(int(pred.max(initial=0)) + 1, 1)))
    cmap = plt.get_cmap("tab10", max(n_labels, 1))
    rows = [np.where(pred < 0, np.nan, pred)]
    names = ["predicted"]
    if true is not None:
        rows.append(true.astype(float))
        names.append("true")
    ax = fig.add_subplot(111)
    ax.imshow(np.vstack(rows), aspect="auto", interpolation="nearest",
              cmap=cmap, vmin=-0.5, vmax=max(n_labels, 1) - 0.5,
              extent=(steps[0] - 0.5 if len(steps) else -0.5,
                      steps[-1] + 0.5 if len(steps) else 0.5,
                      len(rows) - 0.5, -0.5))
    ax.set_yticks(range(len(rows)), names)
    ax.set_xlabel("step")
    ax.set_title(spec.title or f"segmentation: {spec.input_csv.name}")


DEFAULT_KIND_FOR_EXPORT = {"energy": "contour", "drift": "quiver", "segmentation": "segmentation"}


def render_all(directory: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every export in a directory (canonical kind per schema) and
    write an index.html listing the images. Unparseable files are skipped
    with a logged warning."""
    directory = Path(directory)
    out = Path(out_dir) if out_dir else directory
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for csv_path in sorted(directory.glob("*.csv")):
        sidecar = default_sidecar(csv_path)
        try:
            with open(sidecar) as f:
                kind = DEFAULT_KIND_FOR_EXPORT[json.load(f)["kind"]]
            spec = FigureSpec(input_csv=csv_path, sidecar=sidecar, kind=kind,
                              output=out / (csv_path.stem + ".png"))
            images.append(render(spec))
        except (OSError, KeyError, ValueError, PlotkitError) as e:
            log.warning("skipping %s: %s", csv_path, e)
    index = out / "index.html"
    body = "\n".join(
        f'<div><h3>{img.name}</h3><img src="{img.name}" width="640"/></div>'
        for img in images)
    index.write_text(
        "<html><head><title>plotkit gallery</title></head>"
        f"<body><h1>plotkit gallery</h1>\n{body}\n</body></html>\n")
    return images
