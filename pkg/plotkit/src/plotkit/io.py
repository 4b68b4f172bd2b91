"""Readers for the exported CSV + sidecar-JSON artifact formats.

Three schemas exist:

  energy grid        columns u, v, E           sidecar kind "energy"
  drift grid         columns u, v, du, dv      sidecar kind "drift"
  segmentation       columns step, predicted_label, true_label
                                               sidecar kind "segmentation"

The sidecar always carries "kind", "bounds" ([[u0,u1],[v0,v1]] or
[[step range],[label range]]) and "rows".
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PlotkitError(Exception):
    pass


class MissingSidecar(PlotkitError):
    pass


class SchemaMismatch(PlotkitError):
    pass


GRID_KINDS = ("contour", "surface", "quiver", "flowlines")
KINDS = GRID_KINDS + ("segmentation",)

# figure kind -> sidecar kind it accepts
_EXPECTED_INPUT = {
    "contour": "energy",
    "surface": "energy",
    "quiver": "drift",
    "flowlines": "drift",
    "segmentation": "segmentation",
}


@dataclass
class FigureSpec:
    input_csv: Path
    sidecar: Path
    kind: str
    output: Path
    title: str | None = None
    xlabel: str = "u"
    ylabel: str = "v"

    def __post_init__(self):
        self.input_csv = Path(self.input_csv)
        self.sidecar = Path(self.sidecar)
        self.output = Path(self.output)
        if self.kind not in KINDS:
            raise SchemaMismatch(f"unknown figure kind {self.kind!r}; pick one of {KINDS}")


def default_sidecar(csv_path: Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def load_sidecar(spec: FigureSpec) -> dict:
    if not spec.sidecar.exists():
        raise MissingSidecar(f"no sidecar next to {spec.input_csv} (expected {spec.sidecar})")
    with open(spec.sidecar) as f:
        sidecar = json.load(f)
    expected = _EXPECTED_INPUT[spec.kind]
    actual = sidecar.get("kind")
    if actual != expected:
        raise SchemaMismatch(
            f"figure kind {spec.kind!r} needs a {expected!r} export, got {actual!r}")
    return sidecar


def load_grid(spec: FigureSpec, sidecar: dict):
    """Energy/drift grid as (us, vs, fields) with fields shaped (nu, nv, k)."""
    data = np.loadtxt(spec.input_csv, delimiter=",", skiprows=1, ndmin=2)
    want = 3 if sidecar["kind"] == "energy" else 4
    if data.shape[1] != want:
        raise SchemaMismatch(
            f"{sidecar['kind']} grid wants {want} columns, file has {data.shape[1]}")
    nu, nv = sidecar["resolution"]
    if data.shape[0] != nu * nv:
        raise SchemaMismatch(f"row count {data.shape[0]} != resolution {nu}x{nv}")
    us = np.unique(data[:, 0])
    vs = np.unique(data[:, 1])
    fields = data[:, 2:].reshape(nu, nv, -1)
    return us, vs, fields


def load_segmentation(spec: FigureSpec):
    """(steps, predicted, true_or_None) from a segmentation CSV."""
    steps, pred, true = [], [], []
    with open(spec.input_csv) as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["step", "predicted_label"]:
            raise SchemaMismatch(f"not a segmentation CSV (header {header})")
        for row in reader:
            if not row:
                continue
            steps.append(int(row[0]))
            pred.append(int(row[1]))
            true.append(int(row[2]) if len(row) > 2 and row[2] != "" else None)
    has_truth = all(t is not None for t in true) and len(true) > 0
    return (np.array(steps), np.array(pred),
            np.array(true) if has_truth else None)
