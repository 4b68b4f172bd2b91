"""Command-line pipeline: generate, train, analyze, segment, export.

Structured settings live in JSON config files; flags cover paths, seeds and
modes.  Every command writes a manifest recording the resolved config, its
hash, the seed, and the artifact paths, so a run can be reproduced bitwise
(timestamps aside) from the manifest alone.

Exit codes: 0 success, 1 runtime failure (instability), 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, datagen, landscape as lsc
from .errors import NldError, UsageError
from .model import NldConfig, NldModel, TrainConfig, history_to_csv, train


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(path: Path, command: str, config: dict, seed: int, artifacts: list,
                   started: float) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "started": started,
        "finished": time.time(),
        "versions": {
            "nld": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    try:
        with open(p) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON in {path}: {e}") from e


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    started = time.time()
    spec = datagen.experiment_config(args.experiment, seed=args.seed, obs_dim=args.obs_dim)
    ds = datagen.generate_dataset(spec, args.sequences, args.length, args.seed)
    out = Path(args.out)
    seq_path, header_path = datagen.save_dataset(ds, out)
    config = {
        "experiment": args.experiment,
        "sequences": args.sequences,
        "length": args.length,
        "seed": args.seed,
        "obs_dim": args.obs_dim,
    }
    write_manifest(out / "manifest.json", "generate", config, args.seed,
                   [seq_path, header_path], started)
    print(f"wrote {args.sequences} sequences of length {args.length} to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_single(model_cfg: dict, train_cfg: dict, data_dir: str, out_dir: str) -> dict:
    started = time.time()
    ds = datagen.load_dataset(data_dir)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    cfg = NldConfig.from_dict(model_cfg)
    tc = TrainConfig.from_dict(train_cfg)
    model = NldModel.new(cfg)
    model, history = train(model, ds, tc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = out / "checkpoint.json"
    hist = out / "loss_history.csv"
    model.save(ck)
    history_to_csv(history, hist)
    write_manifest(out / "manifest.json", "train",
                   {"model": cfg.to_dict(), "train": tc.to_dict(), "data": str(data_dir)},
                   tc.seed, [ck, hist], started)
    return {"checkpoint": str(ck), "final": history[-1] if history else None}


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    model_cfg = doc.get("model", {})
    train_cfg = doc.get("train", {})
    if args.mode is not None:
        model_cfg["mode"] = args.mode
    if args.seed is not None:
        model_cfg["seed"] = args.seed
        train_cfg["seed"] = args.seed
    # validate the mode early for a clean usage error
    NldConfig.from_dict(model_cfg)

    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        jobs = []
        for s in seeds:
            mc = dict(model_cfg, seed=s)
            tc = dict(train_cfg, seed=s)
            jobs.append((mc, tc, args.data, str(Path(args.out) / f"seed_{s}")))
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                results = list(ex.map(_train_worker, jobs))
        else:
            results = [_train_worker(j) for j in jobs]
        for s, r in zip(seeds, results):
            print(f"seed {s}: {r['checkpoint']}")
        return 0
    result = _train_single(model_cfg, train_cfg, args.data, args.out)
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _train_worker(job):
    return _train_single(*job)


# ---------------------------------------------------------------------------
# analyze


def _analysis_kwargs(args) -> dict:
    return dict(
        n_samples=args.samples,
        burn_in=args.burn_in,
        thin=args.thin,
        seed=args.seed,
        dt=args.dt,
        merge_tol=args.merge_tol,
        flow_step=args.flow_step,
        min_share=args.min_share,
    )


def _parse_target(args) -> np.ndarray | None:
    if args.target:
        return np.array([float(x) for x in args.target.split(",")])
    if args.data:
        ds = datagen.load_dataset(args.data)
        if ds.spec is None:
            raise UsageError("dataset has no chain spec; pass --target explicitly")
        return datagen.stationary_distribution(ds.spec.transition)
    return None


def cmd_analyze(args) -> int:
    started = time.time()
    kwargs = _analysis_kwargs(args)
    if args.rank_by:
        if args.rank_by != "second-order":
            raise UsageError(f"unknown ranking criterion {args.rank_by!r}")
        if not args.checkpoint_dir:
            raise UsageError("--rank-by requires --checkpoint-dir")
        target = _parse_target(args)
        if target is None:
            raise UsageError("ranking requires --target or --data")
        rows = []
        for ck in sorted(Path(args.checkpoint_dir).rglob("*.json")):
            try:
                model = NldModel.load(ck)
            except (NldError, KeyError, json.JSONDecodeError):
                continue
            report = lsc.analyze(lsc.model_landscape(model), **kwargs)
            row = {"checkpoint": str(ck), "n_minima": len(report.minima)}
            for label, w in (("sampling", report.weights_sampling),
                             ("zeroth", report.weights_zeroth),
                             ("second", report.weights_second)):
                row[f"l1_{label}"] = (lsc.l1_distance(w, target)
                                      if len(w) == len(target) else float("nan"))
            rows.append(row)
        if not rows:
            raise UsageError(f"no checkpoints found in {args.checkpoint_dir}")
        rows.sort(key=lambda r: (np.isnan(r["l1_second"]), r["l1_second"]))
        out = Path(args.out)
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["rank", "checkpoint", "n_minima",
                                              "l1_sampling", "l1_zeroth", "l1_second"])
            w.writeheader()
            for i, row in enumerate(rows):
                w.writerow({"rank": i + 1, **row})
        write_manifest(out.with_suffix(".manifest.json"), "analyze-rank",
                       {"kwargs": {k: v for k, v in kwargs.items()},
                        "target": target.tolist(), "dir": args.checkpoint_dir},
                       args.seed, [out], started)
        print(f"ranked {len(rows)} checkpoints -> {out}")
        return 0

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = NldModel.load(args.checkpoint)
    report = lsc.analyze(lsc.model_landscape(model), **kwargs)
    out = Path(args.out)
    report.save(out)
    write_manifest(out.with_suffix(".manifest.json"), "analyze",
                   {"checkpoint": str(args.checkpoint), "kwargs": kwargs},
                   args.seed, [out], started)
    print(f"{len(report.minima)} minima -> {out}")
    return 0


# ---------------------------------------------------------------------------
# segment


def cmd_segment(args) -> int:
    started = time.time()
    model = NldModel.load(args.checkpoint)
    ds = datagen.load_dataset(args.data)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    if args.well_report:
        doc = _load_json(args.well_report)
        minima = [np.array(m) for m in doc["minima"]]
    else:
        kept, _ = lsc.find_landscape_minima(lsc.model_landscape(model),
                                            **_analysis_kwargs(args))
        minima = [m.point for m in kept]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limit = args.limit if args.limit else len(ds)
    seqs = ds.sequences[:limit]

    all_pred, all_true = [], []
    artifacts = []
    for i, (states, obs) in enumerate(seqs):
        seg = lsc.segment_sequence(model, obs, minima, merge_tol=args.assign_tol,
                                   flow_step=args.flow_step)
        all_pred.append(seg.labels)
        all_true.append(states)
    have_truth = all(t is not None for t in all_true)
    n_states = ds.spec.n_states if ds.spec else len(minima)
    n_labels = max(n_states, len(minima))
    perm = None
    if have_truth:
        _, perm = lsc.best_permutation_accuracy(
            np.concatenate(all_pred), np.concatenate(all_true), n_labels)
    per_seq = []
    for i, (pred, states) in enumerate(zip(all_pred, all_true)):
        csv_path = out / f"seq_{i:05d}.csv"
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "predicted_label", "true_label"])
            for k, p in enumerate(pred):
                w.writerow([k, int(p), "" if states is None else int(states[k])])
        sidecar = {
            "kind": "segmentation",
            "rows": int(len(pred)),
            "bounds": [[0.0, float(max(len(pred) - 1, 1))], [0.0, float(max(n_labels - 1, 1))]],
            "n_labels": int(n_labels),
            "columns": ["step", "predicted_label", "true_label"],
        }
        with open(csv_path.with_suffix(".json"), "w") as f:
            json.dump(sidecar, f, indent=1)
        artifacts.append(csv_path)
        if have_truth and len(pred):
            mapped = np.array([perm[p] if p >= 0 else -1 for p in pred])
            per_seq.append(float(np.mean(mapped == states)))
    summary = {
        "sequences": len(seqs),
        "permutation": list(perm) if perm else None,
        "mean_accuracy": float(np.mean(per_seq)) if per_seq else None,
        "std_accuracy": float(np.std(per_seq)) if per_seq else None,
        "minima": [m.tolist() for m in minima],
    }
    summary_path = out / "summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=1)
    artifacts.append(summary_path)
    write_manifest(out / "manifest.json", "segment",
                   {"checkpoint": str(args.checkpoint), "data": str(args.data),
                    "assign_tol": args.assign_tol, "limit": args.limit,
                    "well_report": args.well_report,
                    "analysis": _analysis_kwargs(args)},
                   args.seed, artifacts, started)
    if summary["mean_accuracy"] is not None:
        print(f"mean accuracy {summary['mean_accuracy']:.4f} "
              f"(std {summary['std_accuracy']:.4f}) over {len(seqs)} sequences")
    else:
        print(f"labeled {len(seqs)} sequences (no ground truth)")
    return 0


# ---------------------------------------------------------------------------
# export


def _parse_bounds(text: str):
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 4:
        raise UsageError("--bounds wants 'u0,u1,v0,v1'")
    return (vals[0], vals[1]), (vals[2], vals[3])


def cmd_export(args) -> int:
    started = time.time()
    model = NldModel.load(args.checkpoint)
    kind = "drift" if args.quiver else args.kind
    d = model.config.latent_dim

    if args.plane == "minima":
        kept, _ = lsc.find_landscape_minima(lsc.model_landscape(model),
                                            **_analysis_kwargs(args))
        if len(kept) < 3:
            raise UsageError(f"plane through minima needs 3 minima, found {len(kept)}")
        m1, m2, m3 = (m.point for m in kept[:3])
        plane = lsc.plane_through_points(m1, m2, m3)
        if args.bounds is None:
            origin, (b1, b2) = plane
            uv = np.array([[(m - origin) @ b1, (m - origin) @ b2] for m in (m1, m2, m3)])
            lo, hi = uv.min(axis=0), uv.max(axis=0)
            pad = 0.6 * (hi - lo + 1e-9)
            bounds = ((float(lo[0] - pad[0]), float(hi[0] + pad[0])),
                      (float(lo[1] - pad[1]), float(hi[1] + pad[1])))
        else:
            bounds = _parse_bounds(args.bounds)
    elif args.plane_file:
        doc = _load_json(args.plane_file)
        plane = (np.array(doc["origin"]), (np.array(doc["basis"][0]), np.array(doc["basis"][1])))
        bounds = _parse_bounds(args.bounds) if args.bounds else ((-3, 3), (-3, 3))
    else:
        plane = lsc.native_plane(d)
        bounds = _parse_bounds(args.bounds) if args.bounds else ((-3, 3), (-3, 3))

    res = tuple(int(x) for x in args.res.split(","))
    if len(res) != 2:
        raise UsageError("--res wants 'NU,NV'")

    if kind == "energy":
        if model.config.mode == "nsde-baseline":
            raise UsageError("baseline model has no energy; use --quiver")
        fn = lambda pts: model.energy_np(pts, with_bias=True)
    else:
        if model.config.mode == "nsde-baseline":
            dyn = model.dynamics()
            fn = lambda pts: np.stack([dyn.prior_drift(p, 0.0) for p in pts])
        else:
            scape = lsc.model_landscape(model)
            gamma = scape.gamma
            fn = lambda pts: -scape.grad(pts) / gamma

    rows, sidecar = lsc.export_landscape(fn, plane, bounds, res, kind=kind)
    csv_path, json_path = lsc.write_grid(args.out, rows, sidecar)
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "export",
                   {"checkpoint": str(args.checkpoint), "kind": kind,
                    "bounds": [list(bounds[0]), list(bounds[1])], "res": list(res),
                    "plane": args.plane or args.plane_file or "native"},
                   args.seed, [csv_path, json_path], started)
    print(f"wrote {csv_path} and {json_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nld", description="Neural Langevin dynamics pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a Markov-chain dataset")
    g.add_argument("--experiment", type=int, required=True, choices=(1, 2))
    g.add_argument("--sequences", type=int, required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--obs-dim", type=int, default=15)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--seeds", default=None, help="comma list; trains one model per seed")
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(fn=cmd_train)

    def add_analysis_flags(q):
        q.add_argument("--samples", type=int, default=1000)
        q.add_argument("--burn-in", type=int, default=10**4)
        q.add_argument("--thin", type=int, default=100)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--dt", type=float, default=None)
        q.add_argument("--merge-tol", type=float, default=1e-2)
        q.add_argument("--flow-step", type=float, default=0.1)
        q.add_argument("--min-share", type=float, default=0.0)

    a = sub.add_parser("analyze", help="well report for a trained energy model")
    a.add_argument("--checkpoint", default=None)
    a.add_argument("--checkpoint-dir", default=None)
    a.add_argument("--rank-by", default=None)
    a.add_argument("--target", default=None, help="comma probabilities for ranking")
    a.add_argument("--data", default=None, help="dataset dir; ranking target from its chain")
    a.add_argument("--out", required=True)
    add_analysis_flags(a)
    a.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("segment", help="label dataset timesteps by basin")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--well-report", default=None, help="reuse minima from a report")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--assign-tol", type=float, default=0.5)
    add_analysis_flags(s)
    s.set_defaults(fn=cmd_segment)

    e = sub.add_parser("export", help="grid export of energy or drift")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="output prefix (.csv/.json added)")
    e.add_argument("--kind", choices=("energy", "drift"), default="energy")
    e.add_argument("--quiver", action="store_true", help="shorthand for --kind drift")
    e.add_argument("--plane", default=None, choices=("minima",))
    e.add_argument("--plane-file", default=None)
    e.add_argument("--bounds", default=None)
    e.add_argument("--res", default="41,41")
    add_analysis_flags(e)
    e.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors already
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NldError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
