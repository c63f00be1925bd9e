"""svrkit command line.

Subcommands run one pipeline stage each and write into ``--out``::

    gen-phantom    synthetic volume (svrvol) + intensity histogram
    slice-dataset  Fibonacci slice stacks, pruning, optional motion corruption
    train          anchor regressor on a slice or DRR dataset
    predict        anchor / pose predictions + 1 mm error histogram
    reconstruct    PSF splat + SVR refinement, per-iteration report
    drr-gen        DRR dataset over half-sphere poses
    evaluate       pose-error and PSNR summary for a prediction file

Every artefact is a pure function of (config, seed, inputs); wall-clock data
goes to ``run_info.json`` only.  Set ``SVRKIT_LOG=INFO`` (or DEBUG) for progress.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .config import ConfigError, PipelineConfig, load_config
from .drr import fit_pitch, render_drr, render_many, sample_halfsphere_poses, save_drr_dataset
from .geometry import AnchorTriplet, RigidPose, anchor_error, pose_error_decomposed
from .reconstruction import ReconstructionError, psnr, splat_reconstruct, svr_iterate
from .regressor import (
    CheckpointError,
    ConfigMismatchError,
    TrainingDivergedError,
    init_model,
    load_checkpoint,
    mean_anchor_error,
    parameter_count,
    predict_many,
    save_checkpoint,
    train,
)
from .sampling import corrupt_motion, generate_dataset, load_manifest, read_image, save_dataset
from .volume import generate_phantom, load_svrvol, save_svrvol

log = logging.getLogger("svrkit")


class UsageError(Exception):
    """Bad inputs detected before anything is written (exit code 2)."""


# --------------------------------------------------------------------------
# small I/O helpers


def _json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=1, allow_nan=False, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])


def _config_echo(cfg: PipelineConfig) -> dict:
    doc = cfg.to_dict()
    doc.pop("output_dir")
    return doc


def _histogram(values, width: float):
    values = np.asarray(values, dtype=np.float64)
    top = max(1, int(np.floor(values.max() / width)) + 1) if values.size else 1
    edges = np.arange(top + 1) * width
    counts, _ = np.histogram(np.clip(values, 0, edges[-1] - 1e-9 * width), bins=edges)
    return edges, counts


def _need_file(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _read_volume(path, what="volume"):
    p = Path(path)
    json_path = p.with_suffix(".json") if p.suffix != ".json" else p
    _need_file(json_path, what)
    return load_svrvol(p)


def _read_dataset(path) -> dict:
    """Images and labels of a slice or DRR dataset directory."""
    root = _need_file(path, "dataset")
    if not (root / "manifest.json").exists():
        raise UsageError(f"{root} has no manifest.json")
    doc = load_manifest(root)
    recs = doc["samples"]
    if not recs:
        raise UsageError(f"{root}: dataset is empty")
    sizes = {r["size"] for r in recs}
    if len(sizes) != 1:
        raise UsageError(f"{root}: mixed image sizes {sorted(sizes)}")
    images = np.stack([read_image(root / r["file"], r["size"]) for r in recs])
    labelled = all("anchors" in r for r in recs)
    true_anchors = None
    if labelled:
        true_anchors = np.stack([
            AnchorTriplet.from_json(r.get("ground_truth_anchors", r["anchors"])).as_array() for r in recs
        ])
    poses = [RigidPose.from_json(r["pose"]) if "pose" in r else None for r in recs]
    truth = [RigidPose.from_json(r["ground_truth"]) if "ground_truth" in r else p for r, p in zip(recs, poses)]
    return {
        "kind": doc.get("kind", "slices"),
        "ids": [r["id"] for r in recs],
        "images": images,
        "anchors": true_anchors,
        "poses": poses,
        "truth": truth,
        "groups": [r.get("normal_index", -1) for r in recs],
        "pixel_spacing": recs[0].get("pixel_spacing_mm", 1.0),
        "size": recs[0]["size"],
    }


# --------------------------------------------------------------------------
# commands: each validates its inputs first, then creates ``out`` and writes


def cmd_gen_phantom(args, cfg: PipelineConfig, out: Path):
    spec = cfg.phantom.spec(cfg.seed)
    vol = generate_phantom(spec, cfg.phantom.L, cfg.phantom.spacing)
    out.mkdir(parents=True, exist_ok=True)
    save_svrvol(vol, out / "phantom")
    edges = np.linspace(0.0, 1.0, 51)
    counts, _ = np.histogram(vol.data, bins=edges)
    _csv(out / "phantom_histogram.csv", ["bin_lo", "bin_hi", "voxels"], zip(edges[:-1], edges[1:], counts))
    plotting.error_histogram(edges, counts, out / "phantom_histogram.png", xlabel="intensity", ylabel="voxels")
    c = vol.L // 2
    plotting.image_grid([vol.data[c], vol.data[:, c], vol.data[:, :, c]], out / "phantom_views.png", cols=3,
                        titles=["axial", "coronal", "sagittal"])
    levels = sorted({float(v) for v in np.unique(vol.data)}) if spec.kind == "nested-ellipsoids" else None
    _json(out / "phantom_report.json", {"spec": asdict(spec), "L": vol.L, "spacing_mm": vol.spacing,
                                        "plateaus": levels, "config": _config_echo(cfg)})
    return {"volume": str(out / "phantom.json")}


def cmd_slice_dataset(args, cfg: PipelineConfig, out: Path):
    vol = _read_volume(args.volume)
    s = cfg.sampling
    samples, manifest = generate_dataset(vol, s.sampling(cfg.seed), source_id=Path(args.volume).stem,
                                         threads=args.threads)
    if not samples:
        raise ValueError("sampling produced no slices (check prune_K and plane_count)")
    corruption = None
    if s.corrupt_max_rot_deg > 0 or s.corrupt_max_trans_mm > 0:
        samples = corrupt_motion(samples, s.corrupt_max_rot_deg, s.corrupt_max_trans_mm, seed=cfg.seed,
                                 antithetic=s.corrupt_antithetic)
        corruption = {"max_rot_deg": s.corrupt_max_rot_deg, "max_trans_mm": s.corrupt_max_trans_mm,
                      "antithetic": s.corrupt_antithetic, "seed": cfg.seed}
    manifest = replace(manifest, extra={**manifest.extra, "corruption": corruption})
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out, samples, manifest)
    step = max(1, len(samples) // 16)
    plotting.image_grid([x.image for x in samples[::step][:16]], out / "preview.png")
    log.info("dataset: %d generated, %d kept, threshold %.6g", manifest.generated, manifest.kept, manifest.threshold)
    return {"generated": manifest.generated, "kept": manifest.kept}


def cmd_train(args, cfg: PipelineConfig, out: Path):
    data = _read_dataset(args.dataset)
    if data["anchors"] is None:
        raise UsageError("training needs a labelled dataset")
    net_cfg = cfg.training.net(cfg.seed)
    if data["size"] != net_cfg.input_size:
        raise ConfigMismatchError(f"dataset images are {data['size']}px, training.input_size is {net_cfg.input_size}")
    X, Y = data["images"], data["anchors"]
    rng = np.random.default_rng(cfg.seed)
    n_hold = int(round(cfg.training.holdout_fraction * len(X)))
    if len(X) - n_hold < 1:
        raise UsageError("holdout_fraction leaves no training samples")
    perm = rng.permutation(len(X))
    hold, tr = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    m0 = init_model(net_cfg)
    before = mean_anchor_error(m0, X[hold], Y[hold]) if n_hold else None
    out.mkdir(parents=True, exist_ok=True)
    m = train(m0, X[tr], Y[tr])
    after = mean_anchor_error(m, X[hold], Y[hold]) if n_hold else None
    save_checkpoint(m, out / "checkpoint.svrk")
    _csv(out / "training_log.csv", ["epoch", "mean_loss", "mean_anchor_error_mm"],
         ([e["epoch"], e["mean_loss"], e["mean_anchor_error_mm"]] for e in m.log))
    if m.log:
        plotting.training_curve(m.log, out / "training_curve.png")
    _json(out / "training_report.json", {
        "n_train": int(len(tr)),
        "n_holdout": int(n_hold),
        "holdout_ids": [data["ids"][i] for i in hold],
        "parameter_count": parameter_count(net_cfg),
        "untrained_holdout_error_mm": before,
        "trained_holdout_error_mm": after,
        "error_ratio": None if not before else after / before,
        "config": _config_echo(cfg),
    })
    return {"holdout_error_mm": after, "untrained_error_mm": before}


def _prediction_records(data, preds, poses, bin_mm):
    recs = []
    errors = []
    for k, (sid, a, p) in enumerate(zip(data["ids"], preds, poses)):
        rec = {"id": sid, "anchors": AnchorTriplet.from_array(a).to_json(),
               "pose": None if p is None else p.to_json(), "failed": p is None}
        if data["anchors"] is not None:
            e = anchor_error(AnchorTriplet.from_array(data["anchors"][k]), AnchorTriplet.from_array(a))
            rec["anchor_error_mm"] = e
            errors.append(e)
        recs.append(rec)
    return recs, errors


def cmd_predict(args, cfg: PipelineConfig, out: Path):
    ckpt = _need_file(args.checkpoint, "checkpoint")
    data = _read_dataset(args.dataset)
    m = load_checkpoint(ckpt, input_size=data["size"])
    preds, poses = predict_many(m, data["images"])
    recs, errors = _prediction_records(data, preds, poses, cfg.evaluation.histogram_bin_mm)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"kind": data["kind"], "count": len(recs), "failures": [r["id"] for r in recs if r["failed"]],
           "labelled": data["anchors"] is not None, "predictions": recs}
    if errors:
        edges, counts = _histogram(errors, cfg.evaluation.histogram_bin_mm)
        doc["mean_anchor_error_mm"] = float(np.mean(errors))
        doc["median_anchor_error_mm"] = float(np.median(errors))
        _csv(out / "error_histogram.csv", ["bin_lo_mm", "bin_hi_mm", "count"], zip(edges[:-1], edges[1:], counts))
        plotting.error_histogram(edges, counts, out / "error_histogram.png")
    _json(out / "predictions.json", doc)
    return {"failures": len(doc["failures"]), "mean_anchor_error_mm": doc.get("mean_anchor_error_mm")}


def _load_predicted_poses(path, ids):
    doc = json.loads(_need_file(path, "predictions").read_text())
    by_id = {r["id"]: r for r in doc["predictions"]}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise UsageError(f"predictions lack {len(missing)} dataset ids (first: {missing[0]})")
    return [None if by_id[i]["pose"] is None else RigidPose.from_json(by_id[i]["pose"]) for i in ids]


def cmd_reconstruct(args, cfg: PipelineConfig, out: Path):
    data = _read_dataset(args.dataset)
    if data["kind"] != "slices":
        raise UsageError("reconstruct needs a slice dataset")
    rc = cfg.reconstruction
    poses = _load_predicted_poses(args.predictions, data["ids"]) if args.predictions else data["poses"]
    reference = _read_volume(args.reference, "reference") if args.reference else None
    if reference is not None and reference.L != rc.output_L:
        raise UsageError(f"reference is {reference.L}^3, reconstruction.output_L is {rc.output_L}")
    keep = [k for k, p in enumerate(poses) if p is not None]
    failures = [data["ids"][k] for k, p in enumerate(poses) if p is None]
    if not keep:
        raise ReconstructionError("no slice has a usable pose")
    images = [data["images"][k] for k in keep]
    use = [poses[k] for k in keep]
    ids = [data["ids"][k] for k in keep]
    groups = [data["groups"][k] for k in keep]
    groups = groups if all(g >= 0 for g in groups) else None
    ps = data["pixel_spacing"]
    splat = splat_reconstruct(zip(images, use), rc, pixel_spacing=ps)
    splat_psnr = psnr(splat, reference) if reference is not None else None
    st = svr_iterate(images, use, rc, reference=reference, pixel_spacing=ps, threads=args.threads,
                     slice_ids=ids, groups=groups)
    out.mkdir(parents=True, exist_ok=True)
    save_svrvol(st.volume, out / "reconstruction")
    final_psnr = psnr(st.volume, reference) if reference is not None else None
    _json(out / "reconstruction_report.json", {
        "iterations": st.log,
        "config": asdict(rc),
        "n_slices": len(images),
        "prediction_failures": failures,
        "splat_psnr_db": _finite(splat_psnr),
        "final_psnr_db": _finite(final_psnr),
        "weights": {str(i): int(w) for i, w in zip(ids, st.weights)},
    })
    _json(out / "poses.json", {"poses": [{"id": i, "pose": p.to_json()} for i, p in zip(ids, st.poses)]})
    rows = [[0, None, splat_psnr, "", len(images)]] + [
        [e["iteration"], e["mean_ncc"], e["psnr_db"], " ".join(str(x) for x in e["excluded_slice_ids"]), e["included"]]
        for e in st.log
    ]
    _csv(out / "iterations.csv", ["iteration", "mean_ncc", "psnr_db", "excluded_slice_ids", "included"], rows)
    if st.log:
        plotting.reconstruction_curve(st.log, out / "reconstruction.png", baseline_psnr=splat_psnr)
    return {"splat_psnr_db": splat_psnr, "final_psnr_db": final_psnr}


def cmd_drr(args, cfg: PipelineConfig, out: Path):
    vol = _read_volume(args.volume)
    d = cfg.drr
    pitch = d.pitch_mm if d.pitch_mm is not None else fit_pitch(vol, d.detector_size, 400.0)
    geoms = sample_halfsphere_poses(d.distances_mm, d.bound_deg, d.step_deg, d.count, cfg.seed, d.detector_size, pitch)
    images = render_many(vol, geoms, d.mode, d.mu, threads=args.threads)
    peak = max(float(np.max(im)) for im in images)
    scale = 1.0 / peak if d.normalize and peak > 0 else 1.0
    out.mkdir(parents=True, exist_ok=True)
    save_drr_dataset(out, images, geoms, {"drr": asdict(d), "pitch_mm": pitch, "seed": cfg.seed},
                     source_id=Path(args.volume).stem, scale=scale)
    plotting.image_grid([im * scale for im in images[:16]], out / "preview.png")
    result = {"count": len(geoms), "pitch_mm": pitch}
    if args.self_test:
        g = geoms[0]
        one = render_drr(vol, g, "raw")
        two = render_drr(vol.with_data(2.0 * vol.data), g, "raw")
        dev = float(np.max(np.abs(two - 2.0 * one)) / max(float(np.max(np.abs(one))), 1e-300))
        _json(out / "drr_selftest.json", {"raw_linearity_max_rel_dev": dev, "passed": dev < 1e-9})
        result["linearity_dev"] = dev
    return result


def cmd_evaluate(args, cfg: PipelineConfig, out: Path):
    data = _read_dataset(args.dataset)
    if data["anchors"] is None:
        raise UsageError("evaluate needs a labelled dataset")
    doc = json.loads(_need_file(args.predictions, "predictions").read_text())
    by_id = {r["id"]: r for r in doc["predictions"]}
    if any(i not in by_id for i in data["ids"]):
        raise UsageError("predictions do not cover the dataset")
    volume = _read_volume(args.volume, "volume") if args.volume else None
    reference = _read_volume(args.reference, "reference") if args.reference else None
    if (volume is None) != (reference is None):
        raise UsageError("--volume and --reference go together")
    rows = []
    for k, sid in enumerate(data["ids"]):
        r = by_id[sid]
        a = anchor_error(AnchorTriplet.from_array(data["anchors"][k]), AnchorTriplet.from_json(r["anchors"]))
        mm = deg = None
        if r["pose"] is not None and data["truth"][k] is not None:
            mm, deg = pose_error_decomposed(data["truth"][k], RigidPose.from_json(r["pose"]))
        rows.append([sid, a, mm, deg])
    anchors = np.array([r[1] for r in rows])
    mms = np.array([r[2] for r in rows if r[2] is not None])
    degs = np.array([r[3] for r in rows if r[3] is not None])
    summary = {
        "kind": data["kind"],
        "count": len(rows),
        "failures": sum(r[2] is None for r in rows),
        "anchor_error_mm": {"mean": float(anchors.mean()), "median": float(np.median(anchors)),
                            "max": float(anchors.max())},
        "translation_error_mm": None if not mms.size else {"mean": float(mms.mean()), "median": float(np.median(mms))},
        "rotation_error_deg": None if not degs.size else {"mean": float(degs.mean()), "median": float(np.median(degs))},
        "psnr_db": None if volume is None else _finite(psnr(volume, reference)),
    }
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "errors.csv", ["id", "anchor_error_mm", "translation_error_mm", "rotation_error_deg"], rows)
    if mms.size:
        edges, counts = _histogram(mms, cfg.evaluation.histogram_bin_mm)
        plotting.error_histogram(edges, counts, out / "translation_error_histogram.png", xlabel="translation error (mm)")
    _json(out / "evaluation.json", summary)
    return summary


COMMANDS = {
    "gen-phantom": cmd_gen_phantom,
    "slice-dataset": cmd_slice_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "reconstruct": cmd_reconstruct,
    "drr-gen": cmd_drr,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline JSON config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores; results do not change")

    p = argparse.ArgumentParser(prog="svrkit", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"svrkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-phantom", parents=[common], help="write a synthetic phantom volume")
    sp = sub.add_parser("slice-dataset", parents=[common], help="slice a volume into a labelled dataset")
    sp.add_argument("--volume", required=True)
    sp = sub.add_parser("train", parents=[common], help="train the anchor regressor")
    sp.add_argument("--dataset", required=True)
    sp = sub.add_parser("predict", parents=[common], help="predict anchors and poses")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp = sub.add_parser("reconstruct", parents=[common], help="PSF splat + SVR refinement")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--predictions", help="predictions.json; default uses the dataset poses")
    sp.add_argument("--reference", help="reference volume for PSNR")
    sp = sub.add_parser("drr-gen", parents=[common], help="render a DRR dataset")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--self-test", action="store_true", help="also check raw-mode linearity")
    sp = sub.add_parser("evaluate", parents=[common], help="summarise prediction errors")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--volume", help="reconstructed volume for PSNR")
    sp.add_argument("--reference", help="reference volume for PSNR")
    return p


def _setup_logging():
    level = os.environ.get("SVRKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads < 0:
        print("svrkit: --threads must be >= 0", file=sys.stderr)
        return 2
    args.threads = args.threads or os.cpu_count() or 1
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    except (ConfigError, OSError) as exc:
        print(f"svrkit: config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output_dir)
    started = time.time()
    try:
        result = COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError, ConfigMismatchError, CheckpointError) as exc:
        print(f"svrkit {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ReconstructionError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"svrkit {args.command}: {exc}", file=sys.stderr)
        return 1
    _json(out / "config.json", _config_echo(cfg))
    _json(out / "run_info.json", {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "seconds": round(time.time() - started, 3),
        "threads": args.threads,
        "python": platform.python_version(),
        "svrkit": __version__,
    })
    print(json.dumps({"command": args.command, "out": str(out), **(result or {})}, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
