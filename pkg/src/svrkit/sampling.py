"""Fibonacci plane stacks, oblique slice extraction, variance pruning and datasets."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    AnchorTriplet,
    EulerPose,
    QuaternionPose,
    RigidPose,
    anchors_from_pose,
    axis_angle_matrix,
    rotation_to_euler,
    rotation_to_quat,
    shortest_arc,
)
from .volume import Volume3D, sample_points

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "svrkit.dataset/1"
GOLDEN_RATIO = (math.sqrt(5.0) + 1.0) / 2.0


@dataclass(frozen=True)
class SamplingConfig:
    n_normals: int = 20
    plane_count: int = 8
    plane_spacing: float = 4.0
    slice_size: int | None = None  # None -> volume side L
    prune_K: float = 0.2
    hemisphere_only: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_normals < 1:
            raise ValueError("n_normals must be >= 1")
        if self.plane_count < 1:
            raise ValueError("plane_count must be >= 1")
        if not 0.0 <= self.prune_K <= 1.0:
            raise ValueError("prune_K must lie in [0, 1]")
        if self.plane_spacing <= 0:
            raise ValueError("plane_spacing must be positive")
        if self.slice_size is not None and self.slice_size < 1:
            raise ValueError("slice_size must be >= 1")


@dataclass(eq=False)
class SliceSample:
    image: np.ndarray
    pose: RigidPose
    anchors: AnchorTriplet
    euler: EulerPose
    quat: QuaternionPose
    source_id: str = ""
    normal_index: int = -1
    plane_index: int = -1
    variance: float = 0.0
    pixel_spacing: float = 1.0
    # pose before motion corruption; None when the recorded pose is the truth
    ground_truth: RigidPose | None = None

    @property
    def true_pose(self) -> RigidPose:
        return self.ground_truth if self.ground_truth is not None else self.pose

    @property
    def extent_mm(self) -> float:
        return self.image.shape[0] * self.pixel_spacing


def make_sample(image, pose: RigidPose, pixel_spacing: float = 1.0, **meta) -> SliceSample:
    """Attach all three label encodings of ``pose`` to an image."""
    image = np.asarray(image)
    extent = image.shape[0] * pixel_spacing
    return SliceSample(
        image=image,
        pose=pose,
        anchors=anchors_from_pose(pose, extent),
        euler=rotation_to_euler(pose.rotation, pose.translation),
        quat=QuaternionPose(rotation_to_quat(pose.rotation), pose.translation),
        variance=float(np.var(image)),
        pixel_spacing=pixel_spacing,
        **meta,
    )


def fibonacci_normals(n: int, hemisphere_only: bool = True) -> np.ndarray:
    """Fibonacci lattice on the unit sphere, shape (n, 3).

    With ``hemisphere_only`` a 2n-point lattice is built and its z > 0 half kept,
    which preserves the lattice spacing on that half.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    m = 2 * n if hemisphere_only else n
    i = np.arange(m)
    z = 1.0 - (2.0 * i + 1.0) / m
    phi = 2.0 * np.pi * i / GOLDEN_RATIO
    theta = np.arccos(z)
    pts = np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    if hemisphere_only:
        pts = pts[z > 0]
    return pts


def plane_offsets(plane_count: int, plane_spacing: float) -> np.ndarray:
    return (np.arange(plane_count) - 0.5 * (plane_count - 1)) * plane_spacing


def build_stack(normal, cfg: SamplingConfig) -> list[RigidPose]:
    R = shortest_arc(normal)
    return [RigidPose.in_stack(R, z) for z in plane_offsets(cfg.plane_count, cfg.plane_spacing)]


def slice_points(pose: RigidPose, size: int, pixel_spacing: float) -> np.ndarray:
    """World coordinates of slice pixel centres, shape (size, size, 3), indexed [w, u]."""
    ax = (np.arange(size) - 0.5 * (size - 1)) * pixel_spacing
    w, u = np.meshgrid(ax, ax, indexing="ij")
    local = np.stack([u, w, np.zeros_like(u)], axis=-1)
    return local @ pose.rotation.T + pose.translation


def extract_slice(v: Volume3D, pose: RigidPose, size: int, pixel_spacing: float = 1.0) -> np.ndarray:
    """Trilinear oblique slice; ``image[w, u]`` samples ``t + R @ (u', w', 0)``."""
    if size < 1:
        raise ValueError("size must be >= 1")
    return sample_points(v.data, v.world_to_index(slice_points(pose, size, pixel_spacing)))


def prune_by_variance(samples: list[SliceSample], K: float):
    """Split samples into (kept, pruned, threshold) with threshold ``K * max variance``."""
    if not samples:
        raise ValueError("cannot prune an empty sample list")
    t = K * max(s.variance for s in samples)
    kept = [s for s in samples if not s.variance < t]
    pruned = [s for s in samples if s.variance < t]
    return kept, pruned, t


@dataclass
class DatasetManifest:
    config: dict
    generated: int
    kept: int
    pruned: int
    threshold: float
    max_variance: float
    source_id: str = ""
    extra: dict = field(default_factory=dict)


def generate_dataset(v: Volume3D, cfg: SamplingConfig, source_id: str = "volume", threads: int = 1):
    """Slice ``v`` along every Fibonacci stack and prune low-variance slices.

    Returns ``(samples, manifest)``; samples are ordered by (normal, plane).
    """
    size = cfg.slice_size or v.L
    normals = fibonacci_normals(cfg.n_normals, cfg.hemisphere_only)
    jobs = []
    for ni, n in enumerate(normals):
        for pi, pose in enumerate(build_stack(n, cfg)):
            jobs.append((ni, pi, pose))

    def work(job):
        ni, pi, pose = job
        img = extract_slice(v, pose, size, v.spacing)
        return make_sample(img, pose, v.spacing, source_id=source_id, normal_index=ni, plane_index=pi)

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            samples = list(ex.map(work, jobs))
    else:
        samples = [work(j) for j in jobs]
    kept, pruned, t = prune_by_variance(samples, cfg.prune_K)
    log.info("generated %d slices, kept %d (threshold %.6g)", len(samples), len(kept), t)
    manifest = DatasetManifest(
        config=asdict(cfg),
        generated=len(samples),
        kept=len(kept),
        pruned=len(pruned),
        threshold=float(t),
        max_variance=float(max(s.variance for s in samples)),
        source_id=source_id,
    )
    return kept, manifest


def corrupt_motion(
    samples: list[SliceSample], max_rot_deg: float, max_trans_mm: float, seed: int = 0, antithetic: bool = False
):
    """Perturb each recorded pose about its plane centre; images are untouched.

    With ``antithetic`` every odd slice receives the inverse of the previous
    slice's perturbation, so the slices carry no net rigid motion.
    """
    if max_rot_deg < 0 or max_trans_mm < 0:
        raise ValueError("motion bounds must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    dR = shift = None
    for k, s in enumerate(samples):
        axis = rng.normal(size=3)
        angle = math.radians(rng.uniform(0.0, max_rot_deg))
        draw = rng.uniform(-max_trans_mm, max_trans_mm, size=3)
        if max_rot_deg == 0 and max_trans_mm == 0:
            out.append(replace(s, ground_truth=s.true_pose))
            continue
        if antithetic and k % 2 == 1:
            dR, shift = dR.T, -shift
        else:
            dR, shift = axis_angle_matrix(axis, angle), draw
        pose = RigidPose(dR @ s.pose.rotation, s.pose.translation + shift)
        fresh = make_sample(
            s.image, pose, s.pixel_spacing,
            source_id=s.source_id, normal_index=s.normal_index, plane_index=s.plane_index,
        )
        out.append(replace(fresh, ground_truth=s.true_pose))
    return out


def _sample_record(i: int, s: SliceSample, fname: str) -> dict:
    rec = {
        "id": i,
        "file": fname,
        "size": int(s.image.shape[0]),
        "pixel_spacing_mm": s.pixel_spacing,
        "source_id": s.source_id,
        "normal_index": s.normal_index,
        "plane_index": s.plane_index,
        "variance": s.variance,
        "pose": s.pose.to_json(),
        "anchors": s.anchors.to_json(),
        "euler": [s.euler.rx, s.euler.ry, s.euler.rz, s.euler.tx, s.euler.ty, s.euler.tz],
        "quat": [float(x) for x in s.quat.q] + [float(x) for x in s.quat.t],
    }
    if s.ground_truth is not None:
        rec["ground_truth"] = s.ground_truth.to_json()
        rec["ground_truth_anchors"] = anchors_from_pose(s.ground_truth, s.extent_mm).to_json()
    return rec


def write_image(path: Path, image: np.ndarray):
    path.write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path: Path, size: int) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(size, size).astype(np.float32)


def save_dataset(out_dir, samples: list[SliceSample], manifest: DatasetManifest) -> Path:
    """Write ``manifest.json`` plus one raw f32 image per sample."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        fname = f"images/slice_{i:06d}.raw"
        write_image(out / fname, s.image)
        records.append(_sample_record(i, s, fname))
    doc = {
        "schema": MANIFEST_SCHEMA,
        "kind": "slices",
        "source_id": manifest.source_id,
        "config": manifest.config,
        "counts": {"generated": manifest.generated, "kept": manifest.kept, "pruned": manifest.pruned},
        "threshold": manifest.threshold,
        "max_variance": manifest.max_variance,
        **manifest.extra,
        "samples": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_manifest(dataset_dir) -> dict:
    doc = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {doc.get('schema')!r}")
    return doc


def load_dataset(dataset_dir) -> list[SliceSample]:
    """Read back a slice dataset.  Unlabelled records (no ``pose``) get identity poses."""
    root = Path(dataset_dir)
    doc = load_manifest(root)
    samples = []
    for rec in doc["samples"]:
        img = read_image(root / rec["file"], rec["size"])
        pose = RigidPose.from_json(rec["pose"]) if "pose" in rec else RigidPose()
        s = make_sample(
            img, pose, rec.get("pixel_spacing_mm", 1.0),
            source_id=rec.get("source_id", ""),
            normal_index=rec.get("normal_index", -1),
            plane_index=rec.get("plane_index", -1),
        )
        if "ground_truth" in rec:
            s.ground_truth = RigidPose.from_json(rec["ground_truth"])
        samples.append(s)
    return samples
