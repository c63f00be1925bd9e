"""Digitally reconstructed radiographs by incremental Siddon-Jacobs ray tracing."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .geometry import RigidPose, anchors_from_pose, euler_matrix, pose_error_decomposed
from .sampling import MANIFEST_SCHEMA, write_image
from .volume import Volume3D

__all__ = [
    "ProjectionGeometry",
    "cast_ray",
    "render_drr",
    "fit_pitch",
    "sample_halfsphere_poses",
    "drr_pose_error",
    "box_chord_length",
    "render_many",
    "save_drr_dataset",
]

DEFAULT_DISTANCES_MM = (800.0, 600.0, 400.0)


@dataclass(frozen=True, eq=False)
class ProjectionGeometry:
    """Point source at ``R @ (0, 0, distance)``; flat detector through the isocentre.

    Detector pixel ``(u, w)`` sits at ``R @ ((u - c) * pitch, (w - c) * pitch, 0)``.
    """

    distance: float
    detector_size: int = 128
    pitch: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    angles_deg: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("source distance must be positive")
        if self.pitch <= 0:
            raise ValueError("detector pitch must be positive")
        if self.detector_size < 1:
            raise ValueError("detector size must be >= 1")
        R = RigidPose(self.rotation).rotation
        object.__setattr__(self, "rotation", R)

    @property
    def pose(self) -> RigidPose:
        return RigidPose(self.rotation, self.source)

    @property
    def source(self) -> np.ndarray:
        return self.rotation @ np.array([0.0, 0.0, self.distance])

    def pixel_centres(self) -> np.ndarray:
        n = self.detector_size
        ax = (np.arange(n) - 0.5 * (n - 1)) * self.pitch
        w, u = np.meshgrid(ax, ax, indexing="ij")
        local = np.stack([u, w, np.zeros_like(u)], axis=-1)
        return local @ self.rotation.T

    def to_json(self) -> dict:
        return {
            "distance_mm": self.distance,
            "detector_size": self.detector_size,
            "pitch_mm": self.pitch,
            "angles_deg": [float(a) for a in self.angles_deg],
            "pose": self.pose.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProjectionGeometry":
        R = np.array(d["pose"]["R"], dtype=np.float64).reshape(3, 3)
        return cls(d["distance_mm"], d["detector_size"], d["pitch_mm"], R, tuple(d.get("angles_deg", (0, 0, 0))))


@numba.njit(cache=True, nogil=True)
def _siddon(data, spacing, origin, direction):
    n = data.shape[0]
    lo = -0.5 * n * spacing
    hi = 0.5 * n * spacing
    amin = 0.0
    amax = np.inf
    for a in range(3):
        d = direction[a]
        o = origin[a]
        if d == 0.0:
            if o < lo or o > hi:
                return 0.0
        else:
            t0 = (lo - o) / d
            t1 = (hi - o) / d
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > amin:
                amin = t0
            if t1 < amax:
                amax = t1
    if not amax > amin:
        return 0.0
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    nxt = np.empty(3)
    for a in range(3):
        d = direction[a]
        # locate the first voxel from the midpoint of the entry segment side
        p = origin[a] + amin * d
        k = int(math.floor((p - lo) / spacing))
        if d < 0.0 and (p - lo) / spacing == k:
            k -= 1
        if k < 0:
            k = 0
        if k > n - 1:
            k = n - 1
        idx[a] = k
        if d > 0.0:
            step[a] = 1
            nxt[a] = (lo + (k + 1) * spacing - origin[a]) / d
        elif d < 0.0:
            step[a] = -1
            nxt[a] = (lo + k * spacing - origin[a]) / d
        else:
            step[a] = 0
            nxt[a] = np.inf
    total = 0.0
    ac = amin
    while ac < amax:
        a = 0
        if nxt[1] < nxt[a]:
            a = 1
        if nxt[2] < nxt[a]:
            a = 2
        an = nxt[a]
        if an > amax:
            an = amax
        if an > ac:
            # data is indexed [z, y, x]
            total += (an - ac) * data[idx[2], idx[1], idx[0]]
            ac = an
        idx[a] += step[a]
        if idx[a] < 0 or idx[a] >= n:
            break
        plane = idx[a] + 1 if step[a] > 0 else idx[a]
        nxt[a] = (lo + plane * spacing - origin[a]) / direction[a]
    return total


@numba.njit(cache=True, nogil=True)
def _render(data, spacing, source, targets, out):
    m = targets.shape[0]
    d = np.empty(3)
    for i in range(m):
        norm = 0.0
        for a in range(3):
            d[a] = targets[i, a] - source[a]
            norm += d[a] * d[a]
        norm = math.sqrt(norm)
        for a in range(3):
            d[a] /= norm
        out[i] = _siddon(data, spacing, source, d)


def cast_ray(v: Volume3D, origin, direction) -> float:
    """Radiological path integral along the ray ``origin + s * direction``, s >= 0."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise ValueError("ray direction must be non-zero")
    data = np.ascontiguousarray(v.data, dtype=np.float64)
    return float(_siddon(data, v.spacing, np.asarray(origin, dtype=np.float64), d / norm))


def box_chord_length(half: float, origin, direction) -> float:
    """Length of the intersection of a ray with the cube ``[-half, half]^3`` (slab method)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    t_lo, t_hi = 0.0, math.inf
    for a in range(3):
        if d[a] == 0.0:
            if abs(o[a]) > half:
                return 0.0
            continue
        t0, t1 = sorted(((-half - o[a]) / d[a], (half - o[a]) / d[a]))
        t_lo, t_hi = max(t_lo, t0), min(t_hi, t1)
    return max(0.0, t_hi - t_lo)


def render_drr(v: Volume3D, g: ProjectionGeometry, mode: str = "raw", mu: float = 0.02) -> np.ndarray:
    """One ray per detector pixel.  ``mode='exp'`` returns ``exp(-mu * integral)``."""
    if mode not in ("raw", "exp"):
        raise ValueError("mode must be 'raw' or 'exp'")
    if g.distance <= math.sqrt(3.0) * v.half_extent:
        raise ValueError("source lies inside the volume's bounding sphere")
    data = np.ascontiguousarray(v.data, dtype=np.float64)
    targets = g.pixel_centres().reshape(-1, 3)
    out = np.empty(targets.shape[0])
    _render(data, v.spacing, g.source, targets, out)
    img = out.reshape(g.detector_size, g.detector_size)
    return np.exp(-mu * img) if mode == "exp" else img


def render_many(v: Volume3D, geometries, mode: str = "raw", mu: float = 0.02, threads: int = 1):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda g: render_drr(v, g, mode, mu), geometries))
    return [render_drr(v, g, mode, mu) for g in geometries]


def fit_pitch(v: Volume3D, detector_size: int = 128, distance: float = 400.0, margin: float = 1.05) -> float:
    """Detector pitch such that the volume's bounding sphere projects inside the detector."""
    r = math.sqrt(3.0) * v.half_extent
    if distance <= r:
        raise ValueError("distance must exceed the volume half-diagonal")
    projected = r * distance / math.sqrt(distance * distance - r * r)
    return 2.0 * projected * margin / detector_size


def sample_halfsphere_poses(
    distances,
    bound_deg: float = 90.0,
    step_deg: float | None = None,
    count: int | None = None,
    seed: int = 0,
    detector_size: int = 128,
    pitch: float = 1.0,
) -> list[ProjectionGeometry]:
    """Grid (``step_deg``) or uniform random (``count`` per distance) source poses.

    Angles rotate about the x, y and z axes within ``[-bound_deg, bound_deg]``.
    """
    distances = list(distances)
    if not distances:
        raise ValueError("at least one distance is required")
    if (step_deg is None) == (count is None):
        raise ValueError("give exactly one of step_deg or count")
    out = []
    if step_deg is not None:
        ticks = np.arange(-bound_deg, bound_deg + 0.5 * step_deg, step_deg)
        ticks = ticks[ticks <= bound_deg + 1e-9]
        for dist in distances:
            for ax in ticks:
                for ay in ticks:
                    for az in ticks:
                        angles = (float(ax), float(ay), float(az))
                        R = euler_matrix(*np.radians(angles))
                        out.append(ProjectionGeometry(dist, detector_size, pitch, R, angles))
    else:
        rng = np.random.default_rng(seed)
        for dist in distances:
            for angles in rng.uniform(-bound_deg, bound_deg, size=(count, 3)):
                angles = tuple(float(a) for a in angles)
                R = euler_matrix(*np.radians(angles))
                out.append(ProjectionGeometry(dist, detector_size, pitch, R, angles))
    return out


def drr_pose_error(gt: ProjectionGeometry, pred: ProjectionGeometry) -> tuple[float, float]:
    return pose_error_decomposed(gt.pose, pred.pose)


def save_drr_dataset(out_dir, images, geometries, config: dict, source_id: str = "volume", scale: float = 1.0):
    """Write DRRs in the slice-dataset manifest format, geometry JSON in place of the slice pose.

    Each record also carries the assembly pose and its anchor triplet (detector
    extent as side length) so DRR sets train the same regressor.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, g) in enumerate(zip(images, geometries)):
        fname = f"images/drr_{i:06d}.raw"
        write_image(out / fname, np.asarray(img) * scale)
        records.append({
            "id": i,
            "file": fname,
            "size": g.detector_size,
            "pixel_spacing_mm": g.pitch,
            "source_id": source_id,
            "geometry": g.to_json(),
            "pose": g.pose.to_json(),
            "anchors": anchors_from_pose(g.pose, g.detector_size * g.pitch).to_json(),
        })
    doc = {
        "schema": MANIFEST_SCHEMA,
        "kind": "drr",
        "source_id": source_id,
        "config": config,
        "counts": {"generated": len(records), "kept": len(records), "pruned": 0},
        "intensity_scale": scale,
        "samples": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path
