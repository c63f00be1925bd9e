"""Canonical cubic volumes, trilinear sampling, phantoms and the svrvol file format.

Arrays are stored ``data[z, y, x]`` (row-major, z slowest).  The world
coordinate of voxel index ``(i, j, k)`` (x, y, z) is
``((i, j, k) - (L - 1) / 2) * spacing`` so every grid is centred on the origin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume3D",
    "PhantomSpec",
    "resample_to_atlas",
    "normalize_intensity",
    "sample_trilinear",
    "sample_points",
    "generate_phantom",
    "save_svrvol",
    "load_svrvol",
    "rotate_volume",
]

PHANTOM_KINDS = ("nested-ellipsoids", "asymmetric-blobs")


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Cubic scalar field of side ``L`` voxels centred on the origin."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or len(set(data.shape)) != 1:
            raise ValueError(f"volume must be cubic, got shape {data.shape}")
        if data.size == 0:
            raise ValueError("empty volume")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def L(self) -> int:
        return self.data.shape[0]

    @property
    def origin(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def half_extent(self) -> float:
        """Half side length of the voxel-boundary bounding box in mm."""
        return 0.5 * self.L * self.spacing

    def world_to_index(self, points) -> np.ndarray:
        """Map world points (..., 3) in (x, y, z) order to continuous voxel indices."""
        return np.asarray(points, dtype=np.float64) / self.spacing + 0.5 * (self.L - 1)

    def index_to_world(self, idx) -> np.ndarray:
        return (np.asarray(idx, dtype=np.float64) - 0.5 * (self.L - 1)) * self.spacing

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centres, shape (L, L, L, 3) in (x, y, z)."""
        ax = self.index_to_world(np.arange(self.L))
        z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([x, y, z], axis=-1)

    def with_data(self, data) -> "Volume3D":
        return Volume3D(np.asarray(data), self.spacing)


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "nested-ellipsoids"
    seed: int = 0
    count: int = 3
    contrast: tuple = (0.25, 1.0)

    def validate(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; expected one of {PHANTOM_KINDS}")
        if self.count < 1:
            raise ValueError("phantom count must be >= 1")
        lo, hi = self.contrast
        if not 0.0 < lo < hi <= 1.0:
            raise ValueError("contrast range must satisfy 0 < lo < hi <= 1")


def sample_points(data: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``data[z, y, x]`` at continuous (x, y, z) indices.

    Points outside the convex hull of voxel centres return 0.
    """
    idx = np.asarray(idx, dtype=np.float64)
    shape = idx.shape[:-1]
    flat = idx.reshape(-1, 3)
    n = np.array(data.shape[::-1], dtype=np.float64) - 1.0
    inside = np.all((flat >= 0.0) & (flat <= n), axis=1)
    out = np.zeros(flat.shape[0])
    if inside.any():
        coords = flat[inside][:, ::-1].T
        # inside the hull 'nearest' never triggers, so this is plain trilinear
        out[inside] = ndimage.map_coordinates(
            np.asarray(data, dtype=np.float64), coords, order=1, mode="nearest", prefilter=False
        )
    return out.reshape(shape)


def sample_trilinear(v: Volume3D, p) -> float | np.ndarray:
    """Sample ``v`` at world point(s) ``p`` (mm); 0 outside the grid support."""
    p = np.asarray(p, dtype=np.float64)
    res = sample_points(v.data, v.world_to_index(p))
    return float(res) if p.ndim == 1 else res


def resample_to_atlas(data, L: int, spacing: float = 1.0, input_spacing: float = 1.0) -> Volume3D:
    """Resample an origin-centred grid of arbitrary dims into the cubic atlas space."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.size == 0:
        raise ValueError("input must be a non-empty 3D grid")
    if spacing <= 0 or input_spacing <= 0:
        raise ValueError("spacing must be positive")
    if L < 8:
        raise ValueError("L must be >= 8")
    if data.shape == (L, L, L) and spacing == input_spacing:
        return Volume3D(data.copy(), spacing)
    ax = (np.arange(L) - 0.5 * (L - 1)) * spacing
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    world = np.stack([x, y, z], axis=-1)
    centre = 0.5 * (np.array(data.shape[::-1], dtype=np.float64) - 1.0)
    out = sample_points(data, world / input_spacing + centre)
    return Volume3D(out, spacing)


def normalize_intensity(v: Volume3D) -> Volume3D:
    lo = v.data.min()
    hi = v.data.max()
    if hi == lo:
        return v.with_data(np.zeros_like(v.data, dtype=np.float64))
    return v.with_data((v.data.astype(np.float64) - lo) / (hi - lo))


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _ellipsoid_mask(world, centre, axes, rot):
    local = (world - centre) @ rot
    return np.sum((local / axes) ** 2, axis=-1) <= 1.0


def generate_phantom(spec: PhantomSpec, L: int, spacing: float = 1.0) -> Volume3D:
    """Deterministic asymmetric phantom with intensities in [0, 1].

    ``nested-ellipsoids`` paints ``count`` shrinking, off-centre ellipsoids with
    distinct plateau intensities.  ``asymmetric-blobs`` sums anisotropic
    Gaussian blobs inside an ellipsoidal envelope.
    """
    spec.validate()
    if L < 16:
        raise ValueError("phantom L must be >= 16")
    rng = np.random.default_rng(spec.seed)
    R = 0.5 * L * spacing
    vol = Volume3D(np.zeros((L, L, L), dtype=np.float32), spacing)
    world = vol.voxel_centers()
    lo, hi = spec.contrast

    if spec.kind == "nested-ellipsoids":
        levels = np.linspace(lo, hi, spec.count)
        levels = levels[rng.permutation(spec.count)]
        out = np.zeros((L, L, L))
        centre = rng.uniform(-0.04, 0.04, 3) * R
        axes = rng.uniform(0.72, 0.88, 3) * R
        rot = _random_rotation(rng)
        for k in range(spec.count):
            out[_ellipsoid_mask(world, centre, axes, rot)] = levels[k]
            # next ellipsoid: smaller, pushed off-centre, still inside this one
            shrink = rng.uniform(0.5, 0.7, 3)
            inner = axes * shrink
            slack = float(np.min(axes - inner))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            centre = centre + rot @ (direction * 0.6 * slack)
            axes = inner
        data = out
    else:
        env_axes = rng.uniform(0.7, 0.85, 3) * R
        env_rot = _random_rotation(rng)
        envelope = _ellipsoid_mask(world, np.zeros(3), env_axes, env_rot)
        data = np.zeros((L, L, L))
        for _ in range(spec.count):
            c = rng.uniform(-0.55, 0.55, 3) * R
            sig = rng.uniform(0.08, 0.25, 3) * R
            rot = _random_rotation(rng)
            amp = rng.uniform(lo, hi)
            local = (world - c) @ rot
            data += amp * np.exp(-0.5 * np.sum((local / sig) ** 2, axis=-1))
        data = np.where(envelope, 0.15 * hi + data, 0.0)
        data /= data.max()
    return Volume3D(np.clip(data, 0.0, 1.0).astype(np.float32), spacing)


def rotate_volume(v: Volume3D, rotation) -> Volume3D:
    """Resample ``v`` under a rotation about the origin (out-of-support -> 0)."""
    rot = np.asarray(rotation, dtype=np.float64)
    world = v.voxel_centers()
    # value at x of the rotated volume equals the original at R^T x
    src = world @ rot
    return v.with_data(sample_points(v.data, v.world_to_index(src)))


def _svrvol_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_svrvol(v: Volume3D, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` sidecar and ``<path>.raw`` little-endian f32 payload."""
    meta_path, raw_path = _svrvol_paths(path)
    meta = {
        "L": v.L,
        "spacing_mm": v.spacing,
        "dtype": "f32",
        "order": "row-major zyx",
        "endianness": "little",
    }
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    return meta_path, raw_path


def load_svrvol(path) -> Volume3D:
    meta_path, raw_path = _svrvol_paths(path)
    meta = json.loads(meta_path.read_text())
    if meta.get("dtype") != "f32" or meta.get("endianness") != "little":
        raise ValueError(f"unsupported svrvol encoding in {meta_path}")
    L = int(meta["L"])
    raw = raw_path.read_bytes()
    if len(raw) != 4 * L ** 3:
        raise ValueError(f"{raw_path}: expected {4 * L ** 3} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(L, L, L).astype(np.float32)
    return Volume3D(data, float(meta["spacing_mm"]))
