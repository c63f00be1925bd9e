"""Motion-compensated slice-to-volume reconstruction.

The volume is initialised by scattering posed slice pixels through an
anisotropic Gaussian PSF; every included slice is then re-registered to the
current estimate (NCC cost, finite-difference gradient ascent over a
three-level Gaussian pyramid) and slices that no longer agree with the
volume are dropped.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .geometry import RigidPose, euler_matrix
from .sampling import slice_points
from .volume import Volume3D, sample_points

log = logging.getLogger(__name__)

FWHM = 2.355
PSNR_INF = float("inf")


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    output_L: int = 64
    output_spacing: float = 1.0
    psf_sigma: float | None = None  # in-plane, mm; None -> pixel spacing / 2.355
    slice_thickness: float = 4.0  # through-plane sigma = thickness / 2.355
    svr_iterations: int = 4
    pyramid_levels: int = 3
    gd_step: float = 2.0  # initial step in deg / mm at full resolution
    gd_max_iters: int = 60
    fd_step: float = 0.5  # finite-difference step in deg / mm at full resolution
    robust_ncc_threshold: float = 0.5
    regularization_lambda: float = 0.0
    readmit: bool = False
    gauge_fix: bool = True
    translation_warmup: int = 2  # leading SVR iterations that refine translation only

    def __post_init__(self):
        if self.output_L < 1 or self.output_spacing <= 0:
            raise ValueError("output grid must be positive")
        if self.psf_sigma is not None and self.psf_sigma <= 0:
            raise ValueError("psf_sigma must be positive")
        if self.slice_thickness <= 0 or self.gd_step <= 0 or self.fd_step <= 0:
            raise ValueError("slice_thickness, gd_step and fd_step must be positive")
        if self.svr_iterations < 0 or self.gd_max_iters < 0 or self.translation_warmup < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.pyramid_levels != 3:
            raise ValueError("pyramid_levels is fixed at 3")
        if not -1.0 <= self.robust_ncc_threshold <= 1.0:
            raise ValueError("robust_ncc_threshold must lie in [-1, 1]")
        if self.regularization_lambda < 0:
            raise ValueError("regularization_lambda must be non-negative")

    def sigmas(self, pixel_spacing: float) -> np.ndarray:
        inplane = self.psf_sigma if self.psf_sigma is not None else pixel_spacing / FWHM
        return np.array([inplane, inplane, self.slice_thickness / FWHM])


@dataclass
class RegistrationResult:
    pose: RigidPose
    ncc_initial: float
    ncc_final: float
    degenerate: bool = False


@dataclass
class ReconState:
    volume: Volume3D
    poses: list
    weights: np.ndarray
    ncc: np.ndarray
    log: list = field(default_factory=list)

    def report(self, config: ReconConfig | None = None) -> dict:
        out = {"iterations": self.log}
        if config is not None:
            out["config"] = asdict(config)
        return out


# --------------------------------------------------------------------------
# PSF splatting


@numba.njit(cache=True, nogil=True)
def _splat_slice(num, den, spacing, points, values, R, sig):
    L = num.shape[0]
    c = 0.5 * (L - 1)
    ext = np.empty(3)
    for a in range(3):
        s = 0.0
        for k in range(3):
            s += (R[a, k] * sig[k]) ** 2
        ext[a] = 3.0 * math.sqrt(s) / spacing
    inv = np.empty(3)
    for k in range(3):
        inv[k] = 1.0 / sig[k]
    for p in range(points.shape[0]):
        val = values[p]
        ix = points[p, 0] / spacing + c
        iy = points[p, 1] / spacing + c
        iz = points[p, 2] / spacing + c
        x0 = max(0, int(math.ceil(ix - ext[0])))
        x1 = min(L - 1, int(math.floor(ix + ext[0])))
        y0 = max(0, int(math.ceil(iy - ext[1])))
        y1 = min(L - 1, int(math.floor(iy + ext[1])))
        z0 = max(0, int(math.ceil(iz - ext[2])))
        z1 = min(L - 1, int(math.floor(iz + ext[2])))
        for z in range(z0, z1 + 1):
            dz = (z - iz) * spacing
            for y in range(y0, y1 + 1):
                dy = (y - iy) * spacing
                for x in range(x0, x1 + 1):
                    dx = (x - ix) * spacing
                    m = 0.0
                    for k in range(3):
                        loc = (R[0, k] * dx + R[1, k] * dy + R[2, k] * dz) * inv[k]
                        m += loc * loc
                    if m <= 9.0:
                        w = math.exp(-0.5 * m)
                        num[z, y, x] += w * val
                        den[z, y, x] += w


def _fill_uncovered(vol: np.ndarray, covered: np.ndarray, lam: float) -> np.ndarray:
    """Blend uncovered voxels towards the mean of their covered 6-neighbours."""
    if lam == 0.0:
        return vol
    acc = np.zeros_like(vol)
    cnt = np.zeros_like(vol)
    cov = covered.astype(np.float64)
    masked = np.where(covered, vol, 0.0)
    for axis in range(3):
        for shift in (-1, 1):
            acc += _shift(masked, shift, axis)
            cnt += _shift(cov, shift, axis)
    fill = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return np.where(covered, vol, lam * fill)


def _shift(a, shift, axis):
    out = np.zeros_like(a)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if shift > 0:
        src[axis], dst[axis] = slice(0, -shift), slice(shift, None)
    else:
        src[axis], dst[axis] = slice(-shift, None), slice(0, shift)
    out[tuple(dst)] = a[tuple(src)]
    return out


def splat_accumulate(slices, cfg: ReconConfig, pixel_spacing: float = 1.0, num=None, den=None):
    """PSF-weighted sums ``(sum w*v, sum w)`` of ``(image, pose)`` pairs, in slice order."""
    L = cfg.output_L
    num = np.zeros((L, L, L)) if num is None else num
    den = np.zeros((L, L, L)) if den is None else den
    sig = cfg.sigmas(pixel_spacing)
    for image, pose in slices:
        image = np.asarray(image, dtype=np.float64)
        pts = slice_points(pose, image.shape[0], pixel_spacing).reshape(-1, 3)
        _splat_slice(num, den, cfg.output_spacing, pts, image.ravel(), pose.rotation, sig)
    return num, den


def splat_reconstruct(slices, cfg: ReconConfig, weights=None, pixel_spacing: float = 1.0) -> Volume3D:
    """Normalised PSF scatter of ``(image, pose)`` pairs into the output grid.

    Voxels never reached by a PSF stay 0 unless ``regularization_lambda`` > 0.
    """
    slices = list(slices)
    if weights is None:
        weights = np.ones(len(slices))
    included = [s for s, w in zip(slices, weights) if w > 0]
    if not included:
        raise ReconstructionError("no included slices to reconstruct from")
    num, den = splat_accumulate(included, cfg, pixel_spacing)
    return _normalise(num, den, cfg)


def _normalise(num, den, cfg: ReconConfig) -> Volume3D:
    covered = den > 0
    vol = np.divide(num, den, out=np.zeros_like(num), where=covered)
    vol = _fill_uncovered(vol, covered, cfg.regularization_lambda)
    return Volume3D(vol, cfg.output_spacing)


# --------------------------------------------------------------------------
# similarity and quality metrics


def ncc_flagged(a, b, mask=None) -> tuple[float, bool]:
    """NCC over ``mask`` (default all samples) and whether it was degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        a = a[mask]
        b = b[mask]
    if a.size < 2:
        return 0.0, True
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a.ravel() @ a.ravel()) * float(b.ravel() @ b.ravel()))
    if den <= 1e-12 * max(a.size, 1):
        return 0.0, True
    return float(np.clip((a.ravel() @ b.ravel()) / den, -1.0, 1.0)), False


def ncc(a, b, mask=None) -> float:
    return ncc_flagged(a, b, mask)[0]


def psnr(recon: Volume3D, reference: Volume3D) -> float:
    """``10 log10(MAX^2 / MSE)`` with MAX the reference maximum; +inf when identical."""
    a = np.asarray(recon.data if isinstance(recon, Volume3D) else recon, dtype=np.float64)
    b = np.asarray(reference.data if isinstance(reference, Volume3D) else reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr needs volumes of equal dimensions")
    if b.max() == b.min():
        raise ValueError("psnr reference must not be constant")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(float(b.max()) ** 2 / mse)


# --------------------------------------------------------------------------
# registration


def _downsample_volume(v: Volume3D) -> Volume3D:
    blurred = ndimage.gaussian_filter(np.asarray(v.data, dtype=np.float64), 1.0, mode="constant")
    return _resample_half(blurred, v.spacing)


def _downsample_image(img: np.ndarray) -> np.ndarray:
    blurred = ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), 1.0, mode="constant")
    n = img.shape[0]
    m = (n + 1) // 2
    ax = 2.0 * (np.arange(m) - 0.5 * (m - 1)) + 0.5 * (n - 1)
    w, u = np.meshgrid(ax, ax, indexing="ij")
    return ndimage.map_coordinates(blurred, [w, u], order=1, mode="nearest", prefilter=False)


def build_pyramid(v: Volume3D, levels: int = 3) -> list[Volume3D]:
    """Finest first.  Every level stays centred on the origin."""
    out = [Volume3D(np.asarray(v.data, dtype=np.float64), v.spacing)]
    for _ in range(levels - 1):
        out.append(_downsample_volume(out[-1]))
    return out


def masked_pyramid(num: np.ndarray, den: np.ndarray, spacing: float, levels: int = 3, eps: float = 1e-3):
    """Pyramid of ``(volume, coverage)`` pairs from PSF sums, finest first.

    Coverage is 1 where ``den > eps``.  Blurring uses normalised convolution so
    uncovered voxels never leak zeros into covered ones; registration ignores
    samples whose interpolated coverage is below 0.5.
    """
    cov = (den > eps).astype(np.float64)
    vol = np.divide(num, den, out=np.zeros_like(num), where=cov > 0)
    vol = _fill_holes(vol, cov)
    out = [(Volume3D(vol, spacing), cov)]
    for _ in range(levels - 1):
        v, c = out[-1]
        wv = ndimage.gaussian_filter(v.data * c, 1.0, mode="constant")
        wc = ndimage.gaussian_filter(c, 1.0, mode="constant")
        blurred = np.divide(wv, wc, out=np.zeros_like(wv), where=wc > 1e-6)
        out.append((_resample_half(blurred, v.spacing), _resample_half(wc, v.spacing).data))
    return out


def _fill_holes(vol, cov):
    # uncovered voxels take the normalised-convolution estimate of their neighbourhood
    wv = ndimage.gaussian_filter(vol * cov, 1.0, mode="constant")
    wc = ndimage.gaussian_filter(cov, 1.0, mode="constant")
    fill = np.divide(wv, wc, out=np.zeros_like(wv), where=wc > 1e-6)
    return np.where(cov > 0, vol, fill)


def _resample_half(data, spacing) -> Volume3D:
    n = data.shape[0]
    m = (n + 1) // 2
    ax = 2.0 * (np.arange(m) - 0.5 * (m - 1)) + 0.5 * (n - 1)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    return Volume3D(sample_points(data, np.stack([x, y, z], axis=-1)), 2.0 * spacing)


def image_pyramid(img: np.ndarray, levels: int = 3) -> list[np.ndarray]:
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(_downsample_image(out[-1]))
    return out


_NO_COVERAGE = np.ones((1, 1, 1))


@numba.njit(cache=True, nogil=True)
def _slice_ncc_kernel(data, cov, spacing, R, t, image, pixel_spacing):
    # fused reslice + masked NCC; mask = pixels whose sample lies inside the grid hull
    # and, when cov matches data, whose interpolated coverage is >= 0.5
    L = data.shape[0]
    use_cov = cov.shape[0] == L
    c = 0.5 * (L - 1)
    n = image.shape[0]
    h = 0.5 * (n - 1)
    sa = sb = saa = sbb = sab = 0.0
    cnt = 0
    for r in range(n):
        wl = (r - h) * pixel_spacing
        for q in range(n):
            ul = (q - h) * pixel_spacing
            x = (t[0] + R[0, 0] * ul + R[0, 1] * wl) / spacing + c
            y = (t[1] + R[1, 0] * ul + R[1, 1] * wl) / spacing + c
            z = (t[2] + R[2, 0] * ul + R[2, 1] * wl) / spacing + c
            if x < 0.0 or y < 0.0 or z < 0.0 or x > L - 1 or y > L - 1 or z > L - 1:
                continue
            x0 = min(int(x), L - 2)
            y0 = min(int(y), L - 2)
            z0 = min(int(z), L - 2)
            fx = x - x0
            fy = y - y0
            fz = z - z0
            if use_cov:
                k00 = cov[z0, y0, x0] * (1 - fx) + cov[z0, y0, x0 + 1] * fx
                k01 = cov[z0, y0 + 1, x0] * (1 - fx) + cov[z0, y0 + 1, x0 + 1] * fx
                k10 = cov[z0 + 1, y0, x0] * (1 - fx) + cov[z0 + 1, y0, x0 + 1] * fx
                k11 = cov[z0 + 1, y0 + 1, x0] * (1 - fx) + cov[z0 + 1, y0 + 1, x0 + 1] * fx
                if (k00 * (1 - fy) + k01 * fy) * (1 - fz) + (k10 * (1 - fy) + k11 * fy) * fz < 0.5:
                    continue
            c00 = data[z0, y0, x0] * (1 - fx) + data[z0, y0, x0 + 1] * fx
            c01 = data[z0, y0 + 1, x0] * (1 - fx) + data[z0, y0 + 1, x0 + 1] * fx
            c10 = data[z0 + 1, y0, x0] * (1 - fx) + data[z0 + 1, y0, x0 + 1] * fx
            c11 = data[z0 + 1, y0 + 1, x0] * (1 - fx) + data[z0 + 1, y0 + 1, x0 + 1] * fx
            b = (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz
            a = image[r, q]
            sa += a
            sb += b
            saa += a * a
            sbb += b * b
            sab += a * b
            cnt += 1
    if cnt < 2:
        return 0.0
    va = saa - sa * sa / cnt
    vb = sbb - sb * sb / cnt
    if va <= 0.0 or vb <= 0.0:
        return 0.0
    den = math.sqrt(va * vb)
    if den <= 1e-12 * cnt:
        return 0.0
    v = (sab - sa * sb / cnt) / den
    return min(1.0, max(-1.0, v))


def _slice_ncc(image, target: Volume3D, pose: RigidPose, pixel_spacing: float, coverage=None) -> float:
    cov = _NO_COVERAGE if coverage is None else coverage
    return _slice_ncc_kernel(target.data, cov, target.spacing, pose.rotation, pose.translation, image, pixel_spacing)


def slice_ncc_reference(image, target: Volume3D, pose: RigidPose, pixel_spacing: float = 1.0, coverage=None) -> float:
    """Unfused equivalent of the registration cost (reslice, mask, :func:`ncc`)."""
    idx = target.world_to_index(slice_points(pose, image.shape[0], pixel_spacing))
    mask = np.all((idx >= 0) & (idx <= target.L - 1), axis=-1)
    if coverage is not None:
        mask &= sample_points(coverage, idx) >= 0.5
    return ncc(image, sample_points(target.data, idx), mask)


def _pose_at(pose0: RigidPose, theta: np.ndarray) -> RigidPose:
    R = pose0.rotation @ euler_matrix(*np.radians(theta[:3]))
    return RigidPose(R, pose0.translation + theta[3:])


def _fd_gradient(score, theta, h):
    grad = np.empty(theta.size)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h
        grad[k] = (score(theta + e) - score(theta - e)) / (2.0 * h)
    return grad


def _ascend(score, theta, step, h, min_step, max_iters):
    """Gradient ascent with Polak-Ribiere directions and a backtracking step.

    Gradients are central differences with step ``h``; a failed line search
    first restarts along the plain gradient, then refines ``h`` (down to h/8).
    """
    current = score(theta)
    h_min = h / 8.0
    grad = _fd_gradient(score, theta, h)
    direction = grad
    for _ in range(max_iters):
        dn = float(np.linalg.norm(direction))
        accepted = False
        if dn > 0.0:
            s = step
            while s >= min_step:
                cand = theta + s * direction / dn
                c = score(cand)
                if c > current:
                    theta, current, accepted = cand, c, True
                    step = 1.5 * s
                    break
                s *= 0.5
        if not accepted:
            if direction is not grad:
                direction = grad
                continue
            if h / 2.0 < h_min:
                break
            h /= 2.0
            step = max(step, 4 * min_step)
            grad = _fd_gradient(score, theta, h)
            direction = grad
            continue
        new_grad = _fd_gradient(score, theta, h)
        beta = max(0.0, float(new_grad @ (new_grad - grad)) / max(float(grad @ grad), 1e-300))
        direction = new_grad + beta * direction
        grad = new_grad
    return theta, current


def _as_levels(target, levels):
    if isinstance(target, Volume3D):
        target = build_pyramid(target, levels)
    return [t if isinstance(t, tuple) else (t, None) for t in target]


def register_slice(
    image,
    pose0: RigidPose,
    target,
    cfg: ReconConfig,
    pixel_spacing: float = 1.0,
    translation_only: bool = False,
) -> RegistrationResult:
    """Maximise NCC between ``image`` and the target resliced at a rigid pose near ``pose0``.

    ``target`` is a volume, a prebuilt pyramid (finest first) or a
    :func:`masked_pyramid`.  The returned pose never has lower full-resolution
    NCC than ``pose0``.
    """
    image = np.asarray(image, dtype=np.float64)
    pyramid = _as_levels(target, cfg.pyramid_levels)
    if np.ptp(image) == 0.0:
        return RegistrationResult(pose0, 0.0, 0.0, degenerate=True)
    images = image_pyramid(image, len(pyramid))
    vol0, cov0 = pyramid[0]
    start = _slice_ncc(image, vol0, pose0, pixel_spacing, cov0)
    free = slice(3, 6) if translation_only else slice(0, 6)
    theta = np.zeros(6)
    for level in reversed(range(len(pyramid))):
        f = 2.0 ** level
        img_l = images[level]
        vol_l, cov_l = pyramid[level]
        ps = pixel_spacing * (image.shape[0] / img_l.shape[0])

        def score(sub):
            th = theta.copy()
            th[free] = sub
            return _slice_ncc(img_l, vol_l, _pose_at(pose0, th), ps, cov_l)

        sub, _ = _ascend(score, theta[free], cfg.gd_step * f, cfg.fd_step * f, 0.01 * f, cfg.gd_max_iters)
        theta[free] = sub
    pose = _pose_at(pose0, theta)
    final = _slice_ncc(image, vol0, pose, pixel_spacing, cov0)
    if not final >= start:
        return RegistrationResult(pose0, start, start)
    return RegistrationResult(pose, start, final)


# --------------------------------------------------------------------------
# robust statistics and the SVR loop


def slice_nccs(images, poses, volume: Volume3D, pixel_spacing: float = 1.0) -> np.ndarray:
    vol = Volume3D(np.asarray(volume.data, dtype=np.float64), volume.spacing)
    return np.array([_slice_ncc(np.asarray(im, dtype=np.float64), vol, p, pixel_spacing) for im, p in zip(images, poses)])


def robust_filter(state: ReconState, cfg: ReconConfig) -> ReconState:
    """Exclude slices whose NCC against the current volume is below the threshold."""
    keep = state.ncc >= cfg.robust_ncc_threshold
    if cfg.readmit:
        weights = keep.astype(np.int64)
    else:
        weights = np.where(keep, state.weights, 0).astype(np.int64)
    return ReconState(state.volume, state.poses, weights, state.ncc, state.log)


def gauge_fix(poses, reference_poses):
    """Undo the net rigid motion of ``poses`` relative to ``reference_poses``.

    Slice-to-slice consistency cannot observe a common rigid motion of every
    slice.  The global motion is estimated as the chordal mean of the per-slice
    rotation changes, and the translation that best explains the plane-centre
    displacements under that rotation; its inverse is applied to all poses.
    """
    dR = np.mean([p.rotation @ q.rotation.T for p, q in zip(poses, reference_poses)], axis=0)
    u, _, vt = np.linalg.svd(dR)
    G = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    t = np.mean([p.translation - G @ q.translation for p, q in zip(poses, reference_poses)], axis=0)
    return [RigidPose(G.T @ p.rotation, G.T @ (p.translation - t)) for p in poses]


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def svr_iterate(
    images,
    poses,
    cfg: ReconConfig,
    reference: Volume3D | None = None,
    pixel_spacing: float = 1.0,
    threads: int = 1,
    slice_ids=None,
    groups=None,
) -> ReconState:
    """Alternate PSF reconstruction, per-slice registration and robust exclusion.

    Each slice is registered to the reconstruction from the other included
    slices: its own ``groups`` entry (default: the slice alone) is left out so
    a slice is not attracted to its own footprint.  The first
    ``translation_warmup`` iterations refine translation only.  With
    ``gauge_fix`` the net rigid motion relative to the initial poses is removed
    after every iteration.  Logged NCC is the post-registration value.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    poses = list(poses)
    if len(images) != len(poses) or not images:
        raise ValueError("need one pose per slice and at least one slice")
    ids = list(range(len(images))) if slice_ids is None else list(slice_ids)
    groups = list(range(len(images))) if groups is None else list(groups)
    if len(groups) != len(images):
        raise ValueError("need one group label per slice")
    weights = np.ones(len(images), dtype=np.int64)
    volume = splat_reconstruct(zip(images, poses), cfg, weights, pixel_spacing)
    state = ReconState(volume, poses, weights, np.ones(len(images)), [])
    for it in range(cfg.svr_iterations):
        active = [i for i in range(len(images)) if state.weights[i] > 0]
        cur = state
        num, den = splat_accumulate([(images[i], cur.poses[i]) for i in active], cfg, pixel_spacing)
        members = {}
        for i in active:
            members.setdefault(groups[i], []).append(i)
        new_poses = list(cur.poses)
        nccs = np.array(cur.ncc, dtype=np.float64)
        for g, idx in members.items():
            # each slice is registered to the volume of every included slice outside its group
            own_num, own_den = splat_accumulate([(images[i], cur.poses[i]) for i in idx], cfg, pixel_spacing)
            pyr = masked_pyramid(num - own_num, np.maximum(den - own_den, 0.0), cfg.output_spacing, cfg.pyramid_levels)
            results = _map(
                lambda i: register_slice(images[i], cur.poses[i], pyr, cfg, pixel_spacing, it < cfg.translation_warmup),
                idx,
                threads,
            )
            for i, r in zip(idx, results):
                new_poses[i] = r.pose
                nccs[i] = r.ncc_final
        state = robust_filter(ReconState(cur.volume, new_poses, cur.weights, nccs, cur.log), cfg)
        if not state.weights.any():
            raise ReconstructionError(f"all slices excluded at iteration {it + 1}")
        kept = np.flatnonzero(state.weights > 0)
        if cfg.gauge_fix and kept.size > 1:
            fixed = gauge_fix([new_poses[i] for i in kept], [poses[i] for i in kept])
            for i, p in zip(kept, fixed):
                new_poses[i] = p
        volume = splat_reconstruct(zip(images, state.poses), cfg, state.weights, pixel_spacing)
        included = state.weights > 0
        entry = {
            "iteration": it + 1,
            "mean_ncc": float(np.mean(state.ncc[included])),
            "psnr_db": None if reference is None else psnr(volume, reference),
            "excluded_slice_ids": [ids[i] for i in np.flatnonzero(~included)],
            "included": int(included.sum()),
        }
        log.info("SVR iteration %d: mean NCC %.4f, PSNR %s", it + 1, entry["mean_ncc"], entry["psnr_db"])
        state = ReconState(volume, state.poses, state.weights, state.ncc, state.log + [entry])
    return state
