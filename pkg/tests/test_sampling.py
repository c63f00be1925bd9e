import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from svrkit.geometry import (
    RigidPose,
    axis_angle_matrix,
    euler_matrix,
    pose_error_decomposed,
    pose_from_anchors,
    quat_to_rotation,
    random_rotation,
)
from svrkit.sampling import (
    SamplingConfig,
    build_stack,
    corrupt_motion,
    extract_slice,
    fibonacci_normals,
    generate_dataset,
    load_dataset,
    load_manifest,
    make_sample,
    prune_by_variance,
    save_dataset,
)
from svrkit.volume import Volume3D


def nn_geodesic(points):
    d, _ = cKDTree(points).query(points, k=2)
    chord = d[:, 1]
    return 2 * np.arcsin(np.clip(chord / 2, 0, 1))


# Fibonacci normals


def test_fibonacci_single_point():
    assert np.allclose(fibonacci_normals(1, hemisphere_only=False), [[1, 0, 0]])


def test_fibonacci_two_points_z():
    assert np.allclose(fibonacci_normals(2, hemisphere_only=False)[:, 2], [0.5, -0.5])


def test_fibonacci_formula():
    n = 7
    pts = fibonacci_normals(n, hemisphere_only=False)
    phi_g = (math.sqrt(5) + 1) / 2
    for i, p in enumerate(pts):
        z = 1 - (2 * i + 1) / n
        theta, phi = math.acos(z), 2 * math.pi * i / phi_g
        assert np.allclose(p, [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), z], atol=1e-12)


def test_fibonacci_hemisphere_500():
    pts = fibonacci_normals(500, hemisphere_only=True)
    assert pts.shape == (500, 3)
    assert np.all(pts[:, 2] > 0)
    assert np.abs(np.linalg.norm(pts, axis=1) - 1).max() < 1e-12


def test_fibonacci_uniformity_500():
    g = nn_geodesic(fibonacci_normals(500, hemisphere_only=False))
    assert g.max() / g.min() < 2


@pytest.mark.parametrize("n", [1, 2, 3, 10, 77])
def test_hemisphere_count(n):
    assert len(fibonacci_normals(n)) == n


def test_fibonacci_rejects_zero():
    with pytest.raises(ValueError):
        fibonacci_normals(0)


# stacks


def test_stack_identity():
    poses = build_stack([0, 0, 1], SamplingConfig(plane_count=3, plane_spacing=4))
    assert all(np.allclose(p.rotation, np.eye(3)) for p in poses)
    assert [p.z_offset for p in poses] == pytest.approx([-4, 0, 4])


def test_stack_antipodal():
    (p,) = build_stack([0, 0, -1], SamplingConfig(plane_count=1))
    assert np.all(np.isfinite(p.rotation))
    assert np.allclose(p.normal, [0, 0, -1])
    assert pose_error_decomposed(RigidPose(), p)[1] == pytest.approx(180.0)


def test_stack_x_normal():
    (p,) = build_stack([1, 0, 0], SamplingConfig(plane_count=1))
    assert np.abs(p.rotation @ [0, 0, 1] - [1, 0, 0]).max() < 1e-12


def test_stack_offsets_large_config():
    poses = build_stack([0, 0, 1], SamplingConfig(plane_count=64, plane_spacing=4))
    z = [p.z_offset for p in poses]
    assert z[0] == pytest.approx(-126) and z[-1] == pytest.approx(126)
    assert np.allclose(np.diff(z), 4)


@given(st.integers(0, 2**32 - 1))
def test_stack_rotation_is_shortest_arc(seed):
    n = np.random.default_rng(seed).normal(size=3)
    n /= np.linalg.norm(n)
    (p,) = build_stack(n, SamplingConfig(plane_count=1))
    assert np.allclose(p.normal, n, atol=1e-12)
    # minimal rotation: angle equals the angle between z and n
    assert pose_error_decomposed(RigidPose(), p)[1] == pytest.approx(math.degrees(math.acos(n[2])), abs=1e-6)


# slice extraction


def test_constant_volume_gives_constant_slice():
    v = Volume3D(np.full((16, 16, 16), 2.5))
    img = extract_slice(v, RigidPose(random_rotation(np.random.default_rng(0))), 8)
    assert np.allclose(img, 2.5)


def test_axial_extraction_matches_voxel_plane(rng):
    v = Volume3D(rng.random((33, 33, 33)))
    img = extract_slice(v, RigidPose(), 33, 1.0)
    assert np.abs(img - v.data[16]).max() < 1e-6


def test_in_plane_half_turn_reverses_indices(phantom32):
    pose = RigidPose.in_stack(random_rotation(np.random.default_rng(5)), 3.0)
    a = extract_slice(phantom32, pose, 32)
    b = extract_slice(phantom32, pose.compose(axis_angle_matrix([0, 0, 1], math.pi)), 32)
    assert np.abs(b - a[::-1, ::-1]).max() < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_hemisphere_symmetry(phantom32, seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    z = rng.uniform(-8, 8)
    a = extract_slice(phantom32, RigidPose.in_stack(R, z), 32)
    # same plane seen from the opposite normal: in-plane v axis flips
    flipped = R @ np.diag([1.0, -1.0, -1.0])
    b = extract_slice(phantom32, RigidPose.in_stack(flipped, -z), 32)
    assert np.abs(b - a[::-1, :]).max() < 1e-6


# pruning


def _samples_with_variance(vs):
    out = []
    for v in vs:
        img = np.zeros((4, 4))
        img[0, :2] = [math.sqrt(v * 16 / 2) * s for s in (1, -1)] if v else 0
        s = make_sample(img, RigidPose())
        out.append(s)
    return out


def test_prune_example():
    samples = _samples_with_variance([0, 10, 100])
    assert [round(s.variance, 9) for s in samples] == [0, 10, 100]
    kept, pruned, t = prune_by_variance(samples, 0.2)
    assert t == pytest.approx(20)
    assert pruned == samples[:2] and kept == samples[2:]


def test_prune_K_zero_keeps_everything():
    samples = _samples_with_variance([0, 10, 100])
    kept, pruned, t = prune_by_variance(samples, 0.0)
    assert t == 0 and len(kept) == 3 and not pruned


def test_prune_equal_variances_keeps_everything():
    kept, pruned, _ = prune_by_variance(_samples_with_variance([7, 7, 7]), 0.2)
    assert len(kept) == 3


def test_prune_empty_raises():
    with pytest.raises(ValueError):
        prune_by_variance([], 0.2)


# dataset generation


def test_desk_dataset_count(phantom64):
    samples, m = generate_dataset(phantom64, SamplingConfig(n_normals=20, plane_count=8))
    assert m.generated == 160
    assert m.kept == len(samples) and m.kept + m.pruned == 160
    assert m.threshold == pytest.approx(0.2 * m.max_variance)
    assert all(s.variance >= m.threshold for s in samples)


def test_dataset_order_and_threads(phantom32):
    cfg = SamplingConfig(n_normals=6, plane_count=5, prune_K=0.0)
    a, _ = generate_dataset(phantom32, cfg, threads=1)
    b, _ = generate_dataset(phantom32, cfg, threads=4)
    assert [(s.normal_index, s.plane_index) for s in a] == sorted((s.normal_index, s.plane_index) for s in a)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_empty_phantom_reports_zero_threshold():
    v = Volume3D(np.zeros((16, 16, 16)))
    samples, m = generate_dataset(v, SamplingConfig(n_normals=2, plane_count=2))
    assert m.threshold == 0.0 and len(samples) == 4


def test_label_encodings_agree(phantom32):
    samples, _ = generate_dataset(phantom32, SamplingConfig(n_normals=10, plane_count=4, prune_K=0.0))
    for s in samples:
        R = s.pose.rotation
        assert np.abs(euler_matrix(s.euler.rx, s.euler.ry, s.euler.rz) - R).max() < 1e-6
        assert np.abs(quat_to_rotation(s.quat.q) - R).max() < 1e-6
        assert np.abs(pose_from_anchors(s.anchors).rotation - R).max() < 1e-6
        assert s.variance == pytest.approx(np.var(s.image))


def test_dataset_roundtrip(tmp_path, phantom32):
    samples, m = generate_dataset(phantom32, SamplingConfig(n_normals=3, plane_count=3))
    save_dataset(tmp_path, samples, m)
    doc = load_manifest(tmp_path)
    assert doc["config"]["prune_K"] == 0.2
    assert doc["counts"] == {"generated": 9, "kept": m.kept, "pruned": m.pruned}
    back = load_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert np.array_equal(a.image.astype(np.float32), b.image)
        assert np.allclose(a.pose.rotation, b.pose.rotation)


# motion corruption


def _stack(phantom32):
    return generate_dataset(phantom32, SamplingConfig(n_normals=4, plane_count=4, prune_K=0.0))[0]


def test_corruption_zero_bounds(phantom32):
    s = _stack(phantom32)
    out = corrupt_motion(s, 0, 0, seed=3)
    for a, b in zip(s, out):
        assert np.array_equal(a.pose.rotation, b.pose.rotation) and np.array_equal(a.pose.translation, b.pose.translation)


@pytest.mark.parametrize("antithetic", [False, True])
def test_corruption_bounds(phantom32, antithetic):
    s = _stack(phantom32)
    out = corrupt_motion(s, 10, 5, seed=3, antithetic=antithetic)
    for a, b in zip(s, out):
        dt, dr = pose_error_decomposed(a.pose, b.pose)
        assert dr <= 10 + 1e-9 and dt <= 5 * math.sqrt(3) + 1e-9
        assert np.abs(b.pose.translation - a.pose.translation).max() <= 5
        assert np.array_equal(a.image, b.image)
        assert b.ground_truth is not None and np.array_equal(b.ground_truth.rotation, a.pose.rotation)


def test_corruption_deterministic(phantom32):
    s = _stack(phantom32)
    a, b = corrupt_motion(s, 10, 5, seed=3), corrupt_motion(s, 10, 5, seed=3)
    assert all(np.array_equal(x.pose.rotation, y.pose.rotation) for x, y in zip(a, b))
    c = corrupt_motion(s, 10, 5, seed=4)
    assert not all(np.array_equal(x.pose.rotation, y.pose.rotation) for x, y in zip(a, c))


def test_antithetic_pairs_cancel(phantom32):
    s = _stack(phantom32)
    out = corrupt_motion(s, 10, 5, seed=3, antithetic=True)
    for k in range(0, len(s) - 1, 2):
        d0 = out[k].pose.rotation @ s[k].pose.rotation.T
        d1 = out[k + 1].pose.rotation @ s[k + 1].pose.rotation.T
        assert np.allclose(d0 @ d1, np.eye(3), atol=1e-12)
        shift = (out[k].pose.translation - s[k].pose.translation) + (out[k + 1].pose.translation - s[k + 1].pose.translation)
        assert np.allclose(shift, 0, atol=1e-12)


def test_corruption_rejects_negative_bounds(phantom32):
    with pytest.raises(ValueError):
        corrupt_motion(_stack(phantom32), -1, 0)
