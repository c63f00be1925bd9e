import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from svrkit.drr import (
    DEFAULT_DISTANCES_MM,
    ProjectionGeometry,
    box_chord_length,
    cast_ray,
    drr_pose_error,
    fit_pitch,
    render_drr,
    render_many,
    sample_halfsphere_poses,
)
from svrkit.geometry import axis_angle_matrix, euler_matrix
from svrkit.volume import Volume3D


@pytest.fixture(scope="module")
def unit_cube():
    return Volume3D(np.ones((20, 20, 20)), spacing=1.0)


def random_ray(rng, half):
    origin = rng.uniform(-3 * half, 3 * half, 3)
    target = rng.uniform(-half, half, 3)
    return origin, target - origin


# cast_ray


def test_central_ray_through_200mm_cube():
    v = Volume3D(np.ones((100, 100, 100)), spacing=2.0)
    assert cast_ray(v, [0.3, -0.2, -500.0], [0, 0, 1]) == pytest.approx(200.0, rel=1e-12)


def test_missing_ray_is_zero(unit_cube):
    assert cast_ray(unit_cube, [0, 50, -500], [0, 0, 1]) == 0.0
    assert cast_ray(unit_cube, [0, 0, 50], [0, 0, 1]) == 0.0


def test_diagonal_ray(unit_cube):
    s = 20.0
    d = np.ones(3) / math.sqrt(3)
    assert cast_ray(unit_cube, -d * 100, d) == pytest.approx(s * math.sqrt(3), rel=1e-12)


def test_zero_direction_raises(unit_cube):
    with pytest.raises(ValueError):
        cast_ray(unit_cube, [0, 0, -100], [0, 0, 0])


def test_chord_oracle_on_random_rays(unit_cube):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        o, d = random_ray(rng, unit_cube.half_extent)
        ref = box_chord_length(unit_cube.half_extent, o, d)
        got = cast_ray(unit_cube, o, d)
        worst = max(worst, abs(got - ref) / max(ref, 1e-300))
    assert worst < 1e-9


def test_weighted_ray_matches_voxel_sum(rng):
    # axis-aligned ray through voxel centres: integral is the column sum times spacing
    data = rng.random((8, 8, 8))
    v = Volume3D(data, spacing=1.5)
    c = v.index_to_world([2, 5, 0])
    got = cast_ray(v, [c[0], c[1], -100.0], [0, 0, 1])
    assert got == pytest.approx(1.5 * data[:, 5, 2].sum(), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_reversed_ray_same_integral(seed):
    rng = np.random.default_rng(seed)
    v = Volume3D(rng.random((6, 6, 6)))
    o, d = random_ray(rng, v.half_extent)
    # integration runs along the half-line from the origin, so start outside the volume
    assume(np.abs(o).max() > v.half_extent)
    d = d / np.linalg.norm(d)
    far = o + 20 * v.half_extent * d
    assert cast_ray(v, far, -d) == pytest.approx(cast_ray(v, o, d), rel=1e-9, abs=1e-12)


# render_drr


def test_zero_volume_renders_zero():
    v = Volume3D(np.zeros((16, 16, 16)))
    assert np.all(render_drr(v, ProjectionGeometry(400.0, 16, 1.0)) == 0)


def test_raw_mode_linear(phantom32):
    g = ProjectionGeometry(400.0, 24, fit_pitch(phantom32, 24), euler_matrix(0.3, -0.2, 1.0))
    one = render_drr(phantom32, g)
    two = render_drr(phantom32.with_data(2.0 * phantom32.data), g)
    assert np.abs(two - 2 * one).max() <= 1e-12 * np.abs(one).max()


def test_exp_mode():
    v = Volume3D(np.ones((8, 8, 8)))
    g = ProjectionGeometry(400.0, 8, 0.5)
    assert np.allclose(render_drr(v, g, "exp", mu=0.1), np.exp(-0.1 * render_drr(v, g)))


@pytest.mark.parametrize("R", [np.eye(3), euler_matrix(math.pi / 2, 0, 0), euler_matrix(0, math.pi / 2, 0)])
def test_sphere_drr_radially_symmetric(R):
    L = 48
    v0 = Volume3D(np.zeros((L, L, L)))
    r = np.linalg.norm(v0.voxel_centers(), axis=-1)
    v = v0.with_data((r <= 18.0).astype(float))
    g = ProjectionGeometry(400.0, 33, 1.0, R)
    img = render_drr(v, g)
    # the voxelised sphere has the cube's symmetry group, so the DRR does too
    for other in (img[::-1, :], img[:, ::-1], img.T):
        assert np.abs(other - img).max() < 1e-3 * img.max()


def test_source_inside_volume_rejected(phantom32):
    with pytest.raises(ValueError):
        render_drr(phantom32, ProjectionGeometry(20.0, 8, 1.0))


def test_render_many_thread_invariant(phantom32):
    geoms = sample_halfsphere_poses([400.0], count=4, seed=1, detector_size=12, pitch=fit_pitch(phantom32, 12))
    a = render_many(phantom32, geoms, threads=1)
    b = render_many(phantom32, geoms, threads=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_fit_pitch_keeps_volume_on_detector(phantom32):
    pitch = fit_pitch(phantom32, 32, 400.0)
    g = ProjectionGeometry(400.0, 32, pitch, euler_matrix(0.7, 0.4, -0.3))
    img = render_drr(phantom32.with_data(np.ones_like(phantom32.data)), g)
    assert np.all(img[0] == 0) and np.all(img[-1] == 0) and np.all(img[:, 0] == 0) and np.all(img[:, -1] == 0)


# pose sampling


def test_default_distances():
    assert DEFAULT_DISTANCES_MM == (800.0, 600.0, 400.0)


def test_grid_endpoints_and_count():
    geoms = sample_halfsphere_poses(DEFAULT_DISTANCES_MM, 90.0, step_deg=90.0)
    assert len(geoms) == 3 * 27
    assert sorted({g.angles_deg[0] for g in geoms}) == [-90.0, 0.0, 90.0]
    assert sorted({g.distance for g in geoms}) == [400.0, 600.0, 800.0]


def test_random_set_reproducible_and_bounded():
    a = sample_halfsphere_poses([600.0], 90.0, count=1000, seed=7)
    b = sample_halfsphere_poses([600.0], 90.0, count=1000, seed=7)
    assert len(a) == 1000
    assert all(x.angles_deg == y.angles_deg for x, y in zip(a, b))
    assert max(abs(t) for g in a for t in g.angles_deg) <= 90.0


def test_pose_sampling_errors():
    with pytest.raises(ValueError):
        sample_halfsphere_poses([], step_deg=90)
    with pytest.raises(ValueError):
        sample_halfsphere_poses([400.0])


# pose error


def test_drr_pose_error_examples():
    g = ProjectionGeometry(600.0, 8, 1.0, euler_matrix(0.2, 0.1, -0.4))
    assert drr_pose_error(g, g) == pytest.approx((0.0, 0.0), abs=1e-6)
    farther = ProjectionGeometry(700.0, 8, 1.0, g.rotation)
    assert drr_pose_error(g, farther) == pytest.approx((100.0, 0.0), abs=1e-6)
    turned = ProjectionGeometry(600.0, 8, 1.0, g.rotation @ axis_angle_matrix([1, 0, 0], math.radians(7)))
    dt, dr = drr_pose_error(g, turned)
    assert dr == pytest.approx(7.0, abs=1e-9)
    # the source swings along a chord of the 600 mm sphere
    assert dt == pytest.approx(2 * 600.0 * math.sin(math.radians(3.5)), rel=1e-9)


def test_geometry_json_roundtrip():
    g = ProjectionGeometry(600.0, 8, 1.25, euler_matrix(0.2, 0.1, -0.4), (1.0, 2.0, 3.0))
    h = ProjectionGeometry.from_json(g.to_json())
    assert h.distance == g.distance and h.pitch == g.pitch and np.allclose(h.rotation, g.rotation)
