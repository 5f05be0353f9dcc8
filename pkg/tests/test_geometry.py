import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvdxx.geometry import (
    BehindCameraError,
    DegenerateUpError,
    Intrinsics,
    align_grid_to_reference,
    backproject,
    camera_pose,
    generation_view_grid,
    project,
    project_points,
    sample_condition_pose,
)

K64 = Intrinsics(64, 64)


def test_axis_aligned_pose():
    p = camera_pose(0, 0, 1.5)
    np.testing.assert_allclose(p.center, [1.5, 0, 0], atol=1e-12)
    np.testing.assert_allclose(p.forward, [-1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(p.up, [0, 0, 1], atol=1e-12)


def test_quarter_turn_and_elevation():
    np.testing.assert_allclose(camera_pose(90, 0, 1.5).center, [0, 1.5, 0], atol=1e-12)
    np.testing.assert_allclose(camera_pose(0, 30, 1.5).center, [1.29904, 0, 0.75], atol=1e-5)


@pytest.mark.parametrize("elev", [90, -90])
def test_degenerate_up(elev):
    with pytest.raises(DegenerateUpError):
        camera_pose(0, elev, 1.5)


def test_nonpositive_distance():
    with pytest.raises(ValueError):
        camera_pose(0, 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 360), st.floats(-89, 89), st.floats(0.1, 5))
def test_rotation_orthonormal(a, e, d):
    R = camera_pose(a, e, d).rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    # optical axis through the origin
    p = camera_pose(a, e, d)
    np.testing.assert_allclose(p.forward, -p.center / np.linalg.norm(p.center), atol=1e-12)


def test_grid_layout():
    g = generation_view_grid(0)
    assert len(g) == 32
    assert (g[0].azimuth, g[0].elevation, g[0].distance) == (0, 60, 1.5)
    elevs = [p.elevation for p in g]
    for e in (60, 30, 0, -30):
        assert elevs.count(e) == 8
    assert elevs == [60] * 8 + [30] * 8 + [0] * 8 + [-30] * 8
    assert [p.azimuth for p in g][:8] == [45.0 * k for k in range(8)]
    assert all(p.distance == 1.5 for p in g)


def test_grid_offset():
    g = generation_view_grid(22.5)
    assert g[8].azimuth == 22.5 and g[8].elevation == 30
    base = generation_view_grid(0)
    for o in (22.5, 90, 315):
        shifted = generation_view_grid(o)
        for a, b in zip(shifted, base):
            assert (a.azimuth - b.azimuth - o) % 360 == pytest.approx(0, abs=1e-9)


def test_align_to_reference():
    g = align_grid_to_reference(camera_pose(90, 20, 2.0))
    assert [p.azimuth for p in g][:8] == [90, 135, 180, 225, 270, 315, 0, 45]
    assert g.azimuth_offset == 90
    assert g[8].azimuth == 90 and g[8].elevation == 30
    same = align_grid_to_reference(camera_pose(0, 10, 1.7))
    assert same.to_json() == generation_view_grid(0).to_json()
    g45 = align_grid_to_reference(camera_pose(45, 0, 1.5))
    assert g45[1].azimuth == 90 and g45[1].elevation == 60


def test_condition_pose_ranges_and_frequency():
    rng = np.random.default_rng(0)
    poses = [sample_condition_pose(rng) for _ in range(10_000)]
    az = np.array([p.azimuth for p in poses])
    assert np.all(az % 45 == 0)
    assert all(-10 <= p.elevation <= 45 for p in poses)
    assert all(1.5 <= p.distance <= 2.2 for p in poses)
    freq = np.bincount((az // 45).astype(int), minlength=8) / len(az)
    assert np.all(np.abs(freq - 0.125) <= 0.02)


def test_intrinsics():
    assert K64.focal_px == pytest.approx(32 / math.tan(math.radians(30)))
    assert K64.principal_point == (32.0, 32.0)


def test_project_principal_ray():
    for p in generation_view_grid(0):
        u, v, d = project(p, K64, [0, 0, 0])
        assert (u, v) == pytest.approx((32, 32), abs=1e-9)
        assert d == pytest.approx(p.distance)


def test_project_fov_edge():
    u, v, d = project(camera_pose(0, 0, 1.5), K64, [0, 1.5 * math.tan(math.radians(30)), 0])
    assert min(abs(u), abs(u - 64)) == pytest.approx(0, abs=1e-9)
    assert v == pytest.approx(32)


def test_behind_camera():
    with pytest.raises(BehindCameraError):
        project(camera_pose(0, 0, 1.5), K64, [3, 0, 0])
    u, v, d = project_points(camera_pose(0, 0, 1.5), K64, np.array([[3.0, 0, 0]]))
    assert np.isnan(u[0]) and d[0] < 0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 64), st.floats(0, 64), st.floats(0.2, 3), st.floats(0, 360), st.floats(-60, 60))
def test_backproject_roundtrip(u, v, depth, a, e):
    pose = camera_pose(a, e, 1.5)
    p = backproject(pose, K64, u, v, depth)
    uu, vv, dd = project(pose, K64, p)
    assert (uu, vv, dd) == pytest.approx((u, v, depth), abs=1e-6)


def test_pose_json_roundtrip():
    p = camera_pose(135, -30, 1.5)
    q = type(p).from_json(p.to_json())
    np.testing.assert_allclose(p.rotation, q.rotation)
    assert set(p.to_json()) == {"azimuth_deg", "elevation_deg", "distance"}
