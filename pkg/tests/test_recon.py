import numpy as np
import pytest
from scipy import ndimage

from mvdxx.geometry import Intrinsics, generation_view_grid
from mvdxx.recon import (
    OccupancyGrid,
    ResolutionMismatch,
    VisualHull,
    carve,
    chamfer,
    extract_mesh,
    grid_chamfer,
    load_obj,
    sample_surface,
    volume_iou,
)
from mvdxx.synthdata import box, render, sample_object, sphere, voxelize

K64 = Intrinsics(64, 64)


def grid_from(cells, res=8):
    bits = np.zeros((res,) * 3, dtype=bool)
    for c in cells:
        bits[c] = True
    return OccupancyGrid(bits)


@pytest.fixture(scope="module")
def sphere_masks():
    poses = list(generation_view_grid(0))
    return [render(sphere(0.5), p, K64).mask for p in poses], poses


def test_sphere_hull_iou(sphere_masks):
    masks, poses = sphere_masks
    hull = carve(masks, poses, K64, 64)
    assert volume_iou(hull, voxelize(sphere(0.5), 64)) >= 0.95


@pytest.mark.parametrize("seed", [0, 1])
def test_hull_superset_within_one_voxel(seed):
    obj = sample_object(seed)
    poses = list(generation_view_grid(0))
    hull = carve([render(obj, p, K64).mask for p in poses], poses, K64, 64)
    truth = voxelize(obj, 64).bits
    grown = ndimage.binary_dilation(hull.bits, iterations=1)
    assert not np.any(truth & ~grown)


def test_hull_monotone_in_views(sphere_masks):
    masks, poses = sphere_masks
    small = carve(masks[:8], poses[:8], K64, 32)
    large = carve(masks[:20], poses[:20], K64, 32)
    assert not np.any(large.bits & ~small.bits)


def test_single_empty_mask_empty_grid():
    pose = generation_view_grid(0)[0]
    assert carve([np.zeros((64, 64))], [pose], K64, 16).count() == 0


def test_carve_errors():
    with pytest.raises(ValueError):
        carve([], [], K64)
    with pytest.raises(ValueError):
        carve([np.zeros((64, 64))], [], K64)


def test_mesh_single_voxel():
    mesh = extract_mesh(grid_from([(3, 3, 3)]))
    assert len(mesh.triangles) == 12
    assert len(mesh.vertices) == 8
    assert mesh.euler_characteristic() == 2


def test_mesh_two_voxels():
    assert len(extract_mesh(grid_from([(3, 3, 3), (4, 3, 3)])).triangles) == 20


def test_mesh_full_cube_is_closed():
    mesh = extract_mesh(OccupancyGrid(np.ones((5, 5, 5), dtype=bool)))
    assert mesh.euler_characteristic() == 2
    # each edge shared by exactly two triangles
    t = mesh.triangles
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)
    np.testing.assert_allclose(mesh.vertices.min(0), -1)
    np.testing.assert_allclose(mesh.vertices.max(0), 1)


def test_mesh_outward_orientation():
    mesh = extract_mesh(grid_from([(3, 3, 3)]))
    v = mesh.vertices
    center = v.mean(0)
    for a, b, c in mesh.triangles:
        n = np.cross(v[b] - v[a], v[c] - v[a])
        assert np.linalg.norm(n) > 0
        assert np.dot(n, (v[a] + v[b] + v[c]) / 3 - center) > 0


def test_mesh_obj_roundtrip(tmp_path):
    mesh = extract_mesh(voxelize(box((0.5, 0.3, 0.2)), 16))
    mesh.save_obj(tmp_path / "m.obj")
    back = load_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_mesh_empty_grid_error():
    with pytest.raises(ValueError):
        extract_mesh(OccupancyGrid(np.zeros((4, 4, 4), dtype=bool)))


def test_volume_iou_cases():
    a = voxelize(sphere(0.5), 32)
    assert volume_iou(a, a) == 1.0
    b = grid_from([(0, 0, 0)], 32)
    c = grid_from([(5, 5, 5)], 32)
    assert volume_iou(b, c) == 0.0
    half = a.bits.copy()
    idx = np.argwhere(half)
    half[tuple(idx[::2].T)] = False
    h = OccupancyGrid(half)
    assert volume_iou(a, h) == h.count() / a.count()
    assert volume_iou(a, h) == volume_iou(h, a)
    empty = OccupancyGrid(np.zeros((8, 8, 8), dtype=bool))
    assert volume_iou(empty, empty) == 1.0
    with pytest.raises(ResolutionMismatch):
        volume_iou(a, empty)


def test_chamfer_hand_cases():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer(pts, pts) == 0.0
    other = pts + 0.1
    assert chamfer(pts, other) == chamfer(other, pts)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), pts)


def brute_nn_mean(x, y):
    out = []
    for i in range(0, len(x), 512):
        d = np.sqrt(((x[i : i + 512, None, :] - y[None]) ** 2).sum(-1))
        out.append(d.min(1))
    return np.concatenate(out).mean()


def test_chamfer_shifted_grid_oracle():
    g = voxelize(sphere(0.5), 64)
    shifted = OccupancyGrid(np.roll(g.bits, 1, axis=0))
    a, b = sample_surface(g), sample_surface(shifted)
    cd = grid_chamfer(g, shifted)
    assert cd == pytest.approx(0.5 * (brute_nn_mean(a, b) + brute_nn_mean(b, a)), abs=1e-12)
    # frozen brute-force value; the one-voxel spacing (0.03125) is only an upper bound
    assert cd == pytest.approx(0.018366650636584193, rel=1e-9)
    assert cd < 2 / 64


def test_visual_hull_estimator(sphere_masks):
    masks, poses = sphere_masks
    est = VisualHull(res=32)
    assert est.get_params() == {"res": 32, "intrinsics": None}
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        est.predict()
    est.fit(masks, poses)
    assert est.score(voxelize(sphere(0.5), 32)) >= 0.9
    assert len(est.mesh().triangles) > 0
