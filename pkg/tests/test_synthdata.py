import filecmp
import json
import math

import numpy as np
import pytest

from mvdxx.geometry import Intrinsics, camera_pose, generation_view_grid
from mvdxx.synthdata import (
    Primitive,
    SceneObject,
    box,
    build_dataset,
    load_grid,
    render,
    sample_object,
    save_grid,
    sphere,
    voxelize,
)

K64 = Intrinsics(64, 64)


def test_sample_object_deterministic():
    assert sample_object(11) == sample_object(11)
    assert sample_object(11) != sample_object(12)


@pytest.mark.parametrize("seed", range(25))
def test_sample_object_normalized(seed):
    obj = sample_object(seed)
    assert 1 <= len(obj.primitives) <= 5
    lo, hi = obj.bounds()
    assert np.max(hi - lo) == pytest.approx(2.0, abs=1e-9)
    np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-9)


def test_center_ray_depth():
    obj = sphere(0.5)
    from mvdxx.geometry import pixel_rays
    from mvdxx.synthdata import cast

    pose = camera_pose(0, 0, 1.5)
    K = Intrinsics(65, 65)  # odd size so a pixel center lies on the optical axis
    dirs = pixel_rays(pose, K)
    t, _, _ = cast(obj, pose.center, dirs[32:33, 32:33])
    assert t[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_sphere_silhouette_radius():
    view = render(sphere(0.5), camera_pose(0, 0, 1.5), K64)
    analytic = K64.focal_px * math.tan(math.asin(1 / 3))
    assert analytic == pytest.approx(19.5959, abs=1e-3)  # frozen oracle value
    measured = math.sqrt(view.mask.sum() / math.pi)
    assert abs(measured - analytic) <= 1.0
    # boundary check: every pixel farther than r+1 is background, closer than r-1 is foreground
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    r = np.hypot(xx - 32, yy - 32)
    assert view.mask[r > analytic + 1].sum() == 0
    assert view.mask[r < analytic - 1].min() == 1


def test_box_silhouette_matches_projection():
    # axis-aligned box viewed along -X: silhouette is the projected front face
    obj = box((0.3, 0.4, 0.2))
    pose = camera_pose(0, 0, 1.5)
    view = render(obj, pose, K64)
    f = K64.focal_px
    half_w = f * 0.4 / (1.5 - 0.3)
    half_h = f * 0.2 / (1.5 - 0.3)
    yy, xx = np.mgrid[0:64, 0:64] + 0.5
    inside = (np.abs(xx - 32) < half_w - 1) & (np.abs(yy - 32) < half_h - 1)
    outside = (np.abs(xx - 32) > half_w + 1) | (np.abs(yy - 32) > half_h + 1)
    assert view.mask[inside].all() and not view.mask[outside].any()


def test_empty_object_renders_white():
    view = render(SceneObject(()), camera_pose(0, 0, 1.5), K64)
    assert np.all(view.rgb == 1.0) and not view.mask.any()


@pytest.mark.parametrize("seed", [0, 3, 7])
def test_background_is_white(seed):
    obj = sample_object(seed)
    for pose in list(generation_view_grid(0))[::5]:
        v = render(obj, pose, K64)
        assert np.all(v.rgb[v.mask == 0] == 1.0)
        assert np.all((v.rgb >= 0) & (v.rgb <= 1))


def test_render_deterministic():
    obj = sample_object(4)
    pose = camera_pose(30, 20, 1.8)
    a, b = render(obj, pose, K64), render(obj, pose, K64)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.mask, b.mask)


def test_voxelize_sphere_fraction():
    frac = voxelize(sphere(0.5), 64).fraction()
    assert frac == pytest.approx(4 / 3 * math.pi * 0.125 / 8, abs=0.005)


def test_voxelize_convergence_res128():
    frac = voxelize(sphere(0.5), 128).fraction()
    analytic = 4 / 3 * math.pi * 0.125 / 8
    assert abs(frac - analytic) / analytic < 0.01


def test_voxelize_box_and_empty():
    assert voxelize(box((1, 0.5, 0.5)), 64).fraction() == pytest.approx(0.25, abs=1e-12)
    assert voxelize(SceneObject(()), 16).count() == 0
    with pytest.raises(ValueError):
        voxelize(sphere(), 4)


def test_grid_file_roundtrip(tmp_path):
    g = voxelize(sample_object(2), 24)
    save_grid(g, tmp_path / "g.bin")
    assert load_grid(tmp_path / "g.bin") == g
    raw = (tmp_path / "g.bin").read_bytes()
    n = int.from_bytes(raw[:8], "little")
    assert json.loads(raw[8 : 8 + n]) == {"res": 24}
    assert len(raw) - 8 - n == 24**3 // 8


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive("cone", (0, 0, 0), (1, 1, 1), (1, 1, 1))


def test_dataset_manifest(tiny_dataset_dir, tiny_dataset):
    manifest = json.loads((tiny_dataset_dir / "manifest.json").read_text())
    assert len(manifest["objects"]) == 3
    for e in manifest["objects"]:
        assert len(e["condition_views"]) + len(e["target_views"]) == 42
        t0 = e["target_views"][0]["pose"]
        c0 = e["condition_views"][0]["pose"]
        assert t0["elevation_deg"] == 60
        assert t0["azimuth_deg"] == c0["azimuth_deg"]
    assert tiny_dataset.cond_rgb.shape == (3, 10, 64, 64, 3)
    assert tiny_dataset.target_mask.shape == (3, 32, 64, 64)
    # stored mask/rgb consistency survives PNG encoding
    bg = tiny_dataset.target_mask == 0
    assert np.all(tiny_dataset.target_rgb[bg] == 255)


def test_dataset_byte_identical(tmp_path):
    build_dataset(2, tmp_path / "a", seed=9, grid_res=16)
    build_dataset(2, tmp_path / "b", seed=9, grid_res=16)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files], shallow=False)
    assert not mismatch and not errors and len(match) == len(files)


def test_dataset_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        build_dataset(1, blocker / "sub", grid_res=16)
