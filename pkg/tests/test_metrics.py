import json
import math
import shutil

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from mvdxx.geometry import Intrinsics
from mvdxx.metrics import evaluate, psnr, ssim, validate_report, write_report
from mvdxx.recon import carve
from mvdxx.sampling import save_run
from mvdxx.synthdata import RenderedView, save_grid


def test_psnr_cases():
    a = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.6)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) == 0.0
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(1)
    img = rng.random((32, 32, 3))
    noise = rng.normal(size=img.shape)
    values = [psnr(img, img + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_ssim_identical_and_zero_variance():
    a = np.random.default_rng(2).random((20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    val = ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    assert val == pytest.approx(9.999000099990002e-05, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((64, 64, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = structural_similarity(
        a, b, channel_axis=-1, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, data_range=1.0,
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-4)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


@pytest.fixture
def gt_run(tmp_path, tiny_dataset):
    """A run directory holding the ground-truth views 0..7 of object 1 plus their hull."""
    ds = tiny_dataset
    obj = 1
    views = list(range(8))
    poses = ds.target_poses(obj)
    K = Intrinsics(64, 64)
    rendered = [
        RenderedView(ds.target_rgb[obj, v] / 255.0, ds.target_mask[obj, v], poses[v], K) for v in views
    ]
    run = tmp_path / "run"
    save_run(run, views, rendered, {"object_index": obj})
    hull = carve([r.mask for r in rendered], [r.pose for r in rendered], K, 32)
    save_grid(hull, run / "hull.bin")
    return run


def test_evaluate_ground_truth(gt_run, tiny_dataset):
    report = evaluate(gt_run, tiny_dataset)
    assert report["mean_psnr"] == "inf"
    assert all(p["psnr"] == "inf" for p in report["per_view"])
    assert report["mean_ssim"] == pytest.approx(1.0)
    assert 0 < report["volume_iou"] <= 1
    assert report["chamfer"] >= 0
    validate_report(report)
    # schema round-trip through JSON
    validate_report(json.loads(json.dumps(report)))


def test_evaluate_pure(gt_run, tiny_dataset, tmp_path):
    a = evaluate(gt_run, tiny_dataset, views=[0, 2, 4])
    b = evaluate(gt_run, tiny_dataset, views=[0, 2, 4])
    assert a == b and a["views"] == [0, 2, 4]
    write_report(a, tmp_path / "r.json", tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text()) == json.loads(json.dumps(a))
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "view,psnr,ssim"


def test_evaluate_missing_artifacts(gt_run, tiny_dataset, tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest.json"):
        evaluate(tmp_path / "nothing", tiny_dataset)
    (gt_run / "view_03.png").unlink()
    with pytest.raises(FileNotFoundError, match="view_03.png"):
        evaluate(gt_run, tiny_dataset)
    with pytest.raises(FileNotFoundError, match="12"):
        evaluate(gt_run, tiny_dataset, views=[12])


def test_schema_rejects_bad_report():
    import jsonschema

    with pytest.raises(jsonschema.ValidationError):
        validate_report({"views": [0], "per_view": [], "mean_psnr": "high", "mean_ssim": 0.5,
                         "chamfer": None, "volume_iou": None})
