import math

import numpy as np
import pytest
import torch

from mvdxx import numcore as nc
from mvdxx.mvae import (
    MVAE,
    MvaeNet,
    bce_with_logits,
    kl_divergence,
    mask_iou,
    mvae_loss,
    stack_views,
    train_mvae,
)


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(3)
    X = np.zeros((6, 16, 16, 4), np.float32)
    X[..., :3] = 1.0
    for i in range(6):
        c = rng.integers(4, 12, size=2)
        X[i, c[0] - 3 : c[0] + 3, c[1] - 3 : c[1] + 3] = [*rng.random(3), 1.0]
    return X


@pytest.fixture(scope="module")
def fitted(images):
    return MVAE(channels=(8, 8, 8), groups=2, steps=60, batch_size=4, learning_rate=3e-3, log_every=1000).fit(images)


def test_bce_limit_cases():
    for y in (0.0, 1.0, 0.5):
        v = bce_with_logits(torch.zeros(3, 4), torch.full((3, 4), y)).item()
        assert v == pytest.approx(math.log(2.0), abs=1e-6)
    big = bce_with_logits(torch.tensor([80.0, -80.0]), torch.tensor([1.0, 0.0])).item()
    assert 0.0 <= big < 1e-20
    assert math.isfinite(bce_with_logits(torch.tensor([1e4]), torch.tensor([0.0])).item())


def test_kl_limit_cases():
    z = torch.zeros(2, 4, 3, 3)
    assert kl_divergence(z, z).item() == 0.0
    # one unit of mean per entry costs 1/2
    assert kl_divergence(torch.ones(1, 4, 3, 3), z[:1]).item() == pytest.approx(18.0)


def test_shapes_and_white_latent(fitted, images):
    z = fitted.transform(images)
    assert z.shape == (6, 4, 2, 2) and z.dtype == np.float32
    back = fitted.inverse_transform(z)
    assert back.shape == images.shape
    assert back[..., :3].min() >= 0 and back[..., :3].max() <= 1
    w1, w2 = fitted.white_latent(16), fitted.white_latent(16)
    assert w1.shape == (4, 2, 2) and np.array_equal(w1, w2)


def test_rejects_bad_input(fitted):
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((1, 15, 16, 4), np.float32))
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((1, 16, 16, 3), np.float32))
    with pytest.raises(nc.NonFiniteError):
        fitted.decode(np.full((4, 2, 2), np.nan, np.float32))


def test_unfitted_raises():
    with pytest.raises(Exception, match="not fitted"):
        MVAE().transform(np.zeros((1, 16, 16, 4), np.float32))


def test_get_params_roundtrip():
    m = MVAE(channels=(8, 8, 8), steps=3)
    p = m.get_params()
    assert p["steps"] == 3 and p["channels"] == (8, 8, 8)
    assert MVAE(**p).get_params() == p


def test_loss_decreases(fitted):
    c = fitted.loss_curve_
    assert np.mean(c[-10:]) < 0.5 * np.mean(c[:10])


def test_save_load(fitted, images, tmp_path):
    fitted.save(tmp_path / "m.ckpt")
    back = MVAE.load(tmp_path / "m.ckpt")
    assert back.scale_factor_ == fitted.scale_factor_
    np.testing.assert_array_equal(back.transform(images), fitted.transform(images))


def test_gradient_check_16px():
    with nc.precision("float64"):
        torch.manual_seed(0)
        net = MvaeNet((4, 4, 4), groups=2)
        g = torch.Generator().manual_seed(1)
        rgb = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        mask = (torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) > 0.5).double()

        def f():
            return mvae_loss(net, rgb, mask, kl_weight=1e-2, sample=False)[0]

        err = nc.grad_check(f, list(net.parameters()), eps=1e-6, max_coords=3, seed=0)
    assert err < 1e-3


def test_mask_iou():
    a = np.zeros((4, 4))
    a[:2] = 1
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    b = np.zeros((4, 4))
    b[1:3] = 1
    assert mask_iou(a, b) == pytest.approx(1 / 3)


def test_train_mvae_report(tiny_dataset, tmp_path):
    from mvdxx.mvae import MvaeConfig

    cfg = MvaeConfig(channels=(8, 8, 8), groups=2, steps=4, batch_size=2, holdout_objects=1, log_every=100)
    model, rep = train_mvae(tiny_dataset, cfg, tmp_path)
    n_per = stack_views(*tiny_dataset.all_views()).shape[0] // len(tiny_dataset)
    assert rep["heldout_images"] == n_per
    assert len(rep["latent_std_per_channel"]) == 4
    assert (tmp_path / "mvae.ckpt").exists() and (tmp_path / "mvae_report.json").exists()
    assert (tmp_path / "mvae_loss.csv").read_text().startswith("step,loss")
