"""Mask-aware autoencoder: RGB + foreground mask <-> 4-channel latent at 1/8 resolution."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from . import numcore as nc
from .layers import Conv, ResBlock
from .validation import check_images, check_is_fitted, check_latents

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DOWNSAMPLE = 8


@dataclass
class MvaeConfig:
    channels: tuple[int, ...] = (32, 64, 96)
    groups: int = 8
    kl_weight: float = 1e-6
    steps: int = 6000
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    holdout_objects: int = 8
    seed: int = 0
    log_every: int = 200

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class MvaeNet(nn.Module):
    """Three stride-2 stages down, three nearest-neighbour stages up.

    There is no normalisation in front of the latent head or the output conv:
    on flat-coloured renders a group norm there removes the per-channel spatial
    mean, which is where the object's colour lives.
    """

    def __init__(self, channels=(32, 64, 96), groups: int = 8):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.groups = groups
        # encoder: 64 -> 32 -> 16 -> 8
        self.enc_in = Conv(4, c0)
        self.enc_down = nn.ModuleList(
            [Conv(c0, c0, stride=2), Conv(c0, c1, stride=2), Conv(c1, c2, stride=2)]
        )
        self.enc_res = nn.ModuleList(
            [ResBlock(c0, c0, groups=groups), ResBlock(c1, c1, groups=groups), ResBlock(c2, c2, groups=groups)]
        )
        self.enc_out = Conv(c2, 2 * LATENT_CHANNELS, k=1)
        # decoder: 8 -> 16 -> 32 -> 64
        self.dec_in = Conv(LATENT_CHANNELS, c2)
        self.dec_res = nn.ModuleList(
            [ResBlock(c2, c2, groups=groups), ResBlock(c1, c1, groups=groups), ResBlock(c0, c0, groups=groups)]
        )
        self.dec_up = nn.ModuleList([Conv(c2, c1), Conv(c1, c0), Conv(c0, c0)])
        self.dec_out = Conv(c0, 4)

    def encode_moments(self, x: torch.Tensor):
        """x: [B, 4, H, W] in [0, 1] -> (mean, logvar), each [B, 4, H/8, W/8]."""
        h = self.enc_in(x * 2.0 - 1.0)
        for down, res in zip(self.enc_down, self.enc_res):
            h = res(down(h))
        h = self.enc_out(nc.silu(h))
        mean, logvar = h[:, :LATENT_CHANNELS], h[:, LATENT_CHANNELS:]
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """z: [B, 4, h, w] -> [B, 4, 8h, 8w]; channels are RGB then mask logit."""
        h = self.dec_in(z)
        for res, up in zip(self.dec_res, self.dec_up):
            h = up(nc.upsample2x(res(h)))
        out = self.dec_out(nc.silu(h))
        # composite the decoded foreground over the white background with the
        # decoded mask, so colour edges are as sharp as the silhouette
        alpha = torch.sigmoid(out[:, 3:])
        rgb = alpha * (out[:, :3] * 0.5 + 0.5) + (1.0 - alpha)
        return torch.cat([rgb, out[:, 3:]], dim=1)


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, 1)) summed over latent entries, averaged over batch."""
    kl = 0.5 * (mean**2 + torch.exp(logvar) - 1.0 - logvar)
    return kl.reshape(kl.shape[0], -1).sum(-1).mean()


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # log(1 + e^x) - x*y, written to stay finite for large |x|
    return (torch.clamp(logits, min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))).mean()


def mvae_loss(
    net: MvaeNet,
    rgb: torch.Tensor,
    mask: torch.Tensor,
    kl_weight: float = 1e-6,
    gen: torch.Generator | None = None,
    sample: bool = True,
):
    """Reconstruction L2 on RGB + BCE on the mask logit + weighted KL.

    rgb [B,3,H,W], mask [B,1,H,W]. Returns (total, parts dict).
    """
    mean, logvar = net.encode_moments(torch.cat([rgb, mask], dim=1))
    z = mean
    if sample:
        noise = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * noise
    out = net.decode_raw(z)
    rec = ((out[:, :3] - rgb) ** 2).mean()
    bce = bce_with_logits(out[:, 3:], mask)
    kl = kl_divergence(mean, logvar)
    total = rec + bce + kl_weight * kl
    return total, {"rgb_l2": rec.detach().item(), "mask_bce": bce.detach().item(), "kl": kl.detach().item()}


def _to_nchw(rgb: np.ndarray, mask: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    r = torch.as_tensor(np.ascontiguousarray(rgb), dtype=nc.get_dtype()).permute(0, 3, 1, 2)
    m = torch.as_tensor(np.ascontiguousarray(mask), dtype=nc.get_dtype())[:, None]
    return r.contiguous(), m


class MVAE(BaseEstimator, TransformerMixin):
    """Mask-aware autoencoder with a scikit-learn style surface.

    ``X`` is an array of shape (n, H, W, 4): RGB in [0, 1] followed by the
    binary foreground mask. ``transform`` returns scaled mean latents of shape
    (n, 4, H/8, W/8); ``inverse_transform`` maps latents back to (n, H, W, 4)
    with clamped RGB and the mask probability in the last channel.
    """

    def __init__(
        self,
        channels=(32, 64, 96),
        groups: int = 8,
        kl_weight: float = 1e-6,
        steps: int = 6000,
        batch_size: int = 16,
        learning_rate: float = 2e-3,
        weight_decay: float = 0.0,
        seed: int = 0,
        log_every: int = 200,
    ):
        self.channels = channels
        self.groups = groups
        self.kl_weight = kl_weight
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.seed = seed
        self.log_every = log_every

    def _init_net(self) -> MvaeNet:
        torch.manual_seed(self.seed)
        return MvaeNet(tuple(self.channels), self.groups)

    def fit(self, X, y=None, callback=None):
        X = check_images(X, channels=4, multiple_of=DOWNSAMPLE)
        self.net_ = self._init_net()
        self.scale_factor_ = 1.0
        rgb, mask = X[..., :3], X[..., 3]
        gen = torch.Generator().manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        opt = torch.optim.AdamW(
            self.net_.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay
        )
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, self.steps))
        self.loss_curve_ = []
        last_good = {k: v.clone() for k, v in self.net_.state_dict().items()}
        t0 = time.time()
        for step in range(self.steps):
            idx = rng.integers(len(X), size=self.batch_size)
            r, m = _to_nchw(rgb[idx], mask[idx])
            loss, parts = mvae_loss(self.net_, r, m, self.kl_weight, gen)
            if not torch.isfinite(loss):
                self.net_.load_state_dict(last_good)
                raise nc.NonFiniteError(f"M-VAE loss diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            self.loss_curve_.append(loss.item())
            if step % self.log_every == 0:
                last_good = {k: v.clone() for k, v in self.net_.state_dict().items()}
                log.info("mvae step %d loss %.5f %s (%.0fs)", step, loss.item(), parts, time.time() - t0)
                if callback is not None:
                    callback(step, self)
        self.net_.eval()
        self.scale_factor_ = 1.0 / float(self._raw_latents(X).std())
        return self

    @torch.no_grad()
    def _raw_latents(self, X: np.ndarray, batch: int = 128) -> torch.Tensor:
        out = []
        for i in range(0, len(X), batch):
            r, m = _to_nchw(X[i : i + batch, ..., :3], X[i : i + batch, ..., 3])
            mean, _ = self.net_.encode_moments(torch.cat([r, m], dim=1))
            out.append(mean)
        return torch.cat(out)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, channels=4, multiple_of=DOWNSAMPLE)
        return (self._raw_latents(X) * self.scale_factor_).numpy()

    @torch.no_grad()
    def inverse_transform(self, Z, batch: int = 128) -> np.ndarray:
        check_is_fitted(self, "net_")
        Z = check_latents(Z, LATENT_CHANNELS)
        out = []
        for i in range(0, len(Z), batch):
            z = torch.as_tensor(Z[i : i + batch], dtype=nc.get_dtype()) / self.scale_factor_
            raw = self.net_.decode_raw(z)
            rgb = raw[:, :3].clamp(0.0, 1.0)
            prob = torch.sigmoid(raw[:, 3:])
            out.append(torch.cat([rgb, prob], dim=1).permute(0, 2, 3, 1).numpy())
        return np.concatenate(out)

    # convenience single-image API
    def encode(self, rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(rgb, np.float32), np.asarray(mask, np.float32)[..., None]], -1)
        return self.transform(x[None])[0]

    def decode(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z)
        if not np.all(np.isfinite(z)):
            raise nc.NonFiniteError("cannot decode a non-finite latent")
        out = self.inverse_transform(z[None])[0]
        return out[..., :3], out[..., 3]

    def white_latent(self, size: int = 64) -> np.ndarray:
        """Latent of a white image with an all-ones mask, the generation-branch input."""
        return self.encode(np.ones((size, size, 3), np.float32), np.ones((size, size), np.float32))

    def score(self, X, y=None) -> float:
        """Mean reconstruction PSNR over the RGB channels."""
        from .metrics import psnr

        X = check_images(X, channels=4, multiple_of=DOWNSAMPLE)
        rec = self.inverse_transform(self.transform(X))
        return float(np.mean([min(psnr(a[..., :3], b[..., :3]), 100.0) for a, b in zip(X, rec)]))

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        meta = {
            "kind": "mvae",
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "scale_factor": self.scale_factor_,
        }
        nc.save_checkpoint(path, nc.parameters_dict(self.net_), meta)

    @classmethod
    def load(cls, path) -> "MVAE":
        params, meta = nc.load_checkpoint(path)
        if meta.get("kind") != "mvae":
            raise ValueError(f"{path} is not an M-VAE checkpoint")
        p = dict(meta["params"])
        p["channels"] = tuple(p["channels"])
        model = cls(**p)
        model.net_ = model._init_net()
        nc.load_into(model.net_, params)
        model.net_.eval()
        model.scale_factor_ = float(meta["scale_factor"])
        return model


def stack_views(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(n,H,W,3) + (n,H,W) -> (n,H,W,4) float32."""
    return np.concatenate([np.asarray(rgb, np.float32), np.asarray(mask, np.float32)[..., None]], -1)


def mask_iou(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    p = np.asarray(pred) > threshold
    t = np.asarray(target) > 0.5
    union = np.count_nonzero(p | t)
    return 1.0 if union == 0 else np.count_nonzero(p & t) / union


def train_mvae(dataset, config: MvaeConfig, out_dir=None) -> tuple[MVAE, dict]:
    """Fit on all but the last ``holdout_objects`` objects and report held-out quality."""
    from .metrics import psnr

    n = len(dataset)
    hold = min(config.holdout_objects, n - 1) if n > 1 else 0
    rgb, mask = dataset.all_views()
    per = rgb.shape[0] // n
    split = (n - hold) * per
    X = stack_views(rgb, mask)
    model = MVAE(
        channels=config.channels,
        groups=config.groups,
        kl_weight=config.kl_weight,
        steps=config.steps,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        seed=config.seed,
        log_every=config.log_every,
    )
    t0 = time.time()
    model.fit(X[:split])
    held = X[split:] if hold else X[:split]
    rec = model.inverse_transform(model.transform(held))
    psnrs = [min(psnr(a[..., :3], b[..., :3]), 100.0) for a, b in zip(held, rec)]
    ious = [mask_iou(b[..., 3], a[..., 3]) for a, b in zip(held, rec)]
    lat = model.transform(X[:split])
    report = {
        "recon_psnr": float(np.mean(psnrs)),
        "mask_iou": float(np.mean(ious)),
        "heldout_images": int(len(held)),
        "latent_std_per_channel": [float(s) for s in lat.std(axis=(0, 2, 3))],
        "scale_factor": model.scale_factor_,
        "train_seconds": time.time() - t0,
        "initial_loss": float(np.mean(model.loss_curve_[:50])),
        "final_loss": float(np.mean(model.loss_curve_[-50:])),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "mvae.ckpt")
        (out / "mvae_report.json").write_text(json.dumps(report, indent=1))
        np.savetxt(out / "mvae_loss.csv", np.c_[np.arange(len(model.loss_curve_)), model.loss_curve_],
                   delimiter=",", header="step,loss", comments="", fmt=["%d", "%.6g"])
    return model, report

