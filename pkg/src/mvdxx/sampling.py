"""Reverse-process samplers and multi-view generation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .denoiser import N_COND_SLOTS, MultiViewBatch
from .geometry import Intrinsics, generation_view_grid
from .schedule import NoiseSchedule, add_noise, split_prediction
from .synthdata import RenderedView, save_mask_png, save_png
from .validation import check_condition_count, check_view_subset

Z0_CLAMP = 4.0
SAMPLERS = ("ddpm", "ddim")


def step_sequence(T: int, steps: int) -> np.ndarray:
    """Descending timesteps with trailing spacing; the first is always T-1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    return np.round(np.arange(T, 0, -T / steps)).astype(int) - 1


def _abar(schedule: NoiseSchedule, t: int) -> float:
    return 1.0 if t < 0 else float(schedule.alpha_bar[t])


def _estimates(z_t, prediction, t, schedule, clamp):
    z0, eps = split_prediction(z_t, prediction, t, schedule)
    z0 = z0.clamp(-clamp, clamp)
    # keep eps consistent with the clamped z0
    eps = (z_t - float(schedule.alpha_t[t]) * z0) / float(schedule.gamma_t[t])
    return z0, eps


def _finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {where}")
    return x


def ddpm_step(
    z_t: torch.Tensor,
    prediction: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    clamp: float = Z0_CLAMP,
) -> torch.Tensor:
    """Ancestral step t -> t_prev using the posterior q(z_prev | z_t, z0_hat).

    ``t_prev < 0`` means the final step: the posterior mean is returned with
    no added noise.
    """
    _finite(prediction, "ddpm prediction")
    z0, _ = _estimates(z_t, prediction, t, schedule, clamp)
    ab_t, ab_prev = _abar(schedule, t), _abar(schedule, t_prev)
    beta = 1.0 - ab_t / ab_prev
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * z0 + ct * z_t
    if t_prev < 0:
        return mean
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return _finite(mean + np.sqrt(var) * noise, "ddpm step")


def ddim_step(
    z_t: torch.Tensor,
    prediction: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    clamp: float = Z0_CLAMP,
) -> torch.Tensor:
    _finite(prediction, "ddim prediction")
    z0, eps = _estimates(z_t, prediction, t, schedule, clamp)
    ab_t, ab_prev = _abar(schedule, t), _abar(schedule, t_prev)
    sigma = eta * np.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)) if t_prev >= 0 else 0.0
    out = np.sqrt(ab_prev) * z0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
    if sigma > 0:
        out = out + sigma * torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return _finite(out, "ddim step")


def run_sampler(
    predict: Callable[[torch.Tensor, int], torch.Tensor],
    z_T: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int = 75,
    sampler: str = "ddpm",
    generator: torch.Generator | None = None,
    trajectory: list | None = None,
) -> torch.Tensor:
    """Integrate from z_T with ``predict(z_t, t)`` returning the network output."""
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}")
    ts = step_sequence(schedule.T, steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        pred = predict(z, int(t))
        if sampler == "ddpm":
            z = ddpm_step(z, pred, int(t), t_prev, schedule, generator)
        else:
            z = ddim_step(z, pred, int(t), t_prev, schedule)
        if trajectory is not None:
            trajectory.append(z.clone())
    return z


def point_mass_predictor(target: torch.Tensor, schedule: NoiseSchedule):
    """Exact denoiser for a data distribution concentrated on ``target``."""

    def predict(z_t: torch.Tensor, t: int) -> torch.Tensor:
        a, g = float(schedule.alpha_t[t]), float(schedule.gamma_t[t])
        eps = (z_t - a * target) / g
        if schedule.prediction_type == "velocity":
            return a * eps - g * target
        return eps

    return predict


@torch.no_grad()
def sample_latents(
    model,
    schedule: NoiseSchedule,
    cond_latents: torch.Tensor,
    white_latent: torch.Tensor,
    views: list[int],
    steps: int = 75,
    sampler: str = "ddpm",
    seed: int = 0,
) -> torch.Tensor:
    """Jointly denoise the requested grid views given N encoded condition views.

    cond_latents: [N, 4, h, w]. Returns [len(views), 4, h, w].
    Condition views are re-noised from their clean latents at every step.
    """
    n = check_condition_count(cond_latents.shape[0], N_COND_SLOTS)
    views = check_view_subset(views)
    m = len(views)
    gen = torch.Generator().manual_seed(int(seed))
    shape = cond_latents.shape[1:]
    dtype = next(model.parameters()).dtype
    cond_latents = cond_latents.to(dtype)
    cond_in = torch.cat([cond_latents, white_latent.to(dtype).expand(m, *shape)])[None]
    flags = torch.tensor([[1] * n + [0] * m])
    idx = torch.tensor([list(range(n)) + [N_COND_SLOTS + v for v in views]])
    z_gen = torch.randn((m, *shape), generator=gen, dtype=dtype)

    def predict(z, t):
        z_cond = add_noise(cond_latents, torch.randn(cond_latents.shape, generator=gen, dtype=dtype), t, schedule)
        batch = MultiViewBatch(
            torch.cat([z_cond, z])[None], cond_in, flags, idx, torch.tensor([t])
        )
        return model(batch)[0, n:]

    model.eval()
    return run_sampler(predict, z_gen, schedule, steps, sampler, gen)


def generate(
    model,
    schedule: NoiseSchedule,
    mvae,
    condition_images: list[tuple[np.ndarray, np.ndarray]],
    views_requested,
    steps: int = 75,
    sampler: str = "ddpm",
    seed: int = 0,
    azimuth_offset: float = 0.0,
) -> list[RenderedView]:
    """Generate RGB + mask images for the requested grid views.

    ``condition_images`` holds (rgb, mask) pairs, the reference view first.
    Poses of the outputs are on the grid aligned to ``azimuth_offset``.
    """
    check_condition_count(len(condition_images), N_COND_SLOTS)
    views = check_view_subset(views_requested)
    from .mvae import stack_views

    rgb = np.stack([c[0] for c in condition_images])
    mask = np.stack([c[1] for c in condition_images])
    cond = torch.as_tensor(mvae.transform(stack_views(rgb, mask)))
    size = rgb.shape[1]
    white = torch.as_tensor(mvae.white_latent(size))
    z = sample_latents(model, schedule, cond, white, views, steps, sampler, seed)
    decoded = mvae.inverse_transform(z.float().numpy())
    grid = generation_view_grid(azimuth_offset)
    K = Intrinsics(size, size)
    return [
        RenderedView(d[..., :3], d[..., 3], grid[v], K) for v, d in zip(views, decoded)
    ]


def save_run(out_dir, views: list[int], rendered: list[RenderedView], extra: dict | None = None) -> dict:
    """Write view PNGs, mask PNGs (mask probability > 0.5) and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for v, r in zip(views, rendered):
        save_png(r.rgb, out / f"view_{v:02d}.png")
        save_mask_png(r.mask, out / f"view_{v:02d}_mask.png")
        records.append(
            {"view": v, "rgb": f"view_{v:02d}.png", "mask": f"view_{v:02d}_mask.png", "pose": r.pose.to_json()}
        )
    manifest = {"views": records, "intrinsics": rendered[0].intrinsics.to_json(), **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
