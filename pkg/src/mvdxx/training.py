"""View dropout, condition sampling, the multi-view loss and the staged trainer."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import numcore as nc
from .denoiser import (
    N_COND_SLOTS,
    N_GEN_SLOTS,
    DenoiserConfig,
    DenoiserModel,
    MultiViewBatch,
)
from .schedule import NoiseSchedule, add_noise, linear_schedule, rescale_zero_snr, training_target
from .validation import PrerequisiteError, check_is_fitted

log = logging.getLogger(__name__)

STAGE_RULES = {1: ("epsilon", "single"), 2: ("velocity", "single"), 3: ("velocity", "mixed")}


@dataclass
class StageConfig:
    stage: int = 1
    prediction_type: str = "epsilon"
    condition_mode: str = "single"
    steps: int = 2000
    batch_size: int = 4
    keep_views: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in STAGE_RULES:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        want = STAGE_RULES[self.stage]
        if (self.prediction_type, self.condition_mode) != want:
            raise ValueError(
                f"stage {self.stage} requires prediction_type={want[0]!r}, condition_mode={want[1]!r}"
            )
        if not 1 <= self.keep_views <= N_GEN_SLOTS:
            raise ValueError(f"keep_views must be in [1, {N_GEN_SLOTS}]")

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "StageConfig":
        pred, mode = STAGE_RULES[stage]
        return cls(stage=stage, prediction_type=pred, condition_mode=mode, **overrides)

    def schedule(self) -> NoiseSchedule:
        """Linear schedule; the velocity stages also get a zero terminal SNR."""
        s = linear_schedule(self.T, self.beta_start, self.beta_end, self.prediction_type)
        return rescale_zero_snr(s) if self.prediction_type == "velocity" else s

    def to_json(self) -> dict:
        return asdict(self)


def dropout_views(m_total: int, keep: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of ``keep`` out of ``m_total`` view slots, sorted."""
    if not 1 <= keep <= m_total:
        raise ValueError(f"keep must be in [1, {m_total}], got {keep}")
    return np.sort(rng.choice(m_total, size=keep, replace=False))


def sample_conditions(
    mode: str, rng: np.random.Generator, n_available: int = N_COND_SLOTS
) -> np.ndarray:
    """Condition view indices; the reference view 0 always comes first.

    ``single`` -> [0]. ``mixed`` -> [0] with probability 1/2, otherwise N views
    with N uniform in [2, n_available].
    """
    if mode == "single":
        return np.array([0])
    if mode != "mixed":
        raise ValueError(f"unknown condition mode {mode!r}")
    if n_available < 2 or rng.random() < 0.5:
        return np.array([0])
    n = int(rng.integers(2, n_available + 1))
    rest = np.sort(rng.choice(np.arange(1, n_available), size=n - 1, replace=False))
    return np.concatenate([[0], rest])


def mvldm_loss(
    predictions: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean squared error over batch, views, channels and pixels (padded views excluded)."""
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(predictions.shape)} vs {tuple(targets.shape)}")
    sq = (predictions - targets) ** 2
    if valid is None:
        return sq.mean()
    w = valid.to(sq.dtype).reshape(*valid.shape, *([1] * (sq.dim() - valid.dim())))
    per_view = sq[0, 0].numel()
    return (sq * w).sum() / (w.sum() * per_view)


@dataclass
class LatentSet:
    """Encoded dataset: cond [n, 10, 4, h, w], target [n, 32, 4, h, w], white [4, h, w]."""

    cond: torch.Tensor
    target: torch.Tensor
    white: torch.Tensor

    def __len__(self):
        return self.cond.shape[0]

    def subset(self, ids) -> "LatentSet":
        ids = list(ids)
        return LatentSet(self.cond[ids], self.target[ids], self.white)

    def save(self, path) -> None:
        np.savez(path, cond=self.cond.numpy(), target=self.target.numpy(), white=self.white.numpy())

    @classmethod
    def load(cls, path) -> "LatentSet":
        d = np.load(path)
        return cls(*(torch.from_numpy(d[k]) for k in ("cond", "target", "white")))


def encode_dataset(dataset, mvae) -> LatentSet:
    from .mvae import stack_views

    n = len(dataset)

    def enc(rgb, mask):
        k = rgb.shape[1]
        x = stack_views(rgb.reshape(-1, *rgb.shape[2:]) / 255.0, mask.reshape(-1, *mask.shape[2:]))
        z = mvae.transform(x)
        return torch.from_numpy(z.reshape(n, k, *z.shape[1:]))

    white = torch.from_numpy(mvae.white_latent(dataset.resolution))
    return LatentSet(enc(dataset.cond_rgb, dataset.cond_mask), enc(dataset.target_rgb, dataset.target_mask), white)


def make_batch(
    data: LatentSet,
    object_ids,
    config: StageConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    gen: torch.Generator,
) -> tuple[MultiViewBatch, torch.Tensor]:
    """Noised multi-view batch and its regression targets.

    Condition views sit in the leading slots, padded to the largest condition
    count in the batch; the kept generation views follow.
    """
    dtype = nc.get_dtype()
    conds = [sample_conditions(config.condition_mode, rng, data.cond.shape[1]) for _ in object_ids]
    gens = [dropout_views(N_GEN_SLOTS, config.keep_views, rng) for _ in object_ids]
    n_max = max(len(c) for c in conds)
    V = n_max + config.keep_views
    B = len(object_ids)
    shape = data.cond.shape[2:]
    z0 = torch.zeros((B, V, *shape), dtype=dtype)
    cond_in = torch.zeros((B, V, *shape), dtype=dtype)
    flags = torch.zeros((B, V), dtype=torch.long)
    idx = torch.full((B, V), N_COND_SLOTS, dtype=torch.long)
    valid = torch.zeros((B, V), dtype=torch.bool)
    for b, (o, c, g) in enumerate(zip(object_ids, conds, gens)):
        n = len(c)
        z0[b, :n] = data.cond[o, c]
        cond_in[b, :n] = data.cond[o, c]
        flags[b, :n_max] = 1
        idx[b, :n_max] = torch.arange(n_max)
        valid[b, :n] = True
        z0[b, n_max:] = data.target[o, g]
        cond_in[b, n_max:] = data.white
        idx[b, n_max:] = torch.as_tensor(g + N_COND_SLOTS)
        valid[b, n_max:] = True
    t = torch.as_tensor(rng.integers(0, schedule.T, size=B))
    eps = torch.randn(z0.shape, generator=gen, dtype=dtype)
    z_t = add_noise(z0, eps, t.numpy(), schedule)
    target = training_target(z0, eps, t.numpy(), schedule)
    return MultiViewBatch(z_t, cond_in, flags, idx, t, valid), target


def save_model(path, model: DenoiserModel, schedule: NoiseSchedule, stage: int, extra: dict | None = None) -> None:
    meta = {
        "kind": "denoiser",
        "config": model.config.to_json(),
        "schedule": schedule.to_json(),
        "stage": stage,
        **(extra or {}),
    }
    nc.save_checkpoint(path, nc.parameters_dict(model), meta)


def load_model(path) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    params, meta = nc.load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    model = DenoiserModel(DenoiserConfig(**meta["config"]))
    nc.load_into(model, params)
    return model, NoiseSchedule.from_json(meta["schedule"]), meta


def smoothed(curve, window: int = 50) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` entries."""
    curve = np.asarray(curve, dtype=np.float64)
    w = max(1, min(window, len(curve)))
    return float(curve[:w].mean()), float(curve[-w:].mean())


def train_stage(
    data: LatentSet,
    config: StageConfig,
    out_dir=None,
    init_checkpoint=None,
    model_config: DenoiserConfig | None = None,
    model: DenoiserModel | None = None,
) -> tuple[DenoiserModel, list[dict]]:
    """Train one stage. Stages 2 and 3 start from the previous stage's checkpoint.

    Returns the model and the loss curve as records {step, loss, lr}.
    """
    if config.stage > 1 and init_checkpoint is None and model is None:
        raise PrerequisiteError(
            f"stage {config.stage} needs the stage {config.stage - 1} checkpoint (init_checkpoint)"
        )
    if init_checkpoint is not None:
        if not Path(init_checkpoint).exists():
            raise PrerequisiteError(f"missing stage {config.stage - 1} checkpoint: {init_checkpoint}")
        model, _, meta = load_model(init_checkpoint)
        if meta.get("stage") != config.stage - 1:
            raise PrerequisiteError(
                f"stage {config.stage} must start from a stage {config.stage - 1} checkpoint, "
                f"got stage {meta.get('stage')}"
            )
    elif model is None:
        model = DenoiserModel(model_config or DenoiserConfig(seed=config.seed))
    schedule = config.schedule()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, config.steps))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"stage{config.stage}_config.json").write_text(json.dumps(config.to_json(), indent=1))
    ckpt = out / f"stage{config.stage}.ckpt" if out is not None else None

    curve: list[dict] = []
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    model.train()
    t0 = time.time()
    for step in range(config.steps):
        ids = rng.integers(len(data), size=config.batch_size)
        batch, target = make_batch(data, ids, config, schedule, rng, gen)
        try:
            loss = mvldm_loss(model(batch), target, batch.valid)
            finite = bool(torch.isfinite(loss))
        except nc.NonFiniteError as e:
            finite, reason = False, str(e)
        else:
            reason = "non-finite loss"
        if not finite:
            model.load_state_dict(last_good)
            if ckpt is not None:
                save_model(ckpt, model, schedule, config.stage, {"aborted_at": step})
            raise nc.NonFiniteError(f"training aborted at step {step} ({reason}); last good weights restored")
        lr = opt.param_groups[0]["lr"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        curve.append({"step": step, "loss": loss.item(), "lr": lr})
        if step % config.log_every == 0:
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
            log.info("stage %d step %d loss %.4f (%.0fs)", config.stage, step, loss.item(), time.time() - t0)
    model.eval()
    if out is not None:
        save_model(ckpt, model, schedule, config.stage)
        with open(out / f"stage{config.stage}_loss.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "lr"])
            w.writeheader()
            w.writerows(curve)
    return model, curve


class MultiViewDiffusion(BaseEstimator):
    """Estimator wrapper around one training stage and the joint sampler.

    ``fit`` takes a :class:`LatentSet`. ``predict`` takes condition latents of
    shape (N, 4, h, w) and returns generated latents for ``views``.
    """

    def __init__(
        self,
        stage: int = 1,
        steps: int = 2000,
        batch_size: int = 4,
        keep_views: int = 8,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.01,
        widths=(32, 64),
        emb_dim: int = 64,
        groups: int = 8,
        seed: int = 0,
        init_checkpoint=None,
        sample_steps: int = 75,
        sampler: str = "ddpm",
    ):
        self.stage = stage
        self.steps = steps
        self.batch_size = batch_size
        self.keep_views = keep_views
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.widths = widths
        self.emb_dim = emb_dim
        self.groups = groups
        self.seed = seed
        self.init_checkpoint = init_checkpoint
        self.sample_steps = sample_steps
        self.sampler = sampler

    def stage_config(self) -> StageConfig:
        return StageConfig.for_stage(
            self.stage,
            steps=self.steps,
            batch_size=self.batch_size,
            keep_views=self.keep_views,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def fit(self, X: LatentSet, y=None, out_dir=None):
        if not isinstance(X, LatentSet):
            raise TypeError(f"fit expects a LatentSet, got {type(X).__name__}")
        config = self.stage_config()
        mc = DenoiserConfig(widths=tuple(self.widths), emb_dim=self.emb_dim, groups=self.groups, seed=self.seed)
        self.model_, curve = train_stage(X, config, out_dir, self.init_checkpoint, model_config=mc)
        self.schedule_ = config.schedule()
        self.white_latent_ = X.white
        self.loss_curve_ = [r["loss"] for r in curve]
        return self

    def predict(self, X, views=range(8)) -> np.ndarray:
        from .sampling import sample_latents

        check_is_fitted(self, "model_")
        cond = torch.as_tensor(np.asarray(X))
        if cond.dim() != 4 or cond.shape[1] != 4:
            raise ValueError(f"expected condition latents of shape (N, 4, h, w), got {tuple(cond.shape)}")
        with torch.no_grad():
            z = sample_latents(
                self.model_, self.schedule_, cond, self.white_latent_, list(views),
                self.sample_steps, self.sampler, self.seed,
            )
        return z.numpy()
