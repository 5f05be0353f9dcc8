"""Two-branch multi-view denoiser.

Every view (condition or generation) runs through the same UNet weights. The
views of one example talk to each other only through global self-attention,
where the spatial tokens of all views form a single sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import numcore as nc
from .layers import Conv, GroupNorm, Linear, ResBlock

N_COND_SLOTS = 10
N_GEN_SLOTS = 32
N_VIEW_EMBEDDINGS = N_COND_SLOTS + N_GEN_SLOTS
LATENT_CHANNELS = 4
INPUT_CHANNELS = 2 * LATENT_CHANNELS + 1


@dataclass
class DenoiserConfig:
    widths: tuple[int, ...] = (32, 64)
    emb_dim: int = 64
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 2:
            raise ValueError("the denoiser has exactly two resolution levels")

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class MultiViewBatch:
    """Per-example views. Axis 1 holds condition views first, then generation views.

    ``valid`` marks real views; padded slots (used when examples in one batch
    have different condition counts) are ignored by attention and the loss.
    """

    latents: torch.Tensor
    cond_latents: torch.Tensor
    branch_flags: torch.Tensor
    view_indices: torch.Tensor
    t: torch.Tensor
    valid: torch.Tensor | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = torch.ones(self.branch_flags.shape, dtype=torch.bool)
        self.validate()

    @property
    def n_views(self) -> int:
        return self.latents.shape[1]

    def validate(self) -> None:
        B, V = self.latents.shape[:2]
        if self.latents.dim() != 5 or self.latents.shape[2] != LATENT_CHANNELS:
            raise ValueError(f"latents must be [B, V, 4, h, w], got {tuple(self.latents.shape)}")
        if self.cond_latents.shape != self.latents.shape:
            raise ValueError("cond_latents must match latents in shape")
        for name in ("branch_flags", "view_indices", "valid"):
            if tuple(getattr(self, name).shape) != (B, V):
                raise ValueError(f"{name} must be [{B}, {V}]")
        if tuple(self.t.shape) != (B,):
            raise ValueError(f"t must be [{B}]")
        flags = self.branch_flags.bool()
        idx = self.view_indices
        valid = self.valid
        if bool(((idx < 0) | (idx >= N_VIEW_EMBEDDINGS))[valid].any()):
            raise ValueError("view index out of range [0, 42)")
        if bool((flags & (idx >= N_COND_SLOTS) & valid).any()):
            raise ValueError("condition views must use view indices < 10")
        if bool((~flags & (idx < N_COND_SLOTS) & valid).any()):
            raise ValueError("generation views must use view indices >= 10")
        n_cond = (flags & valid).sum(1)
        if bool(((n_cond < 1) | (n_cond > N_COND_SLOTS)).any()):
            raise ValueError("every example needs between 1 and 10 condition views")

    def select(self, order: torch.Tensor) -> "MultiViewBatch":
        """Reorder / subset the view axis with the same index list for every example."""
        return MultiViewBatch(
            self.latents[:, order],
            self.cond_latents[:, order],
            self.branch_flags[:, order],
            self.view_indices[:, order],
            self.t,
            self.valid[:, order],
        )


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal frequency encoding, [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=nc.get_dtype()) / half)
    args = t.to(nc.get_dtype())[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def assemble_input(batch: MultiViewBatch) -> torch.Tensor:
    """Concatenate noisy latent, condition latent and branch flag: [B, V, 9, h, w]."""
    B, V, _, h, w = batch.latents.shape
    flag = batch.branch_flags.to(batch.latents.dtype)[:, :, None, None, None].expand(B, V, 1, h, w)
    return torch.cat([batch.latents, batch.cond_latents, flag], dim=2)


class GlobalSelfAttention(nn.Module):
    """Self-attention over the concatenated spatial tokens of all views."""

    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.norm = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, bias=False)
        self.k = Linear(channels, channels, bias=False)
        self.v = Linear(channels, channels, bias=False)
        self.out = Linear(channels, channels)
        self.last_token_count = 0

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """x: [B, V, C, h, w]; valid: [B, V] bool."""
        B, V, C, h, w = x.shape
        tokens = self.norm(x).permute(0, 1, 3, 4, 2).reshape(B, V * h * w, C)
        self.last_token_count = tokens.shape[1]
        if self.last_token_count != V * h * w:
            raise AssertionError("token count must equal views * height * width")
        key_mask = valid[:, :, None].expand(B, V, h * w).reshape(B, V * h * w)
        y = nc.attention(self.q(tokens), self.k(tokens), self.v(tokens), key_mask)
        y = self.out(y).reshape(B, V, h, w, C).permute(0, 1, 4, 2, 3)
        return x + y


class CrossAttention(nn.Module):
    """Every spatial token of every view attends to the condition tokens."""

    def __init__(self, channels: int, context_dim: int, groups: int = 8):
        super().__init__()
        self.norm = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, bias=False)
        self.k = Linear(context_dim, channels, bias=False)
        self.v = Linear(context_dim, channels, bias=False)
        self.out = Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor) -> torch.Tensor:
        B, V, C, h, w = x.shape
        tokens = self.norm(x).permute(0, 1, 3, 4, 2).reshape(B, V * h * w, C)
        y = nc.attention(self.q(tokens), self.k(context), self.v(context), context_mask)
        y = self.out(y).reshape(B, V, h, w, C).permute(0, 1, 4, 2, 3)
        return x + y


class Level(nn.Module):
    """Residual conv block, global self-attention, then cross-attention."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int):
        super().__init__()
        self.res = ResBlock(c_in, c_out, emb_dim, groups)
        self.self_attn = GlobalSelfAttention(c_out, groups)
        self.cross_attn = CrossAttention(c_out, emb_dim, groups)

    def forward(self, x, emb, valid, context, context_mask):
        B, V = x.shape[:2]
        h = self.res(x.flatten(0, 1), emb.flatten(0, 1))
        h = h.reshape(B, V, *h.shape[1:])
        h = self.self_attn(h, valid)
        return self.cross_attn(h, context, context_mask)


class ConditionEncoder(nn.Module):
    """Pools each condition latent to a single context token."""

    def __init__(self, width: int, emb_dim: int, groups: int):
        super().__init__()
        self.conv1 = Conv(LATENT_CHANNELS, width)
        self.norm = GroupNorm(width, groups)
        self.conv2 = Conv(width, emb_dim)
        self.proj = Linear(emb_dim, emb_dim)

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        """cond: [B, N, 4, h, w] -> [B, N, emb_dim]."""
        B, N = cond.shape[:2]
        h = self.conv1(cond.flatten(0, 1))
        h = self.conv2(nc.silu(self.norm(h)))
        pooled = h.mean(dim=(-2, -1))
        return self.proj(nc.silu(pooled)).reshape(B, N, -1)


class DenoiserModel(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config = config or DenoiserConfig()
        torch.manual_seed(config.seed)
        w0, w1 = config.widths
        E, G = config.emb_dim, config.groups
        self.time_mlp1 = Linear(w0, E)
        self.time_mlp2 = Linear(E, E)
        self.view_embeddings = nn.Parameter(torch.randn(N_VIEW_EMBEDDINGS, E, dtype=nc.get_dtype()))
        self.embed_scale = nn.Parameter(torch.zeros((), dtype=nc.get_dtype()))
        self.cond_encoder = ConditionEncoder(w0, E, G)
        self.input_proj = Conv(INPUT_CHANNELS, w0, k=1)
        self.down = Level(w0, w0, E, G)
        self.downsample = Conv(w0, w1, stride=2)
        self.mid = Level(w1, w1, E, G)
        self.upsample = Conv(w1, w0)
        self.up = Level(2 * w0, w0, E, G)
        self.out_norm = GroupNorm(w0, G)
        self.out_conv = Conv(w0, LATENT_CHANNELS, zero=True)

    @property
    def attention_layers(self) -> list[GlobalSelfAttention]:
        return [self.down.self_attn, self.mid.self_attn, self.up.self_attn]

    def view_embedding(self, view_index) -> torch.Tensor:
        idx = torch.as_tensor(view_index)
        if bool(((idx < 0) | (idx >= N_VIEW_EMBEDDINGS)).any()):
            raise IndexError(f"view index out of range [0, {N_VIEW_EMBEDDINGS})")
        return self.embed_scale * self.view_embeddings[idx]

    def encode_condition(self, batch: MultiViewBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Context tokens from the real condition views only, with their key mask."""
        is_cond = batch.branch_flags.bool() & batch.valid
        n_max = int(is_cond.sum(1).max())
        if not 1 <= n_max <= N_COND_SLOTS:
            raise ValueError(f"condition count must be in [1, {N_COND_SLOTS}]")
        # condition views are stored first, so the leading slots carry them
        cond = batch.cond_latents[:, :n_max]
        mask = is_cond[:, :n_max]
        return self.cond_encoder(cond), mask

    def forward(self, batch: MultiViewBatch) -> torch.Tensor:
        B, V, _, h, w = batch.latents.shape
        context, context_mask = self.encode_condition(batch)
        temb = self.time_mlp2(nc.silu(self.time_mlp1(timestep_embedding(batch.t, self.config.widths[0]))))
        emb = temb[:, None, :] + self.view_embedding(batch.view_indices)
        valid = batch.valid

        x = self.input_proj(assemble_input(batch).flatten(0, 1)).reshape(B, V, -1, h, w)
        skip = self._checked(self.down(x, emb, valid, context, context_mask), 0)
        d = self.downsample(skip.flatten(0, 1))
        d = d.reshape(B, V, *d.shape[1:])
        m = self._checked(self.mid(d, emb, valid, context, context_mask), 1)
        u = self.upsample(nc.upsample2x(m.flatten(0, 1))).reshape(B, V, -1, h, w)
        u = self._checked(self.up(torch.cat([u, skip], dim=2), emb, valid, context, context_mask), 2)
        out = self.out_conv(nc.silu(self.out_norm(u.flatten(0, 1))))
        return out.reshape(B, V, LATENT_CHANNELS, h, w)

    @staticmethod
    def _checked(x: torch.Tensor, block: int) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise nc.NonFiniteError(f"non-finite activations after block {block}")
        return x


def token_count(n_views: int, height: int, width: int) -> int:
    return n_views * height * width

