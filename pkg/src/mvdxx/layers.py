"""Parameter containers shared by the autoencoder and the denoiser.

Each module owns its weights and routes the arithmetic through ``numcore``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numcore as nc


def _uniform(shape, fan_in: int, gen: torch.Generator | None = None) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    w = torch.empty(shape, dtype=nc.get_dtype()).uniform_(-bound, bound, generator=gen)
    return nn.Parameter(w)


class Conv(nn.Module):
    """Same-padded convolution. ``stride=2`` folds each 2x2 patch into channels
    first, so the convolution itself always runs at stride 1."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, zero: bool = False):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.stride, self.padding = stride, k // 2
        c_eff = c_in * stride * stride
        self.weight = _uniform((c_out, c_eff, k, k), c_eff * k * k)
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=nc.get_dtype()))
        if zero:
            nn.init.zeros_(self.weight)

    def forward(self, x):
        if self.stride == 2:
            x = nc.space_to_depth(x)
        return nc.conv2d(x, self.weight, self.bias, 1, self.padding)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        super().__init__()
        self.weight = _uniform((d_out, d_in), d_in)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=nc.get_dtype())) if bias else None
        if zero:
            nn.init.zeros_(self.weight)

    def forward(self, x):
        return nc.linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.gamma = nn.Parameter(torch.ones(channels, dtype=nc.get_dtype()))
        self.beta = nn.Parameter(torch.zeros(channels, dtype=nc.get_dtype()))

    def forward(self, x):
        return nc.group_norm(x, self.groups, self.gamma, self.beta)


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv twice with a skip; optional per-sample additive
    embedding injected between the two convolutions."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int | None = None, groups: int = 8):
        super().__init__()
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv(c_in, c_out)
        self.emb = Linear(emb_dim, c_out) if emb_dim else None
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv(c_out, c_out)
        self.skip = Conv(c_in, c_out, k=1) if c_in != c_out else None

    def forward(self, x, emb=None):
        h = self.conv1(nc.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(nc.silu(emb))[..., None, None]
        h = self.conv2(nc.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)
