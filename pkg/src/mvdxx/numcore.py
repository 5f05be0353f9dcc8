"""Differentiable tensor primitives, a finite-difference gradient checker and
the single-file parameter checkpoint format.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch autograd.
The primitive set is deliberately small: everything the autoencoder and the
denoiser need is built from the functions below.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_state = {"dtype": torch.float32, "debug": False}


class NonFiniteError(FloatingPointError):
    pass


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]
    torch.set_default_dtype(_DTYPES[name])


def get_dtype() -> torch.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global float width (64-bit for gradient checks)."""
    prev_state, prev_default = _state["dtype"], torch.get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = prev_state
        torch.set_default_dtype(prev_default)


def set_debug(flag: bool) -> None:
    _state["debug"] = bool(flag)


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=get_dtype()).clone()
    t.requires_grad_(requires_grad)
    return t


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def _debug(x: torch.Tensor, name: str) -> torch.Tensor:
    if _state["debug"]:
        check_finite(x, name)
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _debug(a @ b, "matmul")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """x @ weight.T + bias with weight shaped [out, in]."""
    y = matmul(x, weight.transpose(-1, -2))
    return y + bias if bias is not None else y


def silu(x: torch.Tensor) -> torch.Tensor:
    return _debug(x * torch.sigmoid(x), "silu")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """softmax(q k^T / sqrt(D)) v over the second-to-last axis.

    Leading axes are batch axes. ``key_mask`` (bool, [..., S_k]) excludes keys
    where it is False.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}"
        )
    if k.shape[-2] < 1:
        raise ValueError("attention needs at least one key")
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return _debug(matmul(softmax(scores), v), "attention")


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of [C_in,H,W] (or [N,C_in,H,W]) with [C_out,C_in,k,k]."""
    k = kernel.shape[-1]
    if k % 2 == 0 or kernel.shape[-2] != k:
        raise ValueError(f"kernel must be square with odd size, got {tuple(kernel.shape)}")
    h, w = x.shape[-2:]
    for extent in (h, w):
        if (extent + 2 * padding - k) % stride:
            raise ValueError(
                f"non-integral output extent: ({extent}+2*{padding}-{k})/{stride}"
            )
    if x.shape[-3] != kernel.shape[1]:
        raise ValueError(f"conv2d expects {kernel.shape[1]} input channels, got {x.shape[-3]}")
    single = x.dim() == 3
    y = F.conv2d(x[None] if single else x, kernel, bias, stride=stride, padding=padding)
    return _debug(y[0] if single else y, "conv2d")


def group_norm(
    x: torch.Tensor,
    groups: int,
    gamma: torch.Tensor | None = None,
    beta: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Normalise each channel group of [..., C, H, W] to zero mean, unit variance."""
    c, h, w = x.shape[-3:]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    lead = x.shape[:-3]
    g = x.reshape(*lead, groups, (c // groups) * h * w)
    mu = g.mean(dim=-1, keepdim=True)
    var = ((g - mu) ** 2).mean(dim=-1, keepdim=True)
    y = ((g - mu) / torch.sqrt(var + eps)).reshape(x.shape)
    if gamma is not None:
        y = y * gamma.reshape(c, 1, 1)
    if beta is not None:
        y = y + beta.reshape(c, 1, 1)
    return _debug(y, "group_norm")


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def space_to_depth(x: torch.Tensor) -> torch.Tensor:
    """[..., C, H, W] -> [..., 4C, H/2, W/2]; a pure reshape/permute."""
    *lead, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"space_to_depth needs even extents, got {h}x{w}")
    y = x.reshape(*lead, c, h // 2, 2, w // 2, 2)
    n = len(lead)
    y = y.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return y.reshape(*lead, 4 * c, h // 2, w // 2)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    +-eps. ``max_coords`` limits the number of coordinates probed per
    parameter (sampled without replacement).
    """
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar function")
    check_finite(out.detach(), "grad_check objective")
    analytic = torch.autograd.grad(out, list(params), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, (p, g) in enumerate(zip(params, analytic)):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and len(coords) > max_coords:
            coords = rng.choice(coords, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite objective at param {pi} coord {i}")
            fd = (fp - fm) / (2 * eps)
            ad = g.reshape(-1)[i].item()
            worst = max(worst, abs(ad - fd) / max(1e-8, abs(ad) + abs(fd)))
    return worst


# -- checkpoint file ------------------------------------------------------
# layout: u64 little-endian header length | JSON header | raw little-endian payload

def save_checkpoint(path, params: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    names, shapes, offsets, chunks = [], [], [], []
    offset = 0
    dtype = "float32"
    if any(t.dtype == torch.float64 for t in params.values()):
        dtype = "float64"
    np_dtype = np.dtype(dtype).newbyteorder("<")
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype(np_dtype)
        names.append(name)
        shapes.append(list(arr.shape))
        offsets.append(offset)
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "names": names,
        "shapes": shapes,
        "dtype": dtype,
        "offsets": offsets,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n])
    payload = memoryview(data)[8 + n :]
    np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
    params = {}
    for name, shape, off in zip(header["names"], header["shapes"], header["offsets"]):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=off).reshape(shape)
        params[name] = torch.from_numpy(arr.astype(np.dtype(header["dtype"])).copy())
    return params, header.get("meta", {})


def parameters_dict(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = module.state_dict()
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise KeyError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in params.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k}: {tuple(own[k].shape)} vs {tuple(v.shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in params.items()})


def count_parameters(params: Iterable[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)
