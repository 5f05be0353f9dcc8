"""Fast built-in checks: schedule identities, gradient checks, attention properties.

Each check returns a record {name, ok, value, detail}. The acceptance tests and
``mvdxx selftest`` both run them.
"""

from __future__ import annotations

import numpy as np
import torch

from . import numcore as nc
from .denoiser import N_COND_SLOTS, DenoiserConfig, DenoiserModel, MultiViewBatch
from .schedule import add_noise, from_velocity, linear_schedule, rescale_zero_snr, snr, to_velocity

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-3


def _record(name: str, ok: bool, value, detail: str) -> dict:
    return {"name": name, "ok": bool(ok), "value": value, "detail": detail}


def schedule_checks(seed: int = 0) -> list[dict]:
    out = []
    base = linear_schedule(1000)
    zs = rescale_zero_snr(base)
    for name, s in (("linear", base), ("zero_snr", zs)):
        err = float(np.max(np.abs(s.alpha_t**2 + s.gamma_t**2 - 1.0)))
        out.append(_record(f"schedule.{name}.unit_norm", err <= 1e-6, err, f"max |a^2+g^2-1| = {err:.2e}"))
        r = np.array([snr(t, s) for t in range(s.T)])
        dec = bool(np.all(np.diff(r) < 0))
        out.append(_record(f"schedule.{name}.snr_decreasing", dec, dec, "SNR strictly decreasing"))
    last = float(zs.alpha_t[-1])
    out.append(_record("schedule.zero_snr.terminal", last == 0.0, last, f"terminal sqrt(abar) = {last!r}"))
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with nc.precision("float64"):
        for s in (base, zs):
            z0 = torch.randn(64, 4, 8, 8, generator=gen, dtype=torch.float64)
            eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
            t = torch.randint(0, s.T, (64,), generator=gen).numpy()
            z0r, epsr = from_velocity(add_noise(z0, eps, t, s), to_velocity(z0, eps, t, s), t, s)
            worst = max(worst, (z0r - z0).abs().max().item(), (epsr - eps).abs().max().item())
    out.append(_record("schedule.velocity_roundtrip", worst <= 1e-6, worst, f"max roundtrip error {worst:.2e}"))
    return out


def toy_model(width: int = 8, seed: int = 0, perturb: bool = True) -> DenoiserModel:
    """Width-8 denoiser in the current precision; ``perturb`` un-zeros the
    zero-initialised output conv and view-embedding scale so every parameter
    gets a non-trivial gradient."""
    model = DenoiserModel(DenoiserConfig(widths=(width, width), emb_dim=width, groups=2, seed=seed))
    if perturb:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            model.out_conv.weight.copy_(0.1 * torch.randn(model.out_conv.weight.shape, generator=g, dtype=model.out_conv.weight.dtype))
            model.embed_scale.fill_(0.5)
    return model


def toy_batch(
    n_cond: int = 1, n_gen: int = 1, size: int = 4, seed: int = 0, batch: int = 1
) -> MultiViewBatch:
    g = torch.Generator().manual_seed(seed)
    dt = nc.get_dtype()
    V = n_cond + n_gen
    lat = torch.randn(batch, V, 4, size, size, generator=g, dtype=dt)
    cond = torch.randn(batch, V, 4, size, size, generator=g, dtype=dt)
    flags = torch.tensor([[1] * n_cond + [0] * n_gen] * batch)
    gen_idx = torch.randperm(32, generator=g)[:n_gen] + N_COND_SLOTS
    idx = torch.cat([torch.arange(n_cond), gen_idx])[None].repeat(batch, 1)
    t = torch.randint(0, 1000, (batch,), generator=g)
    return MultiViewBatch(lat, cond, flags, idx, t)


def primitive_gradient_checks(seed: int = 0) -> list[dict]:
    out = []
    with nc.precision("float64"):
        g = torch.Generator().manual_seed(seed)

        def rnd(*shape):
            return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)

        cases = {}
        a, b = rnd(3, 4), rnd(4, 2)
        cases["matmul"] = (lambda: (nc.matmul(a, b) ** 2).sum(), [a, b])
        x, w, bias = rnd(5, 3), rnd(4, 3), rnd(4)
        cases["linear"] = (lambda: (nc.linear(x, w, bias) ** 2).sum(), [x, w, bias])
        s = rnd(2, 6)
        cases["silu"] = (lambda: (nc.silu(s) ** 2).sum(), [s])
        sm = rnd(3, 5)
        wsm = torch.randn(3, 5, generator=g, dtype=torch.float64)
        cases["softmax"] = (lambda: (nc.softmax(sm) * wsm).sum(), [sm])
        q, k, v = rnd(3, 4), rnd(3, 4), rnd(3, 4)
        cases["attention"] = (lambda: nc.attention(q, k, v).sum() + (nc.attention(q, k, v) ** 2).sum(), [q, k, v])
        ci, ck, cb = rnd(2, 5, 5), rnd(3, 2, 3, 3), rnd(3)
        cases["conv2d"] = (lambda: (nc.conv2d(ci, ck, cb, 1, 1) ** 2).sum(), [ci, ck, cb])
        cases["conv2d_stride2"] = (lambda: (nc.conv2d(ci, ck, cb, 2, 0) ** 2).sum(), [ci, ck, cb])
        gx, gg, gb = rnd(4, 3, 3), rnd(4), rnd(4)
        gw = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
        cases["group_norm"] = (lambda: (nc.group_norm(gx, 2, gg, gb) * gw).sum(), [gx, gg, gb])
        u = rnd(2, 3, 3)
        uw = torch.randn(2, 6, 6, generator=g, dtype=torch.float64)
        cases["upsample2x"] = (lambda: (nc.upsample2x(u) * uw).sum(), [u])
        sd = rnd(2, 4, 4)
        sw = torch.randn(8, 2, 2, generator=g, dtype=torch.float64)
        cases["space_to_depth"] = (lambda: (nc.space_to_depth(sd) * sw).sum(), [sd])
        r1, r2 = rnd(2, 3), rnd(2, 2)
        cw = torch.randn(5, 2, generator=g, dtype=torch.float64)
        cases["reshape_concat"] = (
            lambda: (torch.cat([r1.reshape(3, 2), r2.reshape(2, 2)]) * cw).sum(),
            [r1, r2],
        )
        for name, (f, params) in cases.items():
            err = nc.grad_check(f, params, eps=1e-6)
            out.append(_record(f"grad.{name}", err < PRIMITIVE_TOL, err, f"max rel error {err:.2e}"))
    return out


def model_gradient_check(seed: int = 0, max_coords: int = 3) -> dict:
    with nc.precision("float64"):
        model = toy_model(seed=seed)
        batch = toy_batch(1, 1, seed=seed)
        target = torch.randn(batch.latents.shape, generator=torch.Generator().manual_seed(seed + 7), dtype=torch.float64)

        def f():
            return ((model(batch) - target) ** 2).mean()

        err = nc.grad_check(f, list(model.parameters()), eps=1e-6, max_coords=max_coords, seed=seed)
    return _record("grad.toy_denoiser", err < MODEL_TOL, err, f"max rel error {err:.2e} (2-view batch)")


def attention_property_checks(seed: int = 0) -> list[dict]:
    out = []
    with nc.precision("float64"):
        model = toy_model(seed=seed)
        batch = toy_batch(2, 5, size=4, seed=seed, batch=2)
        with torch.no_grad():
            pred = model(batch)
        counts = [layer.last_token_count for layer in model.attention_layers]
        V = batch.n_views
        expected = [V * 4 * 4, V * 2 * 2, V * 4 * 4]
        out.append(_record("attention.token_count", counts == expected, counts, f"{counts} == {expected}"))

        perm = torch.tensor([0, 1, 5, 2, 6, 4, 3])
        with torch.no_grad():
            pred_p = model(batch.select(perm))
        err = (pred_p - pred[:, perm]).abs().max().item()
        out.append(_record("attention.permutation_equivariance", err < 1e-12, err, f"max deviation {err:.1e}"))

        fresh = toy_model(seed=seed, perturb=False)
        idx = batch.view_indices.clone()
        idx[:, :2] = idx[:, :2].flip(1)
        idx[:, 2:] = torch.tensor([[40, 11, 23, 17, 30], [12, 13, 14, 15, 16]])
        shuffled = MultiViewBatch(batch.latents, batch.cond_latents, batch.branch_flags, idx, batch.t)
        with torch.no_grad():
            a = fresh(batch)
            b = fresh(shuffled)
        exact = bool(torch.equal(a, b))
        out.append(_record("attention.zero_init_view_invariance", exact, exact, "outputs bitwise equal at s=0"))

        q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        kv = torch.eye(2, dtype=torch.float64)
        y = nc.attention(q, kv, kv)[0]
        ref = np.exp([1 / np.sqrt(2), 0.0])
        ref = ref / ref.sum()
        err = float(np.max(np.abs(y.numpy() - ref)))
        out.append(_record("attention.hand_case", err < 1e-12, err, f"output {y.numpy().round(4).tolist()}"))
    return out


def run_selftest(seed: int = 0) -> list[dict]:
    return (
        schedule_checks(seed)
        + primitive_gradient_checks(seed)
        + [model_gradient_check(seed)]
        + attention_property_checks(seed)
    )
