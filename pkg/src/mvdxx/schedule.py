"""Noise schedules and the epsilon / velocity / clean-latent algebra."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

PREDICTION_TYPES = ("epsilon", "velocity")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients, indexed 0..T-1 from least to most noisy.

    ``alpha_t`` and ``gamma_t`` are the signal and noise scales,
    sqrt(alpha_bar) and sqrt(1 - alpha_bar).
    """

    beta: np.ndarray
    prediction_type: str = "epsilon"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    zero_snr: bool = False
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_t: np.ndarray = field(init=False, repr=False)
    gamma_t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.prediction_type not in PREDICTION_TYPES:
            raise ValueError(f"prediction_type must be one of {PREDICTION_TYPES}")
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - beta)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "alpha_t", np.sqrt(alpha_bar))
        object.__setattr__(self, "gamma_t", np.sqrt(1.0 - alpha_bar))

    @property
    def T(self) -> int:
        return len(self.beta)

    def with_prediction(self, prediction_type: str) -> "NoiseSchedule":
        if prediction_type not in PREDICTION_TYPES:
            raise ValueError(f"prediction_type must be one of {PREDICTION_TYPES}")
        out = copy.copy(self)
        object.__setattr__(out, "prediction_type", prediction_type)
        return out

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "zero_snr": self.zero_snr,
            "prediction_type": self.prediction_type,
        }

    @classmethod
    def from_json(cls, r: dict) -> "NoiseSchedule":
        s = linear_schedule(int(r["T"]), r["beta_start"], r["beta_end"], r["prediction_type"])
        return rescale_zero_snr(s) if r.get("zero_snr") else s


def linear_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    prediction_type: str = "epsilon",
) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(beta, prediction_type, beta_start, beta_end)


def rescale_zero_snr(s: NoiseSchedule) -> NoiseSchedule:
    """Shift and scale sqrt(alpha_bar) so the last step has exactly zero signal
    while the first step keeps its value; betas are recomputed from the result."""
    a = s.alpha_t.copy()
    first, last = a[0], a[-1]
    if s.T < 2 or not last > 0:
        raise ValueError("schedule needs T >= 2 and a positive terminal signal")
    a = (a - last) * (first / (first - last))
    a[-1] = 0.0
    alpha_bar = a**2
    ratios = alpha_bar[1:] / alpha_bar[:-1]
    beta = np.concatenate([[1.0 - alpha_bar[0]], 1.0 - ratios])
    out = NoiseSchedule(beta, s.prediction_type, s.beta_start, s.beta_end, zero_snr=True)
    # cumprod of the recomputed betas reproduces alpha_bar up to rounding;
    # pin the exact sequence so the terminal signal is exactly zero
    object.__setattr__(out, "alpha_bar", alpha_bar)
    object.__setattr__(out, "alpha_t", a)
    object.__setattr__(out, "gamma_t", np.sqrt(1.0 - alpha_bar))
    return out


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample coefficients and broadcast them over ``like``'s trailing axes."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= len(values)):
        raise IndexError(f"timestep out of range [0, {len(values)}): {t}")
    c = torch.as_tensor(values[t_arr], dtype=like.dtype)
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Forward process sample z_t = alpha_t z0 + gamma_t eps.

    ``t`` is a scalar or an array broadcast against the leading axes.
    """
    _same_shape(z0, eps)
    return _coef(s.alpha_t, t, z0) * z0 + _coef(s.gamma_t, t, z0) * eps


def to_velocity(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    _same_shape(z0, eps)
    return _coef(s.alpha_t, t, z0) * eps - _coef(s.gamma_t, t, z0) * z0


def from_velocity(z_t: torch.Tensor, v: torch.Tensor, t, s: NoiseSchedule):
    _same_shape(z_t, v)
    a, g = _coef(s.alpha_t, t, z_t), _coef(s.gamma_t, t, z_t)
    return a * z_t - g * v, g * z_t + a * v


def from_epsilon(z_t: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule):
    """(z0, eps) from an epsilon estimate; undefined where the signal scale is zero."""
    _same_shape(z_t, eps)
    if np.any(s.alpha_t[np.asarray(t)] == 0):
        raise ZeroDivisionError("epsilon parameterisation cannot recover z0 at zero SNR")
    a, g = _coef(s.alpha_t, t, z_t), _coef(s.gamma_t, t, z_t)
    return (z_t - g * eps) / a, eps


def split_prediction(z_t: torch.Tensor, prediction: torch.Tensor, t, s: NoiseSchedule):
    """Convert a network output into (z0_hat, eps_hat) per ``s.prediction_type``."""
    if s.prediction_type == "velocity":
        return from_velocity(z_t, prediction, t, s)
    return from_epsilon(z_t, prediction, t, s)


def training_target(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    if s.prediction_type == "velocity":
        return to_velocity(z0, eps, t, s)
    return eps


def snr(t: int, s: NoiseSchedule) -> float:
    ab = float(s.alpha_bar[t])
    if ab >= 1.0:
        raise ZeroDivisionError("SNR is infinite where alpha_bar == 1")
    return ab / (1.0 - ab)
