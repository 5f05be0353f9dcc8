"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit before using it"
        )


def check_images(X, channels: int, multiple_of: int = 1) -> np.ndarray:
    """Validate a stack of images shaped (n, H, W, channels) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != channels:
        raise ValueError(f"expected images of shape (n, H, W, {channels}), got {X.shape}")
    h, w = X.shape[1:3]
    if h % multiple_of or w % multiple_of:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple_of}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_latents(Z, channels: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float32)
    if Z.ndim != 4 or Z.shape[1] != channels:
        raise ValueError(f"expected latents of shape (n, {channels}, h, w), got {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("latents contain non-finite values")
    return Z


def check_view_subset(views, total: int = 32) -> list[int]:
    views = [int(v) for v in views]
    if not views:
        raise ValueError("at least one view must be requested")
    bad = [v for v in views if not 0 <= v < total]
    if bad:
        raise ValueError(f"view indices out of range [0, {total}): {bad}")
    if len(set(views)) != len(views):
        raise ValueError("duplicate view indices requested")
    return views


def check_condition_count(n: int, max_views: int = 10) -> int:
    if not 1 <= n <= max_views:
        raise ValueError(f"number of condition views must be in [1, {max_views}], got {n}")
    return n


class PrerequisiteError(RuntimeError):
    """A pipeline step was started without the artefact of the step before it."""
