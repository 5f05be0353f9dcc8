"""Camera conventions and the fixed view grid.

World frame is right-handed with +Z up. Azimuth is measured counterclockwise
from +X in the XY plane, elevation above the XY plane. Cameras follow the
OpenCV convention in their local frame: x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_AZIMUTHS = 8
GRID_ELEVATIONS = (60.0, 30.0, 0.0, -30.0)
GRID_DISTANCE = 1.5
N_GRID_VIEWS = N_AZIMUTHS * len(GRID_ELEVATIONS)
FOV_DEG = 60.0

COND_ELEVATION_RANGE = (-10.0, 45.0)
COND_DISTANCE_RANGE = (1.5, 2.2)


class DegenerateUpError(ValueError):
    """Raised when the camera looks straight along the gravity axis."""


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    width: int = 64
    height: int = 64
    fov_deg: float = FOV_DEG

    def __post_init__(self):
        if self.width != self.height:
            raise ValueError("only square images are supported")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg out of range: {self.fov_deg}")

    @property
    def focal_px(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def matrix(self) -> np.ndarray:
        f = self.focal_px
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "fov_deg": self.fov_deg}

    @classmethod
    def from_json(cls, record: dict) -> "Intrinsics":
        return cls(int(record["width"]), int(record["height"]), float(record["fov_deg"]))


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    distance: float
    center: np.ndarray = field(repr=False, compare=False)
    rotation: np.ndarray = field(repr=False, compare=False)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    @property
    def up(self) -> np.ndarray:
        return -self.rotation[1]

    def to_json(self) -> dict:
        return {
            "azimuth_deg": self.azimuth,
            "elevation_deg": self.elevation,
            "distance": self.distance,
        }

    @classmethod
    def from_json(cls, record: dict) -> "CameraPose":
        return camera_pose(
            record["azimuth_deg"], record["elevation_deg"], record["distance"]
        )


def camera_pose(azimuth: float, elevation: float, distance: float) -> CameraPose:
    """Build a pose on the sphere looking at the origin with gravity-aligned up."""
    if not distance > 0:
        raise ValueError(f"distance must be positive, got {distance}")
    if abs(elevation) >= 90.0:
        raise DegenerateUpError(f"elevation {elevation} leaves the up vector undefined")
    azimuth = float(azimuth) % 360.0
    a, e = math.radians(azimuth), math.radians(elevation)
    center = distance * np.array(
        [math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)]
    )
    forward = -center / np.linalg.norm(center)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraPose(azimuth, float(elevation), float(distance), center, rotation)


@dataclass(frozen=True)
class ViewGrid:
    poses: tuple[CameraPose, ...]
    azimuth_offset: float = 0.0

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    def to_json(self) -> list:
        return [p.to_json() for p in self.poses]


def generation_view_grid(azimuth_offset: float = 0.0) -> ViewGrid:
    """The 32 target views: elevation groups 60, 30, 0, -30, azimuths ascending."""
    poses = tuple(
        camera_pose(azimuth_offset + 45.0 * k, elev, GRID_DISTANCE)
        for elev in GRID_ELEVATIONS
        for k in range(N_AZIMUTHS)
    )
    return ViewGrid(poses, float(azimuth_offset) % 360.0)


def sample_condition_pose(rng: np.random.Generator) -> CameraPose:
    slot = int(rng.integers(N_AZIMUTHS))
    elevation = rng.uniform(*COND_ELEVATION_RANGE)
    distance = rng.uniform(*COND_DISTANCE_RANGE)
    return camera_pose(45.0 * slot, elevation, distance)


def align_grid_to_reference(reference: CameraPose) -> ViewGrid:
    return generation_view_grid(reference.azimuth)


def project(pose: CameraPose, K: Intrinsics, p) -> tuple[float, float, float]:
    """Pinhole projection of a world point. Returns (u, v, depth)."""
    p = np.asarray(p, dtype=np.float64)
    xc, yc, zc = pose.rotation @ (p - pose.center)
    if zc <= 0:
        raise BehindCameraError(f"point {p.tolist()} is behind the camera")
    f = K.focal_px
    cx, cy = K.principal_point
    return f * xc / zc + cx, f * yc / zc + cy, float(zc)


def project_points(pose: CameraPose, K: Intrinsics, points: np.ndarray):
    """Vectorised projection; points behind the camera get depth <= 0 and NaN pixels."""
    cam = (points - pose.center) @ pose.rotation.T
    depth = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.focal_px * cam[..., 0] / depth + K.principal_point[0]
        v = K.focal_px * cam[..., 1] / depth + K.principal_point[1]
    bad = depth <= 0
    u = np.where(bad, np.nan, u)
    v = np.where(bad, np.nan, v)
    return u, v, depth


def backproject(pose: CameraPose, K: Intrinsics, u: float, v: float, depth: float) -> np.ndarray:
    cx, cy = K.principal_point
    cam = np.array([(u - cx) * depth / K.focal_px, (v - cy) * depth / K.focal_px, depth])
    return pose.rotation.T @ cam + pose.center


def pixel_rays(pose: CameraPose, K: Intrinsics) -> np.ndarray:
    """Unit ray directions in world space through every pixel center, shape (H, W, 3)."""
    cx, cy = K.principal_point
    jj, ii = np.meshgrid(np.arange(K.width) + 0.5, np.arange(K.height) + 0.5)
    cam = np.stack(
        [(jj - cx) / K.focal_px, (ii - cy) / K.focal_px, np.ones_like(jj)], axis=-1
    )
    dirs = cam @ pose.rotation
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
