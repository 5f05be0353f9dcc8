"""Visual-hull reconstruction, surface extraction and geometry metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .geometry import CameraPose, Intrinsics, project_points
from .synthdata import cell_centers


class ResolutionMismatch(ValueError):
    pass


@dataclass
class OccupancyGrid:
    """Boolean occupancy over [-1, 1]^3 indexed [ix, iy, iz]."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        r = self.bits.shape[0]
        if self.bits.shape != (r, r, r):
            raise ValueError(f"grid must be cubic, got shape {self.bits.shape}")

    @property
    def res(self) -> int:
        return self.bits.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 / self.res

    def count(self) -> int:
        return int(self.bits.sum())

    def fraction(self) -> float:
        return self.count() / self.bits.size

    def __eq__(self, other):
        return isinstance(other, OccupancyGrid) and np.array_equal(self.bits, other.bits)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    def euler_characteristic(self) -> int:
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(t))
        return n_verts - n_edges + len(t)

    def save_obj(self, path) -> None:
        with open(path, "w") as f:
            for v in self.vertices:
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
            for a, b, c in self.triangles + 1:
                f.write(f"f {a} {b} {c}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.array(verts), np.array(faces))


def carve(masks, poses: list[CameraPose], K: Intrinsics, res: int = 64) -> OccupancyGrid:
    """Visual hull of binary silhouettes.

    A cell survives iff it projects inside at least one image and every image
    it projects into marks it foreground.
    """
    if len(masks) == 0:
        raise ValueError("carve needs at least one view")
    if len(masks) != len(poses):
        raise ValueError(f"{len(masks)} masks but {len(poses)} poses")
    pts = cell_centers(res).reshape(-1, 3)
    seen = np.zeros(len(pts), dtype=bool)
    occ = np.ones(len(pts), dtype=bool)
    for mask, pose in zip(masks, poses):
        mask = np.asarray(mask) > 0.5
        h, w = mask.shape
        u, v, depth = project_points(pose, K, pts)
        with np.errstate(invalid="ignore"):
            inside = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        ui = np.floor(np.where(inside, u, 0)).astype(int)
        vi = np.floor(np.where(inside, v, 0)).astype(int)
        fg = mask[vi, ui]
        seen |= inside
        occ &= ~inside | fg
    return OccupancyGrid((occ & seen).reshape(res, res, res))


# neighbour offset, and the four corner offsets of that face in counterclockwise
# order seen from outside
_FACES = [
    ((1, 0, 0), [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)]),
    ((-1, 0, 0), [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)]),
    ((0, 1, 0), [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)]),
    ((0, -1, 0), [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)]),
    ((0, 0, 1), [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]),
    ((0, 0, -1), [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)]),
]


def exposed_faces(grid: OccupancyGrid):
    """Yield (normal, voxel_indices) for each face direction; voxel faces whose neighbour is empty."""
    padded = np.pad(grid.bits, 1)
    r = grid.res
    for off, corners in _FACES:
        nb = padded[
            1 + off[0] : 1 + off[0] + r,
            1 + off[1] : 1 + off[1] + r,
            1 + off[2] : 1 + off[2] + r,
        ]
        idx = np.argwhere(grid.bits & ~nb)
        yield off, corners, idx


def extract_mesh(grid: OccupancyGrid) -> TriangleMesh:
    """Two outward-facing triangles per exposed voxel face, vertices on cell corners."""
    if grid.count() == 0:
        raise ValueError("cannot extract a mesh from an empty grid")
    quads = []
    for _, corners, idx in exposed_faces(grid):
        quads.append(idx[:, None, :] + np.asarray(corners)[None])
    quads = np.concatenate(quads)
    corner_ids, inverse = np.unique(quads.reshape(-1, 3), axis=0, return_inverse=True)
    q = inverse.reshape(-1, 4)
    tris = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
    verts = -1.0 + corner_ids * grid.spacing
    return TriangleMesh(verts, tris)


def face_centers(grid: OccupancyGrid) -> np.ndarray:
    out = []
    for off, _, idx in exposed_faces(grid):
        out.append(idx + 0.5 + 0.5 * np.asarray(off))
    pts = np.concatenate(out) if out else np.zeros((0, 3))
    return -1.0 + pts * grid.spacing


def sample_surface(grid: OccupancyGrid, n: int = 8192, seed: int = 0) -> np.ndarray:
    centers = face_centers(grid)
    if len(centers) == 0:
        raise ValueError("grid has no surface to sample")
    rng = np.random.default_rng(seed)
    return centers[rng.integers(len(centers), size=n)]


def volume_iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.res != b.res:
        raise ResolutionMismatch(f"grid resolutions differ: {a.res} vs {b.res}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.bits & b.bits) / union


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance, halved."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def grid_chamfer(a: OccupancyGrid, b: OccupancyGrid, n: int = 8192, seed: int = 0) -> float:
    return chamfer(sample_surface(a, n, seed), sample_surface(b, n, seed))


class VisualHull(BaseEstimator):
    """Estimator wrapper around :func:`carve`.

    ``fit`` takes silhouettes and their poses; ``predict`` returns the
    occupancy grid and ``score`` the volume IoU against a reference grid.
    """

    def __init__(self, res: int = 64, intrinsics: Intrinsics | None = None):
        self.res = res
        self.intrinsics = intrinsics

    def fit(self, masks, poses):
        K = self.intrinsics or Intrinsics(np.shape(masks[0])[1], np.shape(masks[0])[0])
        self.grid_ = carve(masks, poses, K, self.res)
        return self

    def predict(self, X=None) -> OccupancyGrid:
        if not hasattr(self, "grid_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("VisualHull is not fitted yet")
        return self.grid_

    def score(self, reference: OccupancyGrid) -> float:
        return volume_iou(self.predict(), reference)

    def mesh(self) -> TriangleMesh:
        return extract_mesh(self.predict())
