"""Procedural objects, a ray-cast renderer, voxelization and dataset files."""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    CameraPose,
    Intrinsics,
    align_grid_to_reference,
    pixel_rays,
    sample_condition_pose,
)

SHAPES = ("sphere", "box", "ellipsoid")
LIGHT_DIR = np.ones(3) / np.sqrt(3.0)
AMBIENT = 0.3
N_COND_VIEWS = 10


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.shape == "sphere" and len(set(self.half_extents)) != 1:
            raise ValueError("sphere needs equal half extents")

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "center": list(self.center),
            "half_extents": list(self.half_extents),
            "albedo": list(self.albedo),
        }

    @classmethod
    def from_json(cls, r: dict) -> "Primitive":
        return cls(r["shape"], tuple(r["center"]), tuple(r["half_extents"]), tuple(r["albedo"]))


@dataclass(frozen=True)
class SceneObject:
    primitives: tuple[Primitive, ...] = ()
    seed: int = 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.primitives:
            raise ValueError("empty object has no bounds")
        lo = np.min([np.subtract(p.center, p.half_extents) for p in self.primitives], axis=0)
        hi = np.max([np.add(p.center, p.half_extents) for p in self.primitives], axis=0)
        return lo, hi

    def normalized(self) -> "SceneObject":
        """Center the bounding box at the origin and scale its longest side to 2."""
        lo, hi = self.bounds()
        mid = (lo + hi) / 2.0
        scale = 2.0 / float(np.max(hi - lo))
        prims = tuple(
            Primitive(
                p.shape,
                tuple(float(c) for c in (np.asarray(p.center) - mid) * scale),
                tuple(float(h) for h in np.asarray(p.half_extents) * scale),
                p.albedo,
            )
            for p in self.primitives
        )
        return SceneObject(prims, self.seed)

    def to_json(self) -> dict:
        return {"seed": self.seed, "primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, r: dict) -> "SceneObject":
        return cls(tuple(Primitive.from_json(p) for p in r["primitives"]), int(r["seed"]))


@dataclass
class RenderedView:
    rgb: np.ndarray
    mask: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics = field(default_factory=Intrinsics)


def sample_object(seed: int) -> SceneObject:
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(int(rng.integers(1, 6))):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        center = rng.uniform(-0.45, 0.45, size=3)
        if shape == "sphere":
            half = np.full(3, rng.uniform(0.2, 0.5))
        else:
            half = rng.uniform(0.12, 0.5, size=3)
        albedo = rng.uniform(0.15, 0.9, size=3)
        prims.append(Primitive(shape, tuple(center), tuple(half), tuple(albedo)))
    return SceneObject(tuple(prims), int(seed)).normalized()


def sphere(radius: float = 0.5, center=(0.0, 0.0, 0.0), albedo=(0.7, 0.7, 0.7)) -> SceneObject:
    return SceneObject((Primitive("sphere", tuple(center), (radius,) * 3, tuple(albedo)),))


def box(half_extents, center=(0.0, 0.0, 0.0), albedo=(0.7, 0.7, 0.7)) -> SceneObject:
    return SceneObject((Primitive("box", tuple(center), tuple(half_extents), tuple(albedo)),))


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray):
    """Nearest positive entry distance and unit normal per ray; inf where missed."""
    c = np.asarray(prim.center)
    h = np.asarray(prim.half_extents)
    o = origin - c
    if prim.shape == "box":
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (-h - o) * inv
            t1 = (h - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-9)
        axis = tmin.argmax(axis=-1)
        normal = np.zeros_like(dirs)
        np.put_along_axis(
            normal,
            axis[..., None],
            -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1)),
            axis=-1,
        )
    else:
        os_ = o / h
        ds = dirs / h
        a = np.sum(ds * ds, axis=-1)
        b = 2.0 * np.sum(os_ * ds, axis=-1)
        cc = np.sum(os_ * os_) - 1.0
        disc = b * b - 4.0 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - sq) / (2.0 * a)
        hit = (disc >= 0) & (t_near > 1e-9)
        p = o + t_near[..., None] * dirs
        normal = p / (h * h)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    t = np.where(hit, t_near, np.inf)
    return t, normal


def cast(obj: SceneObject, origin: np.ndarray, dirs: np.ndarray):
    """Ray cast against the primitive union.

    Returns (t, normal, albedo) with t = inf on misses.
    """
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    best_n = np.zeros(shape + (3,))
    best_a = np.ones(shape + (3,))
    for prim in obj.primitives:
        t, n = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_a = np.where(closer[..., None], np.asarray(prim.albedo), best_a)
    return best_t, best_n, best_a


def render(obj: SceneObject, pose: CameraPose, K: Intrinsics | None = None) -> RenderedView:
    K = K or Intrinsics()
    dirs = pixel_rays(pose, K)
    t, normal, albedo = cast(obj, pose.center, dirs)
    mask = np.isfinite(t)
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, None)
    rgb = np.clip(albedo * shade[..., None], 0.0, 1.0)
    rgb = np.where(mask[..., None], rgb, 1.0)
    return RenderedView(rgb, mask.astype(np.uint8), pose, K)


def cell_centers(res: int) -> np.ndarray:
    """Centers of a res^3 grid over [-1, 1]^3, shape (res, res, res, 3), x-major."""
    c = -1.0 + (np.arange(res) + 0.5) * (2.0 / res)
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def inside(obj: SceneObject, points: np.ndarray) -> np.ndarray:
    occ = np.zeros(points.shape[:-1], dtype=bool)
    for p in obj.primitives:
        d = (points - np.asarray(p.center)) / np.asarray(p.half_extents)
        if p.shape == "box":
            occ |= np.all(np.abs(d) <= 1.0, axis=-1)
        else:
            occ |= np.sum(d * d, axis=-1) <= 1.0
    return occ


def voxelize(obj: SceneObject, res: int = 64):
    from .recon import OccupancyGrid

    if res < 8:
        raise ValueError(f"res must be >= 8, got {res}")
    return OccupancyGrid(inside(obj, cell_centers(res)))


# -- file formats -----------------------------------------------------------

def _write_framed(path: Path, header: dict, payload: bytes) -> None:
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def _read_framed(path: Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    return json.loads(data[8 : 8 + n]), data[8 + n :]


def save_grid(grid, path) -> None:
    """Occupancy bitset, little-endian bit order, after a length-prefixed JSON header."""
    bits = np.packbits(grid.bits.ravel(), bitorder="little")
    _write_framed(Path(path), {"res": grid.res}, bits.tobytes())


def load_grid(path):
    from .recon import OccupancyGrid

    header, payload = _read_framed(Path(path))
    res = int(header["res"])
    bits = np.unpackbits(np.frombuffer(payload, np.uint8), bitorder="little")[: res**3]
    return OccupancyGrid(bits.astype(bool).reshape(res, res, res))


def save_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255, "L").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MVDXX_THREADS", "1")))
    except ValueError:
        return 1


def _build_one(i: int, obj_seed: int, n_cond: int, K: Intrinsics, out: Path, grid_res: int) -> dict:
    obj = sample_object(obj_seed)
    rng = np.random.default_rng([obj_seed, 1])
    cond_poses = [sample_condition_pose(rng) for _ in range(n_cond)]
    grid = align_grid_to_reference(cond_poses[0])
    odir = out / f"obj_{i:04d}"
    odir.mkdir(parents=True, exist_ok=True)

    def emit(tag: str, pose: CameraPose) -> dict:
        view = render(obj, pose, K)
        save_png(view.rgb, odir / f"{tag}.png")
        save_mask_png(view.mask, odir / f"{tag}_mask.png")
        return {
            "rgb": f"{odir.name}/{tag}.png",
            "mask": f"{odir.name}/{tag}_mask.png",
            "pose": pose.to_json(),
        }

    cond = [emit(f"cond_{k:02d}", p) for k, p in enumerate(cond_poses)]
    targets = [emit(f"target_{k:02d}", p) for k, p in enumerate(grid.poses)]
    save_grid(voxelize(obj, grid_res), odir / "grid.bin")
    return {
        "object_seed": obj_seed,
        "object": obj.to_json(),
        "azimuth_offset": grid.azimuth_offset,
        "condition_views": cond,
        "target_views": targets,
        "grid": f"{odir.name}/grid.bin",
    }


def build_dataset(
    n_objects: int,
    out_dir,
    n_cond_max: int = N_COND_VIEWS,
    resolution: int = 64,
    seed: int = 0,
    grid_res: int = 64,
) -> dict:
    """Render n_objects objects (10 condition + 32 grid views each) and write a manifest."""
    if not 1 <= n_cond_max <= N_COND_VIEWS:
        raise ValueError(f"n_cond_max must be in [1, {N_COND_VIEWS}]")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    K = Intrinsics(resolution, resolution)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_objects)]
    with ThreadPoolExecutor(worker_count()) as pool:
        entries = list(
            pool.map(
                lambda args: _build_one(*args, n_cond_max, K, out, grid_res),
                enumerate(seeds),
            )
        )
    manifest = {
        "n_objects": n_objects,
        "n_cond": n_cond_max,
        "resolution": resolution,
        "grid_res": grid_res,
        "seed": seed,
        "intrinsics": K.to_json(),
        "objects": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


class Dataset:
    """In-memory view of a built dataset. Images are kept as uint8."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        self.manifest = json.loads(path.read_text())
        self.intrinsics = Intrinsics.from_json(self.manifest["intrinsics"])
        entries = self.manifest["objects"]

        def stack(key):
            rgb = np.stack([[self._u8(v["rgb"]) for v in e[key]] for e in entries])
            mask = np.stack([[load_mask_png(self.root / v["mask"]) for v in e[key]] for e in entries])
            return rgb, mask

        self.cond_rgb, self.cond_mask = stack("condition_views")
        self.target_rgb, self.target_mask = stack("target_views")

    def _u8(self, rel):
        return np.asarray(Image.open(self.root / rel).convert("RGB"))

    def __len__(self):
        return len(self.manifest["objects"])

    @property
    def resolution(self) -> int:
        return int(self.manifest["resolution"])

    def entry(self, i: int) -> dict:
        return self.manifest["objects"][i]

    def condition_poses(self, i: int) -> list[CameraPose]:
        return [CameraPose.from_json(v["pose"]) for v in self.entry(i)["condition_views"]]

    def target_poses(self, i: int) -> list[CameraPose]:
        return [CameraPose.from_json(v["pose"]) for v in self.entry(i)["target_views"]]

    def grid(self, i: int):
        return load_grid(self.root / self.entry(i)["grid"])

    def scene_object(self, i: int) -> SceneObject:
        return SceneObject.from_json(self.entry(i)["object"])

    def all_views(self) -> tuple[np.ndarray, np.ndarray]:
        """Every image of every object as float arrays (n*42, H, W, 3) and (n*42, H, W)."""
        rgb = np.concatenate([self.cond_rgb, self.target_rgb], axis=1)
        mask = np.concatenate([self.cond_mask, self.target_mask], axis=1)
        h, w = rgb.shape[2:4]
        return (
            rgb.reshape(-1, h, w, 3).astype(np.float32) / 255.0,
            mask.reshape(-1, h, w).astype(np.float32),
        )

