"""Image metrics and the run evaluation report."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .recon import grid_chamfer, volume_iou

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

REPORT_SCHEMA = {
    "type": "object",
    "required": ["views", "per_view", "mean_psnr", "mean_ssim", "chamfer", "volume_iou"],
    "properties": {
        "views": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 31}},
        "per_view": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["view", "psnr", "ssim"],
                "properties": {
                    "view": {"type": "integer"},
                    "psnr": {"$ref": "#/definitions/db"},
                    "ssim": {"type": "number", "minimum": -1, "maximum": 1},
                },
            },
        },
        "mean_psnr": {"$ref": "#/definitions/db"},
        "mean_ssim": {"type": "number", "minimum": -1, "maximum": 1},
        "chamfer": {"type": ["number", "null"], "minimum": 0},
        "volume_iou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "definitions": {"db": {"oneOf": [{"type": "number"}, {"const": "inf"}]}},
}


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 2-D filtering with no padding: output shrinks by len(g)-1."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), data range 1.

    The SSIM map is evaluated at window positions fully inside the image and
    averaged over positions and channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    g = _gaussian_window()
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def _db(x: float):
    return "inf" if math.isinf(x) else x


def evaluate(run_dir, dataset, views=None, object_index: int | None = None) -> dict:
    """Score a generation run against ground truth.

    ``run_dir`` must hold ``manifest.json`` from :func:`mvdxx.sampling.save_run`
    and, for geometry metrics, ``hull.bin`` from the reconstruct step.
    """
    from .synthdata import load_grid, load_png

    run = Path(run_dir)
    manifest_path = run / "manifest.json"
    missing = [str(p) for p in [manifest_path] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing run artifacts: {missing}")
    manifest = json.loads(manifest_path.read_text())
    obj = manifest.get("object_index") if object_index is None else object_index
    if obj is None:
        raise ValueError("run manifest has no object_index; pass object_index explicitly")
    generated = {int(v["view"]): v for v in manifest["views"]}
    views = sorted(generated) if views is None else [int(v) for v in views]
    missing = [v for v in views if v not in generated]
    missing += [str(run / generated[v]["rgb"]) for v in views if v in generated and not (run / generated[v]["rgb"]).exists()]
    if missing:
        raise FileNotFoundError(f"missing run artifacts: {missing}")

    per_view = []
    for v in views:
        pred = load_png(run / generated[v]["rgb"])
        gt = dataset.target_rgb[obj, v].astype(np.float32) / 255.0
        per_view.append({"view": v, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)})
    mean_psnr = float(np.mean([p["psnr"] for p in per_view]))
    report = {
        "object_index": int(obj),
        "views": views,
        "per_view": [{"view": p["view"], "psnr": _db(p["psnr"]), "ssim": p["ssim"]} for p in per_view],
        "mean_psnr": _db(mean_psnr),
        "mean_ssim": float(np.mean([p["ssim"] for p in per_view])),
        "chamfer": None,
        "volume_iou": None,
    }
    hull_path = run / "hull.bin"
    if hull_path.exists():
        hull = load_grid(hull_path)
        gt_grid = dataset.grid(obj)
        report["volume_iou"] = volume_iou(hull, gt_grid)
        report["chamfer"] = grid_chamfer(hull, gt_grid) if hull.count() else None
    return report


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def write_report(report: dict, path, csv_path=None) -> None:
    validate_report(report)
    Path(path).write_text(json.dumps(report, indent=1))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["view", "psnr", "ssim"])
            for p in report["per_view"]:
                w.writerow([p["view"], p["psnr"], p["ssim"]])
