"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, missing prerequisite),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .config import Config, ConfigError, load_config, parse_views
from .validation import PrerequisiteError

log = logging.getLogger("mvdxx")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def _write_run(out_dir, command: str, cfg: Config, section: str, extra: dict | None = None) -> None:
    import numpy as np
    import torch

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": cfg.to_json()[section],
        "full_config": cfg.to_json(),
        "threads": os.environ.get("MVDXX_THREADS"),
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__},
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(record, indent=1))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"missing prerequisite {what}: {p}")
    return p


def cmd_dataset_build(cfg: Config, args) -> dict:
    from .synthdata import build_dataset

    c = cfg.data
    manifest = build_dataset(c.n_objects, c.out_dir, c.n_cond, c.resolution, c.seed, c.grid_res)
    _write_run(c.out_dir, "dataset build", cfg, "data")
    return {"objects": len(manifest["objects"]), "out_dir": c.out_dir}


def cmd_vae_train(cfg: Config, args) -> dict:
    from .mvae import MvaeConfig, train_mvae
    from .synthdata import Dataset

    c = cfg.vae
    _require(Path(c.dataset) / "manifest.json", "dataset manifest")
    mc = MvaeConfig(**{k: v for k, v in asdict(c).items() if k not in ("dataset", "out_dir")})
    _, report = train_mvae(Dataset(c.dataset), mc, c.out_dir)
    _write_run(c.out_dir, "vae train", cfg, "vae")
    return report


def _latents(c, dataset_dir, vae_path):
    from .mvae import MVAE
    from .synthdata import Dataset
    from .training import LatentSet, encode_dataset

    _require(Path(dataset_dir) / "manifest.json", "dataset manifest")
    _require(vae_path, "M-VAE checkpoint")
    cache = Path(c.out_dir) / "latents.npz"
    if cache.exists():
        data = LatentSet.load(cache)
    else:
        data = encode_dataset(Dataset(dataset_dir), MVAE.load(vae_path))
        Path(c.out_dir).mkdir(parents=True, exist_ok=True)
        data.save(cache)
    if c.objects:
        data = data.subset(range(min(c.objects, len(data))))
    return data


def cmd_diffusion_train(cfg: Config, args) -> dict:
    from .denoiser import DenoiserConfig
    from .training import StageConfig, smoothed, train_stage

    c = cfg.diffusion
    stage = args.stage
    init = None
    if stage > 1:
        init = Path(c.out_dir) / f"stage{stage - 1}.ckpt"
        if not init.exists():
            raise ValidationError(f"missing prerequisite stage {stage - 1} checkpoint: {init}")
    sc = StageConfig.for_stage(
        stage,
        steps=c.steps,
        batch_size=c.batch_size,
        keep_views=c.keep_views,
        learning_rate=c.learning_rate,
        weight_decay=c.weight_decay,
        seed=c.seed,
        log_every=c.log_every,
    )
    data = _latents(c, c.dataset, c.vae)
    mc = DenoiserConfig(widths=c.widths, emb_dim=c.emb_dim, groups=c.groups, seed=c.seed)
    _, curve = train_stage(data, sc, c.out_dir, init_checkpoint=init, model_config=mc)
    first, last = smoothed([r["loss"] for r in curve])
    _write_run(c.out_dir, f"diffusion train --stage {stage}", cfg, "diffusion", {"stage": stage})
    return {"stage": stage, "initial_loss": first, "final_loss": last}


def cmd_sample(cfg: Config, args) -> dict:
    import numpy as np

    from .mvae import MVAE
    from .sampling import generate, save_run
    from .synthdata import Dataset
    from .training import load_model
    from .validation import check_view_subset

    c = cfg.sample
    if args.views is not None:
        c.views = args.views
    try:
        views = check_view_subset(parse_views(c.views))
    except ValueError as e:
        raise ValidationError(str(e)) from e
    if not 1 <= c.n_cond <= 10:
        raise ValidationError(f"sample.n_cond must be in [1, 10], got {c.n_cond}")
    _require(c.checkpoint, "denoiser checkpoint")
    _require(c.vae, "M-VAE checkpoint")
    ds = Dataset(_require(c.dataset, "dataset"))
    if not 0 <= c.object_index < len(ds):
        raise ValidationError(f"sample.object_index out of range [0, {len(ds)})")
    model, schedule, meta = load_model(c.checkpoint)
    mvae = MVAE.load(c.vae)
    o = c.object_index
    conds = [
        (ds.cond_rgb[o, k].astype(np.float32) / 255.0, ds.cond_mask[o, k].astype(np.float32))
        for k in range(c.n_cond)
    ]
    offset = float(ds.entry(o)["azimuth_offset"])
    rendered = generate(model, schedule, mvae, conds, views, c.steps, c.sampler, c.seed, offset)
    save_run(c.out_dir, views, rendered, {"object_index": o, "azimuth_offset": offset, "stage": meta.get("stage")})
    _write_run(c.out_dir, "sample", cfg, "sample", {"views": views})
    return {"views": len(views), "out_dir": c.out_dir}


def cmd_reconstruct(cfg: Config, args) -> dict:
    from .geometry import CameraPose, Intrinsics
    from .recon import carve, extract_mesh
    from .synthdata import load_mask_png, save_grid

    c = cfg.reconstruct
    run = Path(c.run_dir)
    manifest = json.loads(_require(run / "manifest.json", "sample manifest").read_text())
    records = manifest["views"]
    masks = [load_mask_png(_require(run / r["mask"], "mask image")) > c.threshold for r in records]
    poses = [CameraPose.from_json(r["pose"]) for r in records]
    K = Intrinsics.from_json(manifest["intrinsics"])
    grid = carve(masks, poses, K, c.res)
    save_grid(grid, run / "hull.bin")
    out = {"occupied": grid.count()}
    if grid.count():
        extract_mesh(grid).save_obj(run / "hull.obj")
    else:
        log.warning("empty hull; no mesh written")
    _write_run(run, "reconstruct", cfg, "reconstruct", out)
    return out


def cmd_evaluate(cfg: Config, args) -> dict:
    from .metrics import evaluate, write_report
    from .recon import ResolutionMismatch
    from .synthdata import Dataset

    c = cfg.evaluate
    ds = Dataset(_require(c.dataset, "dataset"))
    views = parse_views(c.views) if c.views else None
    try:
        report = evaluate(c.run_dir, ds, views)
    except ResolutionMismatch as e:
        raise ValidationError(f"{e}; rerun reconstruct with reconstruct.res equal to the dataset grid_res") from e
    run = Path(c.run_dir)
    write_report(report, run / "report.json", run / "report.csv" if c.csv else None)
    return {k: report[k] for k in ("mean_psnr", "mean_ssim", "chamfer", "volume_iou")}


def cmd_selftest(cfg: Config, args) -> dict:
    from .selftest import run_selftest

    results = run_selftest()
    failed = [r for r in results if not r["ok"]]
    for r in results:
        print(f"{'PASS' if r['ok'] else 'FAIL'} {r['name']}: {r['detail']}")
    if failed:
        raise RuntimeError(f"{len(failed)} selftest check(s) failed")
    return {"checks": len(results)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")
    common.add_argument("--seed", type=int, help="override the seed of the command's section")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mvdxx", description="multi-view latent diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    ds.add_parser("build", parents=[common]).set_defaults(func=cmd_dataset_build, section="data")
    vae = sub.add_parser("vae").add_subparsers(dest="action", required=True)
    vae.add_parser("train", parents=[common]).set_defaults(func=cmd_vae_train, section="vae")
    diff = sub.add_parser("diffusion").add_subparsers(dest="action", required=True)
    tr = diff.add_parser("train", parents=[common])
    tr.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    tr.set_defaults(func=cmd_diffusion_train, section="diffusion")
    sp = sub.add_parser("sample", parents=[common])
    sp.add_argument("--views", help="e.g. 0..7 or 0,4,9")
    sp.set_defaults(func=cmd_sample, section="sample")
    sub.add_parser("reconstruct", parents=[common]).set_defaults(func=cmd_reconstruct, section="reconstruct")
    sub.add_parser("evaluate", parents=[common]).set_defaults(func=cmd_evaluate, section="evaluate")
    sub.add_parser("selftest", parents=[common]).set_defaults(func=cmd_selftest, section=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags; those are validation errors here
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None and args.section is not None:
            section = getattr(cfg, args.section)
            if not hasattr(section, "seed"):
                raise ConfigError(f"section {args.section!r} has no seed")
            section.seed = args.seed
        result = args.func(cfg, args)
    except (ConfigError, ValidationError, PrerequisiteError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - operator surface
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
