import json

import pytest

from mvdxx.cli import main

TINY = {
    "vae": {"channels": [8, 8, 8], "groups": 2, "steps": 3, "batch_size": 2, "holdout_objects": 1},
    "diffusion": {"steps": 2, "batch_size": 1, "widths": [8, 8], "emb_dim": 8, "groups": 2},
    "sample": {"steps": 3, "object_index": 1},
    "reconstruct": {"res": 32},
}


@pytest.fixture(scope="module")
def pipeline(tiny_dataset_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = json.loads(json.dumps(TINY))
    cfg["vae"].update(dataset=str(tiny_dataset_dir), out_dir=str(root / "vae"))
    vae = str(root / "vae" / "mvae.ckpt")
    cfg["diffusion"].update(dataset=str(tiny_dataset_dir), vae=vae, out_dir=str(root / "diff"))
    cfg["sample"].update(
        dataset=str(tiny_dataset_dir), vae=vae, checkpoint=str(root / "diff" / "stage1.ckpt"), out_dir=str(root / "s")
    )
    cfg["reconstruct"]["run_dir"] = str(root / "s")
    cfg["evaluate"] = {"run_dir": str(root / "s"), "dataset": str(tiny_dataset_dir)}
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    return root, str(path)


def test_selftest_exit_zero(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 20


def test_bad_flag_is_validation_error():
    assert main(["diffusion", "train", "--stage", "4"]) == 1
    assert main(["nosuch"]) == 1


def test_unknown_config_key(capsys):
    assert main(["selftest", "--set", "sample.nope=1"]) == 1
    assert "sample.nope" in capsys.readouterr().err


def test_stage2_without_stage1(tmp_path, capsys):
    code = main(["diffusion", "train", "--stage", "2", "--set", f"diffusion.out_dir={tmp_path}"])
    assert code == 1
    assert "prerequisite stage 1" in capsys.readouterr().err


def test_dataset_build(tmp_path):
    out = tmp_path / "ds"
    args = ["--set", f"data.out_dir={out}", "--set", "data.n_objects=1", "--set", "data.grid_res=16"]
    assert main(["dataset", "build", *args, "--seed", "3"]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["seed"] == 3 and run["command"] == "dataset build"
    assert (out / "manifest.json").exists()


def test_full_pipeline(pipeline, capsys):
    root, cfg = pipeline
    assert main(["vae", "train", "--config", cfg]) == 0
    assert (root / "vae" / "run.json").exists()
    assert main(["diffusion", "train", "--stage", "1", "--config", cfg]) == 0
    assert (root / "diff" / "latents.npz").exists()
    assert main(["sample", "--config", cfg, "--views", "0..7"]) == 0
    pngs = sorted(p.name for p in (root / "s").glob("view_??.png"))
    assert pngs == [f"view_{v:02d}.png" for v in range(8)]
    manifest = json.loads((root / "s" / "manifest.json").read_text())
    assert manifest["object_index"] == 1
    assert main(["reconstruct", "--config", cfg]) == 0
    assert (root / "s" / "hull.bin").exists()
    assert main(["evaluate", "--config", cfg]) == 0
    report = json.loads((root / "s" / "report.json").read_text())
    assert len(report["views"]) == 8
    assert (root / "s" / "report.csv").exists()
    # stage chaining through the CLI
    assert main(["diffusion", "train", "--stage", "2", "--config", cfg]) == 0
    assert main(["diffusion", "train", "--stage", "3", "--config", cfg]) == 0
    assert json.loads((root / "diff" / "run.json").read_text())["stage"] == 3


def test_sample_rejects_bad_views(pipeline, capsys):
    _, cfg = pipeline
    assert main(["sample", "--config", cfg, "--views", "0,40"]) == 1
    assert main(["sample", "--config", cfg, "--set", "sample.n_cond=11"]) == 1


def test_evaluate_resolution_mismatch(pipeline, capsys):
    _, cfg = pipeline
    assert main(["reconstruct", "--config", cfg, "--set", "reconstruct.res=16"]) == 0
    assert main(["evaluate", "--config", cfg]) == 1
    assert "grid_res" in capsys.readouterr().err
