import json
import sys

import numpy as np
import pytest

from splatdepth.cli import main

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SMALL = ["--set", "synth.n_views=2", "--set", "synth.width=32", "--set", "synth.height=32"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data")] + SMALL) == 0
    return root


def _manifest(path):
    return json.loads(path.read_text())


def test_print_defaults(capsys):
    assert main(["--print-defaults"]) == 0
    tree = tomllib.loads(capsys.readouterr().out)
    assert tree["window"]["dt"] == 0.003


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["synth"]) == 1                      # --out is required
    assert main(["render", "--bogus", "1"]) == 1
    assert main(["frobnicate"]) == 1


def test_validation_errors_write_manifest(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["synth", "--out", str(out), "--set", "window.t_end=0.95"]) == 2
    doc = _manifest(out / "manifest.json")
    assert doc["status"] == "invalid" and doc["exit_code"] == 2
    assert main(["synth", "--out", str(out), "--set", "synth.nope=1"]) == 2
    assert main(["render", "--scene", str(tmp_path / "missing.splat"),
                 "--camera", str(tmp_path), "--out", str(out)]) == 2
    assert main(["synth", "--out", str(out), "--threads", "0"]) == 2
    assert "validation error" in capsys.readouterr().err


def test_synth_manifest(dataset):
    doc = _manifest(dataset / "data" / "manifest.json")
    assert doc["status"] == "ok" and doc["exit_code"] == 0
    assert doc["config"]["synth"]["n_views"] == 2
    assert "scene_gt.splat" in doc["outputs"]["out"]
    assert doc["seed"] == 0 and doc["threads"] >= 1


def test_render_and_extract(dataset):
    data = dataset / "data"
    r = dataset / "render"
    assert main(["render", "--scene", str(data / "scene_gt.splat"), "--camera", str(data / "views"),
                 "--out", str(r)]) == 0
    assert (r / "cam_000" / "alpha.pfm").exists()
    d = dataset / "depth"
    assert main(["extract-depth", "--scene", str(data / "scene_gt.splat"), "--camera",
                 str(data / "views"), "--out", str(d), "--stage", "1"]) == 0
    from splatdepth.imgio import read_mask, read_pfm
    depth = read_pfm(d / "depth_000.pfm")
    truth = read_pfm(data / "gt" / "depth_000.pfm")
    plate = read_mask(data / "priors" / "mask_000.png") > 0
    err = np.abs(depth - truth)
    assert err[plate].mean() <= 0.003
    # silhouette pixels of the plate mix both surfaces; everywhere else is exact
    assert np.median(err) < 1e-3


def test_loss_report(dataset, capsys):
    data = dataset / "data"
    out = dataset / "loss.json"
    assert main(["loss-report", "--scene", str(data / "scene_gt.splat"), "--view",
                 str(data / "views" / "cam_001.json"), "--priors", str(data / "priors"),
                 "--out", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert set(rows) == {"rgb", "trans", "normal_prior", "normal_consistency", "flatten", "total"}
    assert "term\tvalue" in capsys.readouterr().out


def test_eval_commands(dataset, capsys):
    data = dataset / "data"
    gt = data / "gt_mesh.ply"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(dataset / "ev.json"),
                 "--set", "eval.n_samples=2000"]) == 0
    m = json.loads((dataset / "ev.json").read_text())
    assert m["f1"] == 1.0 and m["chamfer"] == 0.0
    img = data / "views" / "image_000.png"
    assert main(["eval-img", "--pred", str(img), "--gt", str(img), "--out",
                 str(dataset / "ei.json")]) == 0
    assert json.loads((dataset / "ei.json").read_text())["psnr"] == 100.0
    other = data / "priors" / "mask_000.png"
    assert main(["eval-img", "--pred", str(img), "--gt", str(other),
                 "--manifest", str(dataset / "bad.manifest.json")]) == 2


def test_dilemma_report(dataset, capsys):
    data = dataset / "data"
    out = dataset / "dilemma.json"
    assert main(["dilemma-report", "--data", str(data), "--out", str(out),
                 "--figure", str(dataset / "dilemma.png")]) == 0
    rows = json.loads(out.read_text())
    assert [r["estimator"] for r in rows] == ["standard", "unbiased", "nearest", "first"]
    assert (dataset / "dilemma.png").stat().st_size > 0


def test_rerun_identical(dataset, tmp_path):
    out = tmp_path / "again"
    assert main(["synth", "--out", str(out)] + SMALL) == 0
    assert main(["rerun", str(out / "manifest.json")]) == 0
    # tampering with an output makes the rerun disagree with the record
    doc = _manifest(out / "manifest.json")
    doc["outputs"]["out"]["synth.json"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(doc))
    assert main(["rerun", str(out / "manifest.json")]) == 4


def test_rerun_bad_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{")
    assert main(["rerun", str(p)]) == 2


def test_pipeline_check_and_runtime_failure(tmp_path):
    base = ["pipeline", "--iters1", "3", "--iters2", "2"] + SMALL + [
        "--set", "synth.plate_spacing=0.03", "--set", "synth.wall_spacing=0.1",
        "--set", "train.densify_interval=0", "--set", "fuse.voxel=0.02",
        "--set", "eval.n_samples=2000"]
    out = tmp_path / "p"
    assert main(base + ["--out", str(out), "--check", "--set", "check.f1_min=1.0"]) == 4
    doc = _manifest(out / "manifest.json")
    assert doc["status"] == "check-failed" and not doc["results"]["check"]["passed"]
    # a box too small to hold any surface gives an empty isosurface
    out2 = tmp_path / "q"
    code = main(base + ["--out", str(out2), "--set", "fuse.margin=-10"])
    assert code == 3
    assert _manifest(out2 / "manifest.json")["status"] == "failed"
