"""Command-line entry point.

Every command validates its configuration and inputs first, then runs, and
always leaves a JSON manifest behind (with an ``error`` field on failure).

Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime, 4 acceptance check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3, 4
THREADS_ENV = "SPLATDEPTH_THREADS"
MAPS = ("color", "depth_standard", "normal", "distance", "alpha", "mask")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# manifests


def _is_bookkeeping(p: Path) -> bool:
    """Manifests and rerun records are not outputs of the command they describe."""
    return p.name == "manifest.json" or ".manifest.json" in p.name or "manifest.json." in p.name


def sha256_path(path: Path) -> str | dict:
    """Digest of a file, or a name -> digest map for a directory tree."""
    path = Path(path)
    if path.is_dir():
        return {str(p.relative_to(path)): sha256_path(p)
                for p in sorted(path.rglob("*")) if p.is_file() and not _is_bookkeeping(p)}
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_all(paths) -> dict:
    if isinstance(paths, dict):
        return {k: sha256_path(p) for k, p in paths.items() if Path(p).exists()}
    return {str(p): sha256_path(p) for p in paths if Path(p).exists()}


class Run:
    """Book-keeping for one command invocation."""

    def __init__(self, command: str, argv: list, manifest_path: Path):
        self.command = command
        self.argv = argv
        self.manifest_path = manifest_path
        self.config = None
        self.inputs: list = []
        self.outputs: dict = {}
        self.results: dict = {}
        self.seed = None
        self.threads = None
        self.t0 = time.perf_counter()

    def write(self, status: str, code: int, error: str | None = None) -> dict:
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "inputs": _hash_all(self.inputs),
            "outputs": _hash_all(self.outputs),
            "output_paths": {k: str(p) for k, p in self.outputs.items()},
            "results": self.results,
            "seed": self.seed,
            "threads": self.threads,
            "status": status,
            "exit_code": code,
            "error": error,
            "wall_time": time.perf_counter() - self.t0,
            "version": __version__,
        }
        self.manifest_path.parent.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
        return doc


# --------------------------------------------------------------------------
# input helpers


def _need(path, what: str, is_dir: bool | None = None) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    if is_dir is True and not p.is_dir():
        raise ValidationError(f"{what} must be a directory: {p}")
    if is_dir is False and p.is_dir():
        raise ValidationError(f"{what} must be a file: {p}")
    return p


def _cameras(path: Path):
    from .camera import load_camera

    if path.is_dir():
        files = sorted(path.glob("cam_*.json"))
        if not files:
            raise ValidationError(f"no cam_*.json files in {path}")
        return [(f.stem, load_camera(f)) for f in files]
    return [(path.stem, load_camera(path))]


def _index_of(stem: str) -> str:
    return stem.split("_", 1)[1] if "_" in stem else stem


# --------------------------------------------------------------------------
# commands: each returns (prepare, execute); prepare raises on bad input


def cmd_synth(a, cfg: C.RunConfig, run: Run):
    from .synth import generate, save_dataset

    out = Path(a.out)
    run.outputs = {"out": out}
    run.seed = cfg.synth.seed

    def execute():
        scene, gt = generate(cfg.synth)
        meta = save_dataset(scene, gt, out)
        run.results = {"views": meta["views"], "plate_splat_opacity": meta["plate_splat_opacity"],
                       "gaussians": len(scene)}
        print(f"wrote {out} ({len(scene)} gaussians, {meta['views']} views)")
    return execute


def cmd_render(a, cfg, run):
    from .imgio import write_pfm, write_png
    from .rasterizer import render_view
    from .scene import load_scene

    scene_p = _need(a.scene, "scene", False)
    cam_p = _need(a.camera, "camera")
    run.inputs = [scene_p, cam_p]
    out = Path(a.out)
    run.outputs = {"out": out}
    if a.stage not in (1, 2):
        raise ValidationError("--stage must be 1 or 2")
    scene = load_scene(scene_p)
    cams = _cameras(cam_p)

    def execute():
        for stem, cam in cams:
            d = out / stem if cam_p.is_dir() else out
            d.mkdir(parents=True, exist_ok=True)
            b = render_view(scene, cam, stage=a.stage, theta_t=cfg.weights.theta_t)
            for name, arr in b.maps().items():
                write_pfm(d / f"{name}.pfm", arr)
            write_png(d / "color.png", b.color)
            write_png(d / "mask.png", b.mask)
        print(f"rendered {len(cams)} view(s) to {out}")
    return execute


def cmd_extract_depth(a, cfg, run):
    from .depth import extract_all
    from .imgio import write_pfm
    from .scene import load_scene

    scene_p = _need(a.scene, "scene", False)
    cam_p = _need(a.camera, "camera")
    run.inputs = [scene_p, cam_p]
    out = Path(a.out)
    run.outputs = {"out": out}
    scene = load_scene(scene_p)
    cams = _cameras(cam_p)

    def execute():
        if cam_p.is_dir():
            out.mkdir(parents=True, exist_ok=True)
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
        summary = {}
        for stem, cam in cams:
            maps = extract_all(scene, cam, cfg.window, stage=a.stage, theta_t=cfg.weights.theta_t)
            d = maps.get(a.mode)
            target = out / f"depth_{_index_of(stem)}.pfm" if cam_p.is_dir() else out
            write_pfm(target, d)
            summary[stem] = {"valid": int((d > 0).sum()),
                             "fallback": int(((maps.flags & 2) > 0).sum())}
        run.results = summary
        print(f"wrote {a.mode} depth for {len(cams)} view(s) to {out}")
    return execute


def cmd_loss_report(a, cfg, run):
    from .camera import load_camera
    from .imgio import read_mask, read_pfm, read_png
    from .losses import PriorInputs
    from .scene import load_scene
    from .trainer import TrainView, init_state, view_loss

    scene_p = _need(a.scene, "scene", False)
    view_p = _need(a.view, "view camera", False)
    pri = _need(a.priors, "priors", True)
    idx = _index_of(view_p.stem)
    img_p = _need(view_p.parent / f"image_{idx}.png", "view image", False)
    run.inputs = [scene_p, view_p, img_p, pri]
    if a.stage not in (1, 2):
        raise ValidationError("--stage must be 1 or 2")
    cam = load_camera(view_p)
    image = read_png(img_p)
    priors = PriorInputs(image, read_png(_need(pri / f"delit_{idx}.png", "delit image")),
                         read_mask(_need(pri / f"mask_{idx}.png", "mask")),
                         read_pfm(_need(pri / f"normal_{idx}.pfm", "normal prior")).astype(np.float64))
    priors.validate()
    scene = load_scene(scene_p)
    if a.out:
        run.outputs = {"out": Path(a.out)}

    def execute():
        import torch

        state = init_state(scene, cfg.train, stage=a.stage)
        if a.stage == 2 and state.bank is None:
            from .trainer import begin_stage2
            begin_stage2(state, cfg.train)
        with torch.no_grad():
            total, parts, _ = view_loss(state, TrainView.from_priors(cam, priors), cfg.weights)
        rows = {k: float(v) for k, v in parts.items()}
        rows["total"] = float(total)
        run.results = rows
        print("term\tvalue")
        for k, v in rows.items():
            print(f"{k}\t{v:.10g}")
        if a.out:
            Path(a.out).write_text(json.dumps(rows, indent=1))
    return execute


def cmd_train(a, cfg, run):
    from .synth import load_priors, load_views
    from .scene import load_scene
    from .trainer import TrainView, initial_scene, save_checkpoint, train_stage1, train_stage2, write_log

    scene_p = _need(a.scene_init, "initial scene", False)
    views_p = _need(a.views, "views", True)
    pri_p = _need(a.priors, "priors", True)
    run.inputs = [scene_p, views_p, pri_p]
    out = Path(a.out)
    run.outputs = {"out": out}
    run.seed = cfg.train.seed
    scene = load_scene(scene_p)
    cams, imgs = load_views(views_p)
    priors = load_priors(pri_p, imgs)
    views = [TrainView.from_priors(c, p) for c, p in zip(cams, priors)]

    def execute():
        from .report import loss_curves

        out.mkdir(parents=True, exist_ok=True)
        init = initial_scene(scene, cfg.train)
        state = train_stage1(init, views, cfg.train)
        save_checkpoint(state, out / "stage1")
        state = train_stage2(state, views, cfg.train)
        save_checkpoint(state, out / "final")
        write_log(state.history, out / "log.csv")
        if a.report and state.history:
            loss_curves(state.history, out / "loss.png")
        last = state.history[-1] if state.history else {}
        run.results = {"gaussians": state.count, "final_total": last.get("total")}
        print(f"trained {state.iteration} iterations, {state.count} gaussians -> {out}")
    return execute


def cmd_fuse(a, cfg, run):
    from .imgio import read_pfm
    from .meshing import save_ply
    from .pipeline import fuse_depths

    dep = _need(a.depths, "depths", True)
    cam_p = _need(a.cameras, "cameras", True)
    run.inputs = [dep, cam_p]
    out = Path(a.out)
    run.outputs = {"out": out}
    pairs = []
    for stem, cam in _cameras(cam_p):
        f = dep / f"depth_{_index_of(stem)}.pfm"
        if f.exists():
            pairs.append((read_pfm(f).astype(np.float64), cam))
    if not pairs:
        raise ValidationError(f"no depth_XXX.pfm in {dep} matches a camera in {cam_p}")

    def execute():
        mesh = fuse_depths([p[0] for p in pairs], [p[1] for p in pairs], cfg.fuse)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_ply(mesh, out)
        run.results = {"vertices": len(mesh.vertices), "faces": len(mesh.faces),
                       "views": len(pairs)}
        print(f"fused {len(pairs)} depth maps -> {out} ({len(mesh.faces)} faces)")
    return execute


def cmd_eval(a, cfg, run):
    from .meshing import load_ply
    from .metrics import f1_score

    pred_p = _need(a.pred, "predicted mesh", False)
    gt_p = _need(a.gt, "ground-truth mesh", False)
    run.inputs = [pred_p, gt_p]
    pred, gt = load_ply(pred_p), load_ply(gt_p)
    if a.out:
        run.outputs = {"out": Path(a.out)}

    def execute():
        m = f1_score(pred, gt, cfg.eval.tau, cfg.eval.n_samples, cfg.eval.seed)
        run.results = m.to_dict()
        print("CD\tP\tR\tF1")
        print(f"{m.chamfer:.6g}\t{m.precision:.6g}\t{m.recall:.6g}\t{m.f1:.6g}")
        if a.out:
            Path(a.out).write_text(json.dumps(m.to_dict(), indent=1))
    return execute


def cmd_eval_img(a, cfg, run):
    from .imgio import read_image
    from .metrics import psnr, ssim

    pred_p = _need(a.pred, "predicted image", False)
    gt_p = _need(a.gt, "reference image", False)
    run.inputs = [pred_p, gt_p]
    pred, gt = read_image(pred_p), read_image(gt_p)
    if pred.shape != gt.shape:
        raise ValidationError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if a.out:
        run.outputs = {"out": Path(a.out)}

    def execute():
        res = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
        run.results = res
        print("PSNR\tSSIM")
        print(f"{res['psnr']:.6f}\t{res['ssim']:.6f}")
        if a.out:
            Path(a.out).write_text(json.dumps(res, indent=1))
    return execute


def cmd_dilemma(a, cfg, run):
    from .scene import load_scene
    from .synth import dilemma_report, load_dataset

    data = _need(a.data, "dataset", True)
    run.inputs = [data]
    scene, gt = load_dataset(data)
    if a.scene:
        run.inputs.append(_need(a.scene, "scene", False))
        scene = load_scene(a.scene)
    if gt.spec.scenario not in ("plate-over-wall", "floater-field", "opaque-wall"):
        raise ValidationError(f"dilemma report needs a plane scenario, got {gt.spec.scenario}")
    run.outputs = {k: Path(p) for k, p in (("out", a.out), ("figure", a.figure)) if p}

    def execute():
        rows = dilemma_report(scene, gt, cfg.window)
        run.results = {"rows": rows}
        print("estimator\tpixels\tmean_abs\tmax_abs\tsigned_mean")
        for r in rows:
            print(f"{r['estimator']}\t{r['pixels']}\t{r['mean_abs']:.6g}\t{r['max_abs']:.6g}"
                  f"\t{r['signed_mean']:.6g}")
        if a.out:
            Path(a.out).write_text(json.dumps(rows, indent=1))
        if a.figure:
            from .report import dilemma_bars
            dilemma_bars(rows, a.figure, cfg.window.dt)
    return execute


def cmd_pipeline(a, cfg, run):
    from .pipeline import run as run_pipeline

    out = Path(a.out)
    run.outputs = {"out": out}
    run.seed = cfg.synth.seed

    def execute():
        from .imgio import write_pfm
        from .meshing import save_ply
        from .scene import save_scene
        from .synth import save_dataset
        from .trainer import save_checkpoint, write_log

        res = run_pipeline(cfg.synth, cfg.train, cfg.window, cfg.fuse, cfg.eval.tau)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(_gt_scene(cfg), res.gt, out / "data")
        save_checkpoint(res.state, out / "checkpoint")
        save_scene(res.scene, out / "scene.splat")
        (out / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(res.depths):
            write_pfm(out / "depth" / f"depth_{i:03d}.pfm", d)
        save_ply(res.mesh, out / "mesh.ply")
        write_log(res.state.history, out / "log.csv")
        metrics = dict(res.metrics)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
        run.results = {"metrics": metrics, "timings": res.timings}
        if a.report:
            _pipeline_figures(res, cfg, out / "figures")
        print(f"CD {metrics['chamfer']:.6f} m  P {metrics['precision']:.4f}  "
              f"R {metrics['recall']:.4f}  F1 {metrics['f1']:.4f}")
        if a.check:
            failed = []
            if not metrics["chamfer"] < cfg.check.chamfer_max:
                failed.append(f"chamfer {metrics['chamfer']:.6g} >= {cfg.check.chamfer_max}")
            if not metrics["f1"] > cfg.check.f1_min:
                failed.append(f"f1 {metrics['f1']:.6g} <= {cfg.check.f1_min}")
            run.results["check"] = {"passed": not failed, "failures": failed}
            if failed:
                raise CheckFailed("; ".join(failed))
    return execute


def _gt_scene(cfg):
    from .synth import generate
    return generate(cfg.synth)[0]


def _pipeline_figures(res, cfg, out: Path) -> None:
    from . import report
    from .depth import extract_all
    from .metrics import nearest_distances
    from .rasterizer import render_view
    from .synth import dilemma_report

    report.loss_curves(res.state.history, out / "loss.png", beta=0.99)
    cam, vt = res.gt.cameras[0], res.gt.views[0]
    maps = extract_all(res.scene, cam, cfg.window, stage=2)
    report.depth_panels({k: maps.get(k) for k in report.ESTIMATORS}, vt.depth,
                        out / "depth_error.png", footprint=vt.mask)
    rows = dilemma_report(res.scene, res.gt, cfg.window)
    report.dilemma_bars(rows, out / "estimators.png", cfg.window.dt)
    s1 = render_view(res.scene, cam, stage=2, specular=False).color
    s2 = render_view(res.scene, cam, stage=2).color
    report.image_strip({"captured": vt.image_gt, "de-lighted": vt.image_delit,
                        "diffuse": s1, "full": s2}, out / "images.png")
    report.mesh_error_hist(nearest_distances(res.mesh.vertices, res.gt.mesh.vertices),
                           nearest_distances(res.gt.mesh.vertices, res.mesh.vertices),
                           out / "mesh_error.png", cfg.eval.tau)


# --------------------------------------------------------------------------
# parser


COMMANDS = {
    "synth": cmd_synth, "render": cmd_render, "extract-depth": cmd_extract_depth,
    "loss-report": cmd_loss_report, "train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval,
    "eval-img": cmd_eval_img, "dilemma-report": cmd_dilemma, "pipeline": cmd_pipeline,
}

# flag name -> config key it overrides
FLAG_KEYS = {
    "scenario": "synth.scenario", "seed": "synth.seed", "dt": "window.dt",
    "tstart": "window.t_start", "tend": "window.t_end", "voxel": "fuse.voxel", "tau": "eval.tau",
    "iters1": "train.iters_stage1", "iters2": "train.iters_stage2", "init": "train.init",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatdepth", description="First-surface depth from Gaussian splats.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-defaults", action="store_true", help="print the defaults table (TOML)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="TOML file; flags override it")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--manifest", help="manifest path (default derived from --out)")
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--scenario")
    sp.add_argument("--seed", type=int)
    common(sp)

    sp = sub.add_parser("render", help="render maps for one camera or a camera directory")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--camera", required=True)
    sp.add_argument("--stage", type=int, default=1)
    common(sp)

    sp = sub.add_parser("extract-depth", help="depth map by one estimator")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--camera", required=True)
    sp.add_argument("--mode", choices=("standard", "unbiased", "nearest", "first"), default="first")
    sp.add_argument("--stage", type=int, default=2, choices=(1, 2))
    sp.add_argument("--dt", type=float)
    sp.add_argument("--tstart", type=float)
    sp.add_argument("--tend", type=float)
    common(sp)

    sp = sub.add_parser("loss-report", help="loss terms of one view")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--view", required=True, help="cam_XXX.json next to image_XXX.png")
    sp.add_argument("--priors", required=True)
    sp.add_argument("--stage", type=int, default=1)
    common(sp, out_required=False)

    sp = sub.add_parser("train", help="two-stage optimisation")
    sp.add_argument("--scene-init", required=True)
    sp.add_argument("--views", required=True)
    sp.add_argument("--priors", required=True)
    sp.add_argument("--iters1", type=int)
    sp.add_argument("--iters2", type=int)
    sp.add_argument("--init", choices=("jitter", "uniform", "none"))
    sp.add_argument("--report", action="store_true", help="also plot the loss curves")
    common(sp)

    sp = sub.add_parser("fuse", help="TSDF-fuse depth maps into a mesh")
    sp.add_argument("--depths", required=True)
    sp.add_argument("--cameras", required=True)
    sp.add_argument("--voxel", type=float)
    common(sp)

    sp = sub.add_parser("eval", help="chamfer / precision / recall / F1 of two meshes")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--tau", type=float)
    common(sp, out_required=False)

    sp = sub.add_parser("eval-img", help="PSNR and SSIM of two images")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    common(sp, out_required=False)

    sp = sub.add_parser("dilemma-report", help="depth estimator errors on a synthetic dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--scene", help="scene to evaluate instead of the dataset's own")
    sp.add_argument("--figure")
    sp.add_argument("--dt", type=float)
    sp.add_argument("--tstart", type=float)
    sp.add_argument("--tend", type=float)
    common(sp, out_required=False)

    sp = sub.add_parser("pipeline", help="synth, train, extract, fuse, evaluate")
    sp.add_argument("--scenario")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iters1", type=int)
    sp.add_argument("--iters2", type=int)
    sp.add_argument("--check", action="store_true", help="exit 4 when thresholds are missed")
    sp.add_argument("--report", action="store_true", help="render figures")
    common(sp)

    sp = sub.add_parser("rerun", help="repeat a command from its manifest and compare outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="redirect outputs (default: overwrite the originals)")
    sp.add_argument("--threads", type=int, default=None)
    return p


def _manifest_path(a) -> Path:
    if getattr(a, "manifest", None):
        return Path(a.manifest)
    out = getattr(a, "out", None)
    if out:
        o = Path(out)
        return o / "manifest.json" if not o.suffix else o.with_name(o.name + ".manifest.json")
    return Path(f"splatdepth-{a.command}.manifest.json")


def _resolve_config(a) -> C.RunConfig:
    overrides = list(a.set)
    for flag, key in FLAG_KEYS.items():
        v = getattr(a, flag, None)
        if v is not None:
            sec, k = key.split(".")
            overrides.append({sec: {k: v}})
    return C.load(a.config, overrides)


def _threads(a) -> int:
    from .rasterizer import set_threads

    n = a.threads
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ValidationError(f"{THREADS_ENV} must be an integer") from exc
    if n is not None and n < 1:
        raise ValidationError("--threads must be >= 1")
    return set_threads(n)


def execute_command(argv: list) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if a.print_defaults:
        print(C.dumps(C.defaults_tree()), end="")
        return EXIT_OK
    if a.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if a.command == "rerun":
        return rerun(a)

    run = Run(a.command, list(argv), _manifest_path(a))
    try:
        cfg = _resolve_config(a)
        run.config = cfg.to_tree()
        run.threads = _threads(a)
        execute = COMMANDS[a.command](a, cfg, run)
    except Exception as exc:   # everything before work starts is a validation failure
        print(f"validation error: {exc}", file=sys.stderr)
        run.write("invalid", EXIT_VALIDATION, f"{type(exc).__name__}: {exc}")
        return EXIT_VALIDATION
    try:
        execute()
    except CheckFailed as exc:
        print(f"acceptance check failed: {exc}", file=sys.stderr)
        run.write("check-failed", EXIT_CHECK, str(exc))
        return EXIT_CHECK
    except Exception as exc:
        stage = getattr(exc, "stage", None)
        where = f" in stage {stage}" if stage else ""
        print(f"runtime error{where}: {exc}", file=sys.stderr)
        if os.environ.get("SPLATDEPTH_DEBUG"):
            traceback.print_exc()
        err = f"{type(exc).__name__}: {exc}"
        run.results["failed_stage"] = stage
        run.write("failed", EXIT_RUNTIME, err)
        return EXIT_RUNTIME
    run.write("ok", EXIT_OK)
    return EXIT_OK


def rerun(a) -> int:
    """Repeat the command recorded in a manifest with its resolved config.

    Outputs are compared by digest with the recorded ones; any difference
    exits with the check-failure code.
    """
    try:
        doc = json.loads(Path(a.manifest).read_text())
        argv = list(doc["argv"])
        config = doc["config"]
    except (OSError, ValueError, KeyError) as exc:
        print(f"validation error: unreadable manifest: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if config is None:
        print("validation error: manifest has no resolved config", file=sys.stderr)
        return EXIT_VALIDATION
    # the resolved config stands in for the original file and overrides
    tmp = tempfile.TemporaryDirectory(prefix="splatdepth-rerun-")
    cfg_path = Path(tmp.name) / "resolved.toml"
    cfg_path.write_text(C.dumps(config))
    clean, skip = [], False
    for tok in argv:
        if skip:
            skip = False
        elif tok in ("--config", "--set", "--manifest", "--threads", "--out"):
            skip = True
        else:
            clean.append(tok)
    clean += ["--config", str(cfg_path)]
    if a.threads is not None:
        clean += ["--threads", str(a.threads)]
    out = a.out or doc.get("output_paths", {}).get("out")
    if out:
        clean += ["--out", out]
    manifest = Path(a.manifest).with_name(Path(a.manifest).name + ".rerun.json")
    clean += ["--manifest", str(manifest)]
    try:
        code = execute_command(clean)
    finally:
        tmp.cleanup()
    if code != EXIT_OK:
        return code
    new = json.loads(manifest.read_text()).get("outputs", {})
    old = doc.get("outputs", {})
    diff = sorted(k for k, _ in set(_flat(old)) ^ set(_flat(new)))
    if diff:
        print("outputs differ: " + ", ".join(sorted(set(diff))[:10]), file=sys.stderr)
        return EXIT_CHECK
    print(f"identical: {len(dict(_flat(new)))} output file(s)")
    return EXIT_OK


def _flat(d, prefix=""):
    if isinstance(d, dict):
        for k, v in d.items():
            yield from _flat(v, f"{prefix}/{k}" if prefix else k)
    else:
        yield prefix, d


def main(argv=None) -> int:
    return execute_command(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
