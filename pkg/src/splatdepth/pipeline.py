"""End-to-end reconstruction: synthesize, train, extract depth, fuse, evaluate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView
from .depth import WindowSearchConfig, extract_all
from .meshing import TriMesh, TsdfVolume, depth_bounds, marching_cubes, tsdf_integrate
from .metrics import f1_score, masked_psnr
from .rasterizer import render_view
from .scene import SceneFile
from .synth import GroundTruth, SynthSpec, generate
from .trainer import TrainConfig, TrainState, TrainView, initial_scene, train_stage1, train_stage2


class StageError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class FuseConfig:
    voxel: float = 0.004
    trunc_voxels: float = 5.0
    margin: float = 0.03
    estimator: str = "first"

    def validate(self) -> None:
        if not self.voxel > 0:
            raise ValueError("voxel must be > 0")
        if not self.trunc_voxels > 0:
            raise ValueError("trunc_voxels must be > 0")
        if self.estimator not in ("standard", "unbiased", "nearest", "first"):
            raise ValueError(f"unknown depth estimator {self.estimator!r}")


@dataclass
class PipelineResult:
    scene: SceneFile
    state: TrainState
    gt: GroundTruth
    depths: list
    mesh: TriMesh
    metrics: dict
    timings: dict = field(default_factory=dict)
    stage1_scene: SceneFile | None = None


def fuse_depths(depths, cams: list[CameraView], cfg: FuseConfig | None = None) -> TriMesh:
    cfg = cfg or FuseConfig()
    lo, hi = depth_bounds(depths, cams, cfg.margin)
    vol = TsdfVolume.create(lo, hi, cfg.voxel, cfg.trunc_voxels)
    for d, cam in zip(depths, cams):
        tsdf_integrate(vol, d, cam)
    return marching_cubes(vol)


def highlight_psnr(scene: SceneFile, gt: GroundTruth, stage: int, specular: bool = True) -> float:
    """PSNR against the captured images over pixels carrying the synthetic highlight."""
    preds, refs, masks = [], [], []
    for cam, v in zip(gt.cameras, gt.views):
        img = render_view(scene, cam, stage=stage, specular=specular).color
        preds.append(img)
        refs.append(v.image_gt)
        masks.append(np.broadcast_to((v.highlight > 1e-3)[..., None], img.shape))
    return masked_psnr(np.stack(preds), np.stack(refs), np.stack(masks))


def run(spec: SynthSpec, train_cfg: TrainConfig, window: WindowSearchConfig | None = None,
        fuse: FuseConfig | None = None, tau: float = 0.005, log=None) -> PipelineResult:
    window = window or WindowSearchConfig()
    fuse = fuse or FuseConfig()
    window.validate()
    fuse.validate()
    train_cfg.validate()
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:     # re-raised with the stage attached
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return out

    scene_gt, gt = stage("synth", lambda: generate(spec))
    views = [TrainView.from_priors(c, v.priors()) for c, v in zip(gt.cameras, gt.views)]
    init = initial_scene(scene_gt, train_cfg)
    state = stage("train-stage1", lambda: train_stage1(init, views, train_cfg, log))
    stage1_scene = state.scene()
    state = stage("train-stage2", lambda: train_stage2(state, views, train_cfg, log))
    scene = state.scene()

    def extract():
        return [extract_all(scene, cam, window, stage=2, theta_t=train_cfg.weights.theta_t)
                .get(fuse.estimator) for cam in gt.cameras]

    depths = stage("extract", extract)
    mesh = stage("fuse", lambda: fuse_depths(depths, gt.cameras, fuse))
    geo = stage("eval", lambda: f1_score(mesh, gt.mesh, tau))
    metrics = geo.to_dict()
    metrics["count"] = len(scene)
    metrics["psnr_highlight_stage1"] = highlight_psnr(stage1_scene, gt, 1)
    metrics["psnr_highlight_stage2"] = highlight_psnr(scene, gt, 2)
    return PipelineResult(scene, state, gt, depths, mesh, metrics, timings, stage1_scene)
