"""Two-stage optimisation of a Gaussian scene.

Stage 1 fits geometry and diffuse colour against the hybrid de-lighted target
with transparency, normal and flatten regularisers.  Stage 2 adds the ASG
specular branch, switches the colour target to the captured images and keeps
opacity and transparency logits fixed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .appearance import AsgBank
from .camera import CameraView
from .losses import (
    LossWeights, NonFiniteLossError, depth_normal_consistency, flatten_loss, normal_prior_loss,
    rgb_loss, stage_total, transparency_loss,
)
from .rasterizer import preprocess_t, rasterize_t
from .scene import SceneFile, load_scene, save_scene

DTYPE = torch.float64
GROUPS = ("centers", "quats", "log_scales", "opacity_logits", "sh", "tau_logits", "asg")
FROZEN_STAGE2 = ("opacity_logits", "tau_logits")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


@dataclass
class TrainConfig:
    iters_stage1: int = 1500
    iters_stage2: int = 1500
    lr_center: float = 2e-5
    lr_center_final: float = 2e-7
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 2.5e-2
    lr_sh: float = 2.5e-3
    lr_tau: float = 2.5e-2
    lr_asg: float = 1e-3
    lr_bank: float = 1e-3
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_stop_fraction: float = 0.8
    densify_size_fraction: float = 0.01   # clone below this fraction of the scene extent
    max_gaussians: int = 20000
    prune_opacity: float = 5e-3
    init: str = "jitter"                  # jitter | uniform | none
    init_jitter: float = 5e-4
    init_count: int = 3000
    asg_k: int = 16
    asg_f: int = 8
    asg_freqs: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        if self.init not in ("jitter", "uniform", "none"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if not 0 <= self.densify_stop_fraction <= 1:
            raise ValueError("densify_stop_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", None)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        cfg = cls(**d)
        if w is not None:
            cfg.weights = LossWeights(**w)
        return cfg


@dataclass
class TrainView:
    cam: CameraView
    image_gt: np.ndarray
    image_delit: np.ndarray
    mask: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        m = self.mask[..., None]
        self.hybrid = m * self.image_delit + (1 - m) * self.image_gt
        self._t = {
            "hybrid": torch.as_tensor(np.ascontiguousarray(self.hybrid), dtype=DTYPE),
            "gt": torch.as_tensor(np.ascontiguousarray(self.image_gt, dtype=np.float64)),
            "mask": torch.as_tensor(np.ascontiguousarray(self.mask, dtype=np.float64)),
            "normals": torch.as_tensor(np.ascontiguousarray(self.normals, dtype=np.float64)),
        }
        rays, cos = self.cam.world_rays()
        self._t["rays"] = torch.as_tensor(rays)
        self._t["cos"] = torch.as_tensor(cos)

    @classmethod
    def from_priors(cls, cam: CameraView, priors) -> "TrainView":
        return cls(cam, priors.image_gt, priors.image_delit, priors.mask, priors.normals)


@dataclass
class TrainState:
    params: dict
    bank: dict | None
    m: dict
    v: dict
    step: int
    iteration: int
    stage: int
    frozen: tuple
    meta: dict
    grad_accum: np.ndarray
    grad_count: np.ndarray
    history: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.params["centers"].shape[0])

    def trainable(self) -> dict:
        out = {k: self.params[k] for k in GROUPS if k not in self.frozen}
        if self.bank is not None and self.stage == 2:
            out.update({"bank." + k: self.bank[k] for k in AsgBank.TRAINABLE})
        return out

    def scene(self) -> SceneFile:
        p = {k: t.detach().numpy() for k, t in self.params.items()}
        bank = None
        if self.bank is not None:
            bank = AsgBank.from_tensors(self.bank, self.meta["asg_freqs"])
        return SceneFile(
            centers=p["centers"], rotations=p["quats"], log_scales=p["log_scales"],
            opacity_logits=p["opacity_logits"], sh=p["sh"], tau_logits=p["tau_logits"],
            asg=p["asg"], sh_degree=self.meta["sh_degree"], asg_k=self.meta["asg_k"],
            asg_f=self.meta["asg_f"], unit_scale=self.meta["unit_scale"], bank=bank,
        )


# --------------------------------------------------------------------------
# state construction


def _leaf(x) -> torch.Tensor:
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE, requires_grad=True)


def init_state(scene: SceneFile, cfg: TrainConfig | None = None, stage: int = 1) -> TrainState:
    cfg = cfg or TrainConfig()
    params = {
        "centers": _leaf(scene.centers), "quats": _leaf(scene.rotations),
        "log_scales": _leaf(scene.log_scales), "opacity_logits": _leaf(scene.opacity_logits),
        "sh": _leaf(scene.sh), "tau_logits": _leaf(scene.tau_logits), "asg": _leaf(scene.asg),
    }
    bank = None
    if scene.bank is not None:
        bank = scene.bank.tensors(requires_grad=True)
    n = len(scene)
    state = TrainState(
        params=params, bank=bank, m={}, v={}, step=0, iteration=0, stage=stage,
        frozen=FROZEN_STAGE2 if stage == 2 else (),
        meta={"sh_degree": scene.sh_degree, "asg_k": scene.asg_k, "asg_f": scene.asg_f,
              "unit_scale": scene.unit_scale,
              "asg_freqs": scene.bank.n_freqs if scene.bank is not None else cfg.asg_freqs},
        grad_accum=np.zeros(n), grad_count=np.zeros(n),
    )
    _reset_moments(state)
    return state


def _reset_moments(state: TrainState) -> None:
    for k, t in state.trainable().items():
        if k not in state.m:
            state.m[k] = torch.zeros_like(t.detach())
            state.v[k] = torch.zeros_like(t.detach())


def initial_scene(scene: SceneFile, cfg: TrainConfig) -> SceneFile:
    """Starting point derived from a reference layout."""
    if cfg.init == "none":
        return scene
    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "jitter":
        n = len(scene)
        out = scene.subset(np.arange(n))
        if (scene.asg_k, scene.asg_f) != (cfg.asg_k, cfg.asg_f):
            out.asg = np.zeros((n, cfg.asg_k * cfg.asg_f), dtype=np.float32)
            out.asg_k, out.asg_f = cfg.asg_k, cfg.asg_f
        out.centers = (scene.centers + rng.normal(0, cfg.init_jitter, (n, 3))).astype(np.float32)
        q = scene.rotations.astype(np.float64) + rng.normal(0, 0.01, (n, 4))
        out.rotations = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)
        out.log_scales = (scene.log_scales + rng.normal(0, 0.05, (n, 3))).astype(np.float32)
        return out
    # uniform samples in the bounding box of the reference
    lo, hi = scene.centers.min(0), scene.centers.max(0)
    n = cfg.init_count
    extent = float(np.linalg.norm(hi - lo))
    scale = max(extent / math.sqrt(n) * 0.5, 1e-3)
    sh = np.zeros((n,) + scene.sh.shape[1:])
    sh[:, 0] = 0.5 / 0.28209479177387814
    return SceneFile.from_activated(
        rng.uniform(lo, hi, (n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
        np.full((n, 3), scale), np.full(n, 0.1), sh, np.full(n, 0.5),
        sh_degree=scene.sh_degree, asg_k=cfg.asg_k, asg_f=cfg.asg_f,
    )


# --------------------------------------------------------------------------
# forward / backward


def _activated(state: TrainState) -> dict:
    p = state.params
    return {
        "centers": p["centers"], "quats": p["quats"], "scales": torch.exp(p["log_scales"]),
        "opacity": torch.sigmoid(p["opacity_logits"]), "sh": p["sh"],
        "tau": torch.sigmoid(p["tau_logits"]), "asg": p["asg"],
    }


def unbiased_depth_t(out: dict, view: TrainView, eps_n: float = 1e-4) -> torch.Tensor:
    """Differentiable z-depth from blended distance and normal maps."""
    ndotv = -(out["normal"] * view._t["rays"]).sum(-1)
    rng = out["distance"] / ndotv.clamp_min(eps_n)
    return torch.where(out["alpha"] > 0, rng * view._t["cos"], torch.zeros_like(rng))


def view_loss(state: TrainState, view: TrainView, w: LossWeights, act: dict | None = None,
              keep_screen_grad: bool = False) -> tuple[torch.Tensor, dict, dict]:
    stage = state.stage
    act = act or _activated(state)
    bank = state.bank if stage == 2 else None
    prep = preprocess_t(act, view.cam, stage, bank, state.meta["asg_freqs"])
    if keep_screen_grad and prep["mean2d"].requires_grad:
        prep["mean2d"].retain_grad()
    out = rasterize_t(prep, view.cam.width, view.cam.height, w.theta_t)
    target = view._t["hybrid"] if stage == 1 else view._t["gt"]
    depth = unbiased_depth_t(out, view)
    parts = {
        "rgb": rgb_loss(out["color"], target, w.lambda_r),
        "trans": transparency_loss(out["mask"], view._t["mask"], w.bce_eps),
        "normal_prior": normal_prior_loss(out["normal"], view._t["normals"], w.theta_n),
        "normal_consistency": depth_normal_consistency(depth, out["normal"], view.cam),
        "flatten": flatten_loss(act["scales"]),
    }
    return stage_total(stage, parts, w), parts, prep


def backward(state: TrainState, views, w: LossWeights | None = None) -> dict:
    """Gradients of the summed per-view objective for every parameter group.

    Frozen groups report exact zeros.
    """
    w = w or LossWeights()
    _zero_grads(state)
    act = _activated(state)
    total = None
    for view in views:
        loss, _, _ = view_loss(state, view, w, act)
        total = loss if total is None else total + loss
    total.backward()
    grads = {}
    for k in GROUPS:
        t = state.params[k]
        g = torch.zeros_like(t) if (k in state.frozen or t.grad is None) else t.grad.clone()
        grads[k] = g
    if state.bank is not None:
        for k in AsgBank.TRAINABLE:
            t = state.bank[k]
            grads["bank." + k] = (torch.zeros_like(t) if (t.grad is None or state.stage == 1)
                                  else t.grad.clone())
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(k)
    return grads


def _zero_grads(state: TrainState) -> None:
    for t in list(state.params.values()) + (list(state.bank.values()) if state.bank else []):
        t.grad = None


# --------------------------------------------------------------------------
# optimiser


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-15


def _lr(cfg: TrainConfig, key: str, frac: float, sh_rest: int):
    if key == "centers":
        # log-linear decay over the stage
        return math.exp((1 - frac) * math.log(cfg.lr_center) + frac * math.log(
            max(cfg.lr_center_final, 1e-30)))
    if key == "sh":
        lr = torch.full((1, sh_rest + 1, 1), cfg.lr_sh / 20.0, dtype=DTYPE)
        lr[:, 0] = cfg.lr_sh
        return lr
    return {
        "quats": cfg.lr_rotation, "log_scales": cfg.lr_scale, "opacity_logits": cfg.lr_opacity,
        "tau_logits": cfg.lr_tau, "asg": cfg.lr_asg,
    }.get(key, cfg.lr_bank)


def adam_step(state: TrainState, cfg: TrainConfig, frac: float) -> None:
    state.step += 1
    b1c = 1 - BETA1 ** state.step
    b2c = 1 - BETA2 ** state.step
    sh_rest = state.params["sh"].shape[1] - 1
    with torch.no_grad():
        for k, t in state.trainable().items():
            g = t.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NonFiniteGradientError(k)
            m = state.m[k].mul_(BETA1).add_(g, alpha=1 - BETA1)
            v = state.v[k].mul_(BETA2).addcmul_(g, g, value=1 - BETA2)
            lr = _lr(cfg, k, frac, sh_rest)
            t.sub_(lr * (m / b1c) / ((v / b2c).sqrt() + ADAM_EPS))
        q = state.params["quats"]
        q.div_(q.norm(dim=-1, keepdim=True))


# --------------------------------------------------------------------------
# densification


def _take(state: TrainState, index: np.ndarray, extra: dict | None = None) -> None:
    """Reindex every per-Gaussian tensor (and its moments), appending ``extra``."""
    idx = torch.as_tensor(index, dtype=torch.long)
    for k in GROUPS:
        old = state.params[k].detach()
        new = old[idx]
        if extra is not None:
            new = torch.cat([new, torch.as_tensor(extra[k], dtype=DTYPE)])
        state.params[k] = new.clone().requires_grad_(True)
        if k in state.m:
            pad = 0 if extra is None else len(extra[k])
            for mom in (state.m, state.v):
                z = mom[k][idx]
                if pad:
                    z = torch.cat([z, torch.zeros((pad,) + tuple(z.shape[1:]), dtype=DTYPE)])
                mom[k] = z
    pad = 0 if extra is None else len(extra["centers"])
    state.grad_accum = np.concatenate([state.grad_accum[index], np.zeros(pad)])
    state.grad_count = np.concatenate([state.grad_count[index], np.zeros(pad)])


def densify_and_prune(state: TrainState, cfg: TrainConfig, extent: float,
                      rng: np.random.Generator) -> dict:
    """Clone or split high-gradient Gaussians, then drop near-transparent ones."""
    n = state.count
    avg = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    hot = np.flatnonzero(avg > cfg.densify_grad_threshold)
    room = max(0, cfg.max_gaussians - n)
    hot = hot[np.argsort(-avg[hot], kind="stable")][:room]
    hot.sort()
    p = {k: state.params[k].detach().numpy() for k in GROUPS}
    scales = np.exp(p["log_scales"])
    small = scales.max(1) <= cfg.densify_size_fraction * extent
    clone = hot[small[hot]]
    split = hot[~small[hot]]
    extra = {k: [] for k in GROUPS}
    for i in clone:
        child = {k: p[k][i].copy() for k in GROUPS}
        child["centers"] = child["centers"] + rng.normal(0, 1, 3) * scales[i] * 0.1
        for k in GROUPS:
            extra[k].append(child[k])
    split_parent_scale = {}
    for i in split:
        s_new = np.log(scales[i] / 1.6)
        split_parent_scale[i] = s_new
        child = {k: p[k][i].copy() for k in GROUPS}
        q = p["quats"][i] / np.linalg.norm(p["quats"][i])
        R = _rotmat(q)
        child["centers"] = p["centers"][i] + R @ (rng.normal(0, 1, 3) * scales[i])
        child["log_scales"] = s_new
        for k in GROUPS:
            extra[k].append(child[k])
    added = len(clone) + len(split)
    if added:
        extra = {k: np.stack(v) for k, v in extra.items()}
        _take(state, np.arange(n), extra)
        if split_parent_scale:
            with torch.no_grad():
                for i, s_new in split_parent_scale.items():
                    state.params["log_scales"][i] = torch.as_tensor(s_new)
    state.grad_accum[:] = 0
    state.grad_count[:] = 0
    removed = prune(state, cfg.prune_opacity)
    return {"cloned": int(len(clone)), "split": int(len(split)), "pruned": removed}


def prune(state: TrainState, threshold: float) -> int:
    """Remove Gaussians whose opacity is below ``threshold``; at least one survives."""
    o = torch.sigmoid(state.params["opacity_logits"].detach()).numpy()
    keep = np.flatnonzero(o >= threshold)
    if len(keep) == 0:
        keep = np.array([int(np.argmax(o))])
    removed = state.count - len(keep)
    if removed:
        _take(state, keep)
    return removed


def _rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# --------------------------------------------------------------------------
# loops


def _extent(state: TrainState) -> float:
    c = state.params["centers"].detach().numpy()
    return float(np.linalg.norm(c.max(0) - c.min(0))) if len(c) else 1.0


def _run(state: TrainState, views, cfg: TrainConfig, iters: int, log=None,
         densify: bool = True) -> TrainState:
    w = cfg.weights
    rng = np.random.default_rng(cfg.seed + 1000 * state.stage)
    order: list = []
    stop = int(cfg.densify_stop_fraction * iters)
    extent = _extent(state)
    for it in range(iters):
        if not order:
            order = list(rng.permutation(len(views)))
        vi = int(order.pop(0))
        _zero_grads(state)
        loss, parts, prep = view_loss(state, views[vi], w, keep_screen_grad=densify)
        val = float(loss.detach())
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite loss at iteration {it} of stage {state.stage}", state)
        loss.backward()
        if densify and prep["mean2d"].grad is not None:
            g = prep["mean2d"].grad.norm(dim=-1).numpy()
            idx = prep["index"]
            state.grad_accum[idx] += g
            state.grad_count[idx] += 1
        adam_step(state, cfg, it / max(iters - 1, 1))
        state.iteration += 1
        row = {"iteration": state.iteration, "stage": state.stage, "view": vi}
        row.update({k: float(v.detach()) for k, v in parts.items()})
        row["total"] = val
        row["count"] = state.count
        state.history.append(row)
        if log is not None:
            log(row)
        if (densify and cfg.densify_interval > 0 and (it + 1) % cfg.densify_interval == 0
                and it + 1 < stop):
            densify_and_prune(state, cfg, extent, rng)
            _reset_moments(state)
    return state


def train_stage1(scene: SceneFile, views, cfg: TrainConfig | None = None, log=None) -> TrainState:
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not views:
        raise ValueError("training needs at least one view")
    state = init_state(scene, cfg, stage=1)
    return _run(state, views, cfg, cfg.iters_stage1, log, densify=True)


def begin_stage2(state: TrainState, cfg: TrainConfig) -> TrainState:
    state.stage = 2
    state.frozen = FROZEN_STAGE2
    if state.bank is None:
        # the per-Gaussian offsets fix the bank's lobe and feature counts
        bank = AsgBank.init(state.meta["asg_k"], state.meta["asg_f"], cfg.asg_freqs, seed=cfg.seed)
        state.bank = bank.tensors(requires_grad=True)
        state.meta["asg_freqs"] = cfg.asg_freqs
    for k in FROZEN_STAGE2:
        state.m.pop(k, None)
        state.v.pop(k, None)
    _reset_moments(state)
    return state


def train_stage2(state: TrainState, views, cfg: TrainConfig | None = None, log=None) -> TrainState:
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not views:
        raise ValueError("training needs at least one view")
    if state.stage != 2:
        begin_stage2(state, cfg)
    return _run(state, views, cfg, cfg.iters_stage2, log, densify=False)


def train(scene: SceneFile, views, cfg: TrainConfig | None = None, log=None,
          checkpoint_dir=None) -> TrainState:
    """Both stages back to back; writes the stage-1 checkpoint when asked."""
    cfg = cfg or TrainConfig()
    state = train_stage1(scene, views, cfg, log)
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / "stage1")
    return train_stage2(state, views, cfg, log)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(state.scene(), out / "scene.splat")
    arrays = {}
    for k in state.m:
        arrays["m." + k] = state.m[k].numpy()
        arrays["v." + k] = state.v[k].numpy()
    arrays["grad_accum"] = state.grad_accum
    arrays["grad_count"] = state.grad_count
    savez_stable(out / "moments.npz", arrays)
    meta = {"step": state.step, "iteration": state.iteration, "stage": state.stage,
            "frozen": list(state.frozen), "meta": state.meta}
    (out / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def savez_stable(path, arrays: dict) -> None:
    """``np.savez`` layout with fixed member timestamps, so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    meta = json.loads((path / "state.json").read_text())
    scene = load_scene(path / "scene.splat")
    state = init_state(scene, cfg, stage=meta["stage"])
    state.step = meta["step"]
    state.iteration = meta["iteration"]
    state.frozen = tuple(meta["frozen"])
    state.meta = meta["meta"]
    with np.load(path / "moments.npz") as z:
        state.m = {k[2:]: torch.as_tensor(z[k]) for k in z.files if k.startswith("m.")}
        state.v = {k[2:]: torch.as_tensor(z[k]) for k in z.files if k.startswith("v.")}
        state.grad_accum = z["grad_accum"].copy()
        state.grad_count = z["grad_count"].copy()
    return state


def write_log(history: list, path) -> None:
    if not history:
        Path(path).write_text("")
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        for row in history:
            wr.writerow({k: row.get(k) for k in keys})


def smoothed(values, beta: float = 0.99) -> np.ndarray:
    out = np.empty(len(values))
    acc = 0.0
    for i, v in enumerate(values):
        acc = beta * acc + (1 - beta) * v
        out[i] = acc / (1 - beta ** (i + 1))
    return out
