"""Training objectives.

Every function takes numpy arrays or torch tensors and returns a 0-d float64
tensor so the same code serves reporting and back-propagation.  Per-pixel
terms are means over their valid pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraView

DTYPE = torch.float64
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ShapeMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    lambda_r: float = 0.2
    lambda_t: float = 0.1
    lambda_n: float = 0.1
    lambda_f: float = 100.0
    theta_n: float = 0.0
    theta_t: float = 0.5
    bce_eps: float = 1e-6

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PriorInputs:
    image_gt: np.ndarray     # (H, W, 3)
    image_delit: np.ndarray  # (H, W, 3)
    mask: np.ndarray         # (H, W) in {0, 1}
    normals: np.ndarray      # (H, W, 3), zero rows mark missing priors

    def validate(self) -> None:
        h, w = self.mask.shape
        for name in ("image_gt", "image_delit", "normals"):
            arr = getattr(self, name)
            if arr.shape != (h, w, 3):
                raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected {(h, w, 3)}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("transparency mask must be binary")
        nn = np.linalg.norm(self.normals, axis=-1)
        valid = nn > 0
        if valid.any() and np.abs(nn[valid] - 1.0).max() > 1e-3:
            raise ValueError("prior normals must be unit length or zero")

    def hybrid(self) -> np.ndarray:
        return np.asarray(hybrid_delight(self.image_gt, self.image_delit, self.mask))


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.ascontiguousarray(x, dtype=np.float64))


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def hybrid_delight(image_gt, image_delit, mask):
    """Transparent pixels take the de-lighted value, the rest the captured one."""
    _same_shape(image_gt, image_delit, "hybrid_delight")
    if tuple(mask.shape) != tuple(image_gt.shape[:2]):
        raise ShapeMismatchError(f"mask shape {tuple(mask.shape)} vs image {tuple(image_gt.shape)}")
    m = mask[..., None]
    return m * image_delit + (1 - m) * image_gt


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b) -> torch.Tensor:
    """Mean SSIM of two (H, W, C) images over all valid window positions."""
    a, b = _t(a), _t(b)
    _same_shape(a, b, "ssim")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    c = a.shape[-1]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeMismatchError(f"images smaller than the {SSIM_WINDOW}px SSIM window")
    # the window is separable: two 1-D passes instead of one 11x11 pass
    g = gaussian_window()[SSIM_WINDOW // 2]
    g = g / g.sum()
    wx = g.view(1, 1, 1, -1).expand(c, 1, 1, SSIM_WINDOW)
    wy = g.view(1, 1, -1, 1).expand(c, 1, SSIM_WINDOW, 1)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]

    def filt(z):
        return F.conv2d(F.conv2d(z, wx, groups=c), wy, groups=c)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def l1(a, b) -> torch.Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "l1")
    return (a - b).abs().mean()


def rgb_loss(pred, ref, lambda_r: float = 0.2) -> torch.Tensor:
    pred, ref = _t(pred), _t(ref)
    _same_shape(pred, ref, "rgb_loss")
    out = (1.0 - lambda_r) * (ref - pred).abs().mean()
    if lambda_r > 0:
        out = out + lambda_r * (1.0 - ssim(ref, pred))
    return out


def transparency_loss(pred_mask, mask, eps: float = 1e-6) -> torch.Tensor:
    p = _t(pred_mask).clamp(eps, 1.0 - eps)
    y = _t(mask)
    _same_shape(p, y, "transparency_loss")
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def normal_prior_loss(rendered, prior, theta_n: float = 0.0, weight=None) -> torch.Tensor:
    """Mean of (1 - prior . rendered) over pixels whose alignment passes theta_n.

    Prior rows are normalised first; zero rows are missing priors.  The
    alignment mask is rebuilt from the current rendering on every call and
    carries no gradient.
    """
    nr, npr = _t(rendered), _t(prior)
    _same_shape(nr, npr, "normal_prior_loss")
    length = npr.norm(dim=-1)
    valid = length > 0
    if weight is not None:
        valid = valid & (_t(weight) > 0)
    if not bool(valid.any()):
        return nr.sum() * 0.0
    unit = npr / torch.where(valid, length, torch.ones_like(length))[..., None]
    dot = (unit * nr).sum(-1)
    keep = (valid & (dot.detach() >= theta_n)).to(DTYPE)
    return (keep * (1.0 - dot)).sum() / valid.sum()


def depth_normals(depth, cam: CameraView) -> tuple[torch.Tensor, torch.Tensor]:
    """World normals of a z-depth map by central differences, and their validity.

    Border pixels and pixels touching a sentinel (depth <= 0) are invalid.
    The normal is oriented toward the camera.
    """
    d = _t(depth)
    rays = torch.as_tensor(cam.camera_rays())
    P = rays * d[..., None]
    H, W = d.shape
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    n = torch.cross(dy, dx, dim=-1)
    length = n.norm(dim=-1)
    ok = (d[1:-1, 1:-1] > 0) & (d[1:-1, 2:] > 0) & (d[1:-1, :-2] > 0) \
        & (d[2:, 1:-1] > 0) & (d[:-2, 1:-1] > 0) & (length > 0)
    n = n / torch.where(ok, length, torch.ones_like(length))[..., None]
    R = torch.as_tensor(cam.R)
    nw = n @ R      # camera -> world: R^T n
    full = torch.zeros((H, W, 3), dtype=DTYPE)
    full[1:-1, 1:-1] = nw
    valid = torch.zeros((H, W), dtype=torch.bool)
    valid[1:-1, 1:-1] = ok
    return full, valid


def depth_normal_consistency(depth, rendered, cam: CameraView, weight=None) -> torch.Tensor:
    nd, valid = depth_normals(depth, cam)
    nr = _t(rendered)
    if weight is not None:
        valid = valid & (_t(weight) > 0)
    if not bool(valid.any()):
        return nr.sum() * 0.0
    dot = (nd * nr).sum(-1)
    return torch.where(valid, 1.0 - dot, torch.zeros_like(dot)).sum() / valid.sum()


def flatten_loss(scales) -> torch.Tensor:
    """Sum over Gaussians of the smallest activated scale."""
    s = _t(scales)
    if s.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return s.abs().min(dim=-1).values.sum()


def stage_total(stage: int, parts: dict, w: LossWeights | None = None) -> torch.Tensor:
    """Weighted objective of one stage.

    ``parts`` holds ``rgb``, ``trans``, ``flatten`` and either ``normal`` or
    both ``normal_prior`` and ``normal_consistency``.  The rgb term is the
    caller's responsibility: hybrid target in stage 1, captured images in
    stage 2.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    w = w or LossWeights()
    for name, v in parts.items():
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)
    if "normal" in parts:
        normal = _t(parts["normal"])
    else:
        normal = _t(parts.get("normal_prior", 0.0)) + _t(parts.get("normal_consistency", 0.0))
    return (
        _t(parts.get("rgb", 0.0))
        + w.lambda_t * _t(parts.get("trans", 0.0))
        + w.lambda_n * normal
        + w.lambda_f * _t(parts.get("flatten", 0.0))
    )
