"""World-to-screen projection of Gaussians (EWA affine approximation)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import CameraView

DTYPE = torch.float64
NEAR_PLANE = 0.01
LOWPASS = 0.3        # px^2 added to the screen covariance diagonal
CULL_SIGMA = 3.0


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray           # J W Sigma W^T J^T
    cov2d_filtered: np.ndarray  # cov2d + LOWPASS * I, used for alpha
    depth: float
    normal: np.ndarray
    distance: float
    radius: int
    source_index: int = 0


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    """Normalised (w, x, y, z) quaternions (N, 4) -> rotation matrices (N, 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def build_covariance_t(q: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    M = quat_to_rotmat_t(q) * s[..., None, :]
    return M @ M.transpose(-1, -2)


def camera_tensors(cam: CameraView) -> dict:
    return {
        "K": torch.tensor(cam.K, dtype=DTYPE),
        "R": torch.tensor(cam.R, dtype=DTYPE),
        "t": torch.tensor(cam.t, dtype=DTYPE),
        "center": torch.tensor(cam.center, dtype=DTYPE),
        "width": cam.width,
        "height": cam.height,
    }


def project_t(centers: torch.Tensor, cov3d: torch.Tensor, ct: dict) -> dict:
    """Screen-space mean, regularised covariance and camera depth for every Gaussian."""
    R, t, K = ct["R"], ct["t"], ct["K"]
    pc = centers @ R.T + t
    x, y, z = pc.unbind(-1)
    fx, skew, cx = K[0, 0], K[0, 1], K[0, 2]
    fy, cy = K[1, 1], K[1, 2]
    zs = torch.where(z > NEAR_PLANE, z, torch.full_like(z, NEAR_PLANE))
    u = (fx * x + skew * y) / zs + cx
    v = fy * y / zs + cy
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            fx / zs, skew / zs, -(fx * x + skew * y) / (zs * zs),
            zero, fy / zs, -fy * y / (zs * zs),
        ],
        dim=-1,
    ).reshape(-1, 2, 3)
    T = J @ R
    cov2d = T @ cov3d @ T.transpose(-1, -2)
    a = cov2d[:, 0, 0] + LOWPASS
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + LOWPASS
    return {
        "mean2d": torch.stack([u, v], -1),
        "cov": torch.stack([a, b, c], -1),
        "cov_raw": cov2d,
        "depth": z,
    }


def conic_t(cov: torch.Tensor) -> torch.Tensor:
    a, b, c = cov.unbind(-1)
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], -1)


def screen_radius(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.1))
    return np.ceil(CULL_SIGMA * np.sqrt(lam)).astype(np.int64)


def visible_mask(mean2d: np.ndarray, cov: np.ndarray, depth: np.ndarray,
                 width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Near-plane and 3-sigma footprint culling; returns (keep, radius)."""
    radius = screen_radius(cov)
    u, v = mean2d[:, 0], mean2d[:, 1]
    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    keep = (
        (depth > NEAR_PLANE)
        & (det > 0)
        & (u + radius > 0) & (u - radius < width)
        & (v + radius > 0) & (v - radius < height)
        & np.isfinite(u) & np.isfinite(v)
    )
    return keep, radius


def gaussian_normal_t(rotmat: torch.Tensor, scales: torch.Tensor, centers: torch.Tensor,
                      cam_center: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Camera-facing normal (min-scale axis) and camera-to-plane distance."""
    axis = torch.argmin(scales.detach(), dim=-1)
    n = torch.gather(rotmat, 2, axis[:, None, None].expand(-1, 3, 1))[..., 0]
    rel = centers - cam_center
    side = (n * rel).sum(-1)
    sign = torch.where(side.detach() > 0, -1.0, 1.0).to(n.dtype)
    n = n * sign[:, None]
    dist = -(n * rel).sum(-1)
    return n, dist


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def build_covariance(r, s) -> np.ndarray:
    """3x3 covariance R diag(s^2) R^T from a unit quaternion and scales."""
    return build_covariance_t(_t(r)[None], _t(s)[None])[0].numpy()


def gaussian_normal(g, cam: CameraView) -> tuple[np.ndarray, float]:
    R = quat_to_rotmat_t(_t(g.rotation)[None])
    n, d = gaussian_normal_t(R, _t(g.scale)[None], _t(g.center)[None], _t(cam.center))
    return n[0].numpy(), float(d[0])


def project(g, cam: CameraView, index: int = 0) -> ProjectedGaussian | None:
    """Project one activated Gaussian; ``None`` when culled."""
    ct = camera_tensors(cam)
    cov3d = build_covariance_t(_t(g.rotation)[None], _t(g.scale)[None])
    out = project_t(_t(g.center)[None], cov3d, ct)
    mean2d, cov, depth = (out[k].numpy() for k in ("mean2d", "cov", "depth"))
    keep, radius = visible_mask(mean2d, cov, depth, cam.width, cam.height)
    if not keep[0]:
        return None
    n, d = gaussian_normal(g, cam)
    a, b, c = cov[0]
    return ProjectedGaussian(
        mean2d=mean2d[0], cov2d=out["cov_raw"][0].numpy(),
        cov2d_filtered=np.array([[a, b], [b, c]]), depth=float(depth[0]),
        normal=n, distance=d, radius=int(radius[0]), source_index=index,
    )
