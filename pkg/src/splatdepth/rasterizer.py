"""Depth-sorted alpha compositing of projected Gaussians.

``render_view`` is the inference entry point.  ``rasterize_t`` is the same
forward pass wrapped as a torch autograd function for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import torch

from . import _kernels as K
from .appearance import full_color_t
from .camera import CameraView
from .projection import (
    build_covariance_t, camera_tensors, conic_t, gaussian_normal_t, project_t,
    quat_to_rotmat_t, visible_mask,
)
from .scene import SceneFile

DTYPE = torch.float64
ALPHA_MIN = K.ALPHA_MIN
ALPHA_MAX = K.ALPHA_MAX
T_MIN = K.T_MIN
TILE = K.TILE


def set_threads(n: int | None) -> int:
    """Worker count for numba kernels and torch ops; returns the count in use."""
    if n is None or n <= 0:
        n = numba.config.NUMBA_NUM_THREADS
    n = min(int(n), numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    torch.set_num_threads(n)
    return n


@dataclass
class SplatFragmentList:
    """Depth-sorted fragments of one pixel ray."""

    alpha: np.ndarray
    T: np.ndarray
    z: np.ndarray
    plane_depth: np.ndarray
    color: np.ndarray | None = None
    normal: np.ndarray | None = None
    distance: np.ndarray | None = None
    tau: np.ndarray | None = None
    source: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.alpha)

    @classmethod
    def from_alphas(cls, alpha, z=None, plane_depth=None, **payload) -> "SplatFragmentList":
        alpha = np.asarray(alpha, dtype=np.float64)
        T = transmittance(alpha)
        z = np.zeros_like(alpha) if z is None else np.asarray(z, dtype=np.float64)
        pd = z.copy() if plane_depth is None else np.asarray(plane_depth, dtype=np.float64)
        return cls(alpha=alpha, T=T, z=z, plane_depth=pd, **payload)


def transmittance(alpha) -> np.ndarray:
    """T_i = prod_{j<i} (1 - alpha_j)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    T = np.empty_like(alpha)
    t = 1.0
    for i, a in enumerate(alpha):
        T[i] = t
        t = t * (1.0 - a)
    return T


def fragment_alpha(pg, u, opacity: float) -> float:
    """alpha = o * exp(-0.5 d^T Sigma'^-1 d), clamped to 0.99, zero below 1/255.

    ``pg`` is a :class:`ProjectedGaussian`; the filtered covariance is used.
    """
    cov = pg.cov2d_filtered
    d = np.asarray(u, dtype=np.float64) - pg.mean2d
    power = -0.5 * d @ np.linalg.solve(cov, d)
    a = min(ALPHA_MAX, opacity * np.exp(power))
    return 0.0 if a < ALPHA_MIN else float(a)


def composite(frags: SplatFragmentList) -> dict:
    """Blend colour, center depth, normal and plane distance of one list."""
    n = len(frags)
    cols = [
        np.zeros((n, 3)) if frags.color is None else frags.color,
        frags.z[:, None],
        np.zeros((n, 3)) if frags.normal is None else frags.normal,
        (np.zeros(n) if frags.distance is None else frags.distance)[:, None],
    ]
    payload = np.ascontiguousarray(np.concatenate(cols, axis=1), dtype=np.float64)
    out, acc, t_final, used = K.composite_list(np.ascontiguousarray(frags.alpha), payload)
    return {
        "color": out[0:3], "depth_standard": out[3], "normal": out[4:7],
        "distance": out[7], "alpha": acc, "T_final": t_final, "used": used,
    }


def render_transparency_mask(frags: SplatFragmentList, theta_t: float = 0.5) -> float:
    if len(frags) == 0:
        return 0.0
    sel = K.mask_select(np.ascontiguousarray(frags.T), frags.tau, theta_t)
    return 0.0 if sel < 0 else float(frags.tau[sel])


# --------------------------------------------------------------------------
# per-view preprocessing


def scene_tensors(scene: SceneFile) -> dict:
    """Activated parameters of a scene as float64 tensors."""
    return {
        "centers": torch.tensor(scene.centers, dtype=DTYPE),
        "quats": torch.tensor(scene.rotations, dtype=DTYPE),
        "scales": torch.exp(torch.tensor(scene.log_scales, dtype=DTYPE)),
        "opacity": torch.sigmoid(torch.tensor(scene.opacity_logits, dtype=DTYPE)),
        "sh": torch.tensor(scene.sh, dtype=DTYPE),
        "tau": torch.sigmoid(torch.tensor(scene.tau_logits, dtype=DTYPE)),
        "asg": torch.tensor(scene.asg, dtype=DTYPE),
    }


def preprocess_t(p: dict, cam: CameraView, stage: int = 1, bank: dict | None = None,
                 n_freqs: int = 4, specular: bool = True) -> dict:
    """Project, cull and depth-sort Gaussians for one view.

    Culling and sorting are decided on detached values; everything returned is
    differentiable with respect to ``p``.
    """
    ct = camera_tensors(cam)
    with torch.no_grad():
        R_all = quat_to_rotmat_t(p["quats"])
        cov_all = build_covariance_t(p["quats"], p["scales"])
        pr = project_t(p["centers"], cov_all, ct)
        keep, radius = visible_mask(
            pr["mean2d"].numpy(), pr["cov"].numpy(), pr["depth"].numpy(), cam.width, cam.height
        )
        idx = np.flatnonzero(keep)
        order = np.argsort(pr["depth"].numpy()[idx], kind="stable")
        sel = idx[order]
    sel_t = torch.from_numpy(sel)
    centers = p["centers"][sel_t]
    quats = p["quats"][sel_t]
    scales = p["scales"][sel_t]
    R = quat_to_rotmat_t(quats)
    cov3d = build_covariance_t(quats, scales)
    pr = project_t(centers, cov3d, ct)
    normal, dist = gaussian_normal_t(R, scales, centers, ct["center"])
    rel = centers - ct["center"]
    dirs = rel / rel.norm(dim=-1, keepdim=True)
    asg = p.get("asg")
    offsets = None if asg is None or stage == 1 else asg[sel_t]
    color = full_color_t(p["sh"][sel_t], dirs, normal, stage, bank, n_freqs, offsets, specular)
    return {
        "index": sel,
        "radius": radius[sel],
        "mean2d": pr["mean2d"],
        "conic": conic_t(pr["cov"]),
        "opacity": p["opacity"][sel_t],
        "color": color,
        "depth": pr["depth"],
        "normal": normal,
        "dist": dist,
        "tau": p["tau"][sel_t],
    }


@dataclass
class RasterSettings:
    width: int
    height: int
    theta_t: float = 0.5
    tile: int = TILE
    saved: dict = field(default_factory=dict)


def _np(x: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.detach().numpy(), dtype=np.float64)


def _forward_np(settings: RasterSettings, radius, mean2d, conic, opac, color, depth,
                normal, dist, tau) -> dict:
    H, W = settings.height, settings.width
    offsets, ids = K.bin_tiles(mean2d, np.ascontiguousarray(radius, dtype=np.int64), W, H,
                               settings.tile, opac)
    out = {
        "color": np.zeros((H, W, 3)), "depth_standard": np.zeros((H, W)),
        "normal": np.zeros((H, W, 3)), "distance": np.zeros((H, W)),
        "alpha": np.zeros((H, W)), "mask": np.zeros((H, W)),
        "final_T": np.ones((H, W)),
        "last_entry": np.full((H, W), -1, dtype=np.int64),
        "mask_entry": np.full((H, W), -1, dtype=np.int64),
    }
    K.forward_kernel(
        offsets, ids, W, H, settings.tile, mean2d, conic, opac, color, depth, normal, dist,
        tau, settings.theta_t, out["color"], out["depth_standard"], out["normal"],
        out["distance"], out["alpha"], out["mask"], out["final_T"], out["last_entry"],
        out["mask_entry"],
    )
    out["tile_offsets"] = offsets
    out["tile_ids"] = ids
    return out


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, settings, radius, mean2d, conic, opac, color, depth, normal, dist, tau):
        arrays = [_np(t) for t in (mean2d, conic, opac, color, depth, normal, dist, tau)]
        out = _forward_np(settings, radius, *arrays)
        ctx.settings = settings
        ctx.arrays = arrays
        ctx.out = out
        return tuple(
            torch.from_numpy(out[k])
            for k in ("color", "depth_standard", "normal", "distance", "alpha", "mask")
        )

    @staticmethod
    def backward(ctx, g_color, g_depth, g_normal, g_dist, g_alpha, g_mask):
        s, out = ctx.settings, ctx.out
        mean2d, conic, opac, color, depth, normal, dist, tau = ctx.arrays
        ids = out["tile_ids"]
        entry_grad = np.zeros((len(ids), K.G_WIDTH))
        K.backward_kernel(
            out["tile_offsets"], ids, s.width, s.height, s.tile, mean2d, conic, opac, color,
            depth, normal, dist, out["final_T"], out["last_entry"], out["mask_entry"],
            _np(g_color), _np(g_depth), _np(g_normal), _np(g_dist), _np(g_alpha), _np(g_mask),
            entry_grad,
        )
        g = torch.from_numpy(K.reduce_entry_grads(ids, entry_grad, len(opac)))
        return (
            None, None,
            g[:, K.G_MEAN:K.G_MEAN + 2], g[:, K.G_CONIC:K.G_CONIC + 3], g[:, K.G_OPAC],
            g[:, K.G_COLOR:K.G_COLOR + 3], g[:, K.G_DEPTH], g[:, K.G_NORMAL:K.G_NORMAL + 3],
            g[:, K.G_DIST], g[:, K.G_TAU],
        )


def rasterize_t(prep: dict, width: int, height: int, theta_t: float = 0.5) -> dict:
    """Differentiable image formation from ``preprocess_t`` output."""
    settings = RasterSettings(width, height, theta_t)
    color, depth, normal, dist, alpha, mask = _Rasterize.apply(
        settings, prep["radius"], prep["mean2d"], prep["conic"], prep["opacity"],
        prep["color"], prep["depth"], prep["normal"], prep["dist"], prep["tau"],
    )
    return {
        "color": color, "depth_standard": depth, "normal": normal, "distance": dist,
        "alpha": alpha, "mask": mask,
    }


# --------------------------------------------------------------------------
# inference


@dataclass
class FragmentBuffer:
    """All pixels' fragment lists in CSR form (pixel p owns offsets[p]:offsets[p+1])."""

    offsets: np.ndarray
    gaussian: np.ndarray    # index into the scene's record order
    alpha: np.ndarray
    T: np.ndarray
    z: np.ndarray
    plane_depth: np.ndarray
    grazing: np.ndarray
    width: int
    height: int

    def pixel(self, y: int, x: int) -> SplatFragmentList:
        p = y * self.width + x
        s, e = self.offsets[p], self.offsets[p + 1]
        return SplatFragmentList(
            alpha=self.alpha[s:e], T=self.T[s:e], z=self.z[s:e],
            plane_depth=self.plane_depth[s:e], source=self.gaussian[s:e],
        )


@dataclass
class RenderBundle:
    color: np.ndarray
    depth_standard: np.ndarray
    normal: np.ndarray
    distance: np.ndarray
    alpha: np.ndarray
    mask: np.ndarray
    final_T: np.ndarray
    fragments: FragmentBuffer | None = None

    def maps(self) -> dict:
        return {
            "color": self.color, "depth_standard": self.depth_standard, "normal": self.normal,
            "distance": self.distance, "alpha": self.alpha, "mask": self.mask,
        }


def _empty_bundle(cam: CameraView) -> RenderBundle:
    H, W = cam.height, cam.width
    return RenderBundle(
        color=np.zeros((H, W, 3)), depth_standard=np.zeros((H, W)), normal=np.zeros((H, W, 3)),
        distance=np.zeros((H, W)), alpha=np.zeros((H, W)), mask=np.zeros((H, W)),
        final_T=np.ones((H, W)),
    )


def render_view(scene: SceneFile, cam: CameraView, stage: int = 1, theta_t: float = 0.5,
                retain_fragments: bool = False, specular: bool = True,
                eps_n: float = 1e-4) -> RenderBundle:
    """Render all maps of one view.

    Records are visited in canonical (content-sorted) order, so the output does
    not depend on how the scene's records happen to be ordered.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if len(scene) == 0:
        bundle = _empty_bundle(cam)
        if retain_fragments:
            bundle.fragments = FragmentBuffer(
                np.zeros(cam.width * cam.height + 1, dtype=np.int64), *(np.zeros(0),) * 6,
                cam.width, cam.height,
            )
        return bundle
    canon = scene.canonical_order()
    ordered = scene.subset(canon)
    with torch.no_grad():
        p = scene_tensors(ordered)
        bank = ordered.bank.tensors() if (stage == 2 and ordered.bank is not None) else None
        nf = ordered.bank.n_freqs if ordered.bank is not None else 4
        prep = preprocess_t(p, cam, stage, bank, nf, specular)
    arrays = {k: _np(prep[k]) for k in ("mean2d", "conic", "opacity", "color", "depth",
                                        "normal", "dist", "tau")}
    settings = RasterSettings(cam.width, cam.height, theta_t)
    out = _forward_np(settings, prep["radius"], arrays["mean2d"], arrays["conic"],
                      arrays["opacity"], arrays["color"], arrays["depth"], arrays["normal"],
                      arrays["dist"], arrays["tau"])
    bundle = RenderBundle(
        color=out["color"], depth_standard=out["depth_standard"], normal=out["normal"],
        distance=out["distance"], alpha=out["alpha"], mask=out["mask"], final_T=out["final_T"],
    )
    if retain_fragments:
        bundle.fragments = collect_fragments(
            out["tile_offsets"], out["tile_ids"], arrays, cam, canon[prep["index"]], eps_n
        )
    return bundle


def collect_fragments(tile_offsets, tile_ids, arrays: dict, cam: CameraView,
                      source_index: np.ndarray, eps_n: float = 1e-4) -> FragmentBuffer:
    W, H = cam.width, cam.height
    args = (tile_offsets, tile_ids, W, H, TILE, arrays["mean2d"], arrays["conic"],
            arrays["opacity"])
    counts = K.count_fragments(*args)
    off = np.zeros(W * H + 1, dtype=np.int64)
    np.cumsum(counts, out=off[1:])
    total = int(off[-1])
    g = np.empty(total, dtype=np.int64)
    a = np.empty(total)
    T = np.empty(total)
    K.fill_fragments(*args, off, g, a, T)
    rays, _ = cam.world_rays()
    pix = np.repeat(np.arange(W * H), counts)
    # normals face the camera, so the cosine uses the reversed ray
    ndotv = -np.einsum("ij,ij->i", arrays["normal"][g], rays.reshape(-1, 3)[pix])
    grazing = ndotv <= eps_n
    dhat = arrays["dist"][g] / np.maximum(ndotv, eps_n)
    return FragmentBuffer(
        offsets=off, gaussian=source_index[g], alpha=a, T=T, z=arrays["depth"][g],
        plane_depth=dhat, grazing=grazing, width=W, height=H,
    )
