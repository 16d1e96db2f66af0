"""Depth estimators over per-pixel fragment lists.

Four estimators are produced per pixel: the blended center depth, the
distance/normal ratio ("unbiased"), the nearest plane depth and the
first-surface depth from a maximum-weight window search.

Estimators work with ray lengths internally.  Maps handed back to callers
hold camera z-depth, the same quantity as the blended center depth, with 0 as
the no-hit sentinel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .camera import CameraView
from .rasterizer import RenderBundle, SplatFragmentList, render_view
from .scene import SceneFile

FLAG_GRAZING = 1
FLAG_FALLBACK = 2
FLAG_NO_CANDIDATE = 4


class WindowConfigError(ValueError):
    pass


@dataclass
class WindowSearchConfig:
    dt: float = 0.003
    t_start: float = 0.95
    t_end: float = 0.05
    eps_n: float = 1e-4
    gate: float = 0.5       # mask value at which a pixel counts as transparent

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.dt > 0:
            raise WindowConfigError(f"window size must be positive, got {self.dt}")
        if not (0.0 < self.t_start <= 1.0):
            raise WindowConfigError(f"t_start must lie in (0, 1], got {self.t_start}")
        if not (0.0 <= self.t_end < 1.0):
            raise WindowConfigError(f"t_end must lie in [0, 1), got {self.t_end}")
        if not self.t_end < self.t_start:
            raise WindowConfigError(
                f"t_end ({self.t_end}) must be below t_start ({self.t_start})"
            )
        if not self.eps_n > 0:
            raise WindowConfigError("eps_n must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FirstSurfaceResult:
    depth: float            # NaN-free; equals ``fallback`` when no candidate exists
    weight: float           # summed T*alpha inside the chosen window
    members: np.ndarray     # fragment indices inside the chosen window, ascending
    anchor: float           # plane depth the window starts at (NaN if none)
    no_candidate: bool = False


@dataclass
class DepthMaps:
    standard: np.ndarray
    unbiased: np.ndarray
    nearest: np.ndarray
    first: np.ndarray
    flags: np.ndarray
    mask: np.ndarray
    alpha: np.ndarray

    def get(self, mode: str) -> np.ndarray:
        try:
            return {"standard": self.standard, "unbiased": self.unbiased,
                    "nearest": self.nearest, "first": self.first}[mode]
        except KeyError:
            raise ValueError(f"unknown depth mode {mode!r}") from None


def plane_depth(distance: float, normal, ray, eps_n: float = 1e-4) -> tuple[float, bool]:
    """Ray length to a Gaussian's plane and whether the clamp was hit.

    ``ray`` is the unit direction from the camera through the pixel and
    ``normal`` faces the camera, so a front-on hit has ``-normal . ray`` > 0.
    """
    ndotv = -float(np.dot(normal, ray))
    return float(K.plane_depth_scalar(float(distance), ndotv, eps_n)), ndotv <= eps_n


def unbiased_depth(distance: float, normal, ray, alpha: float, eps_n: float = 1e-4) -> float:
    """Blended distance over blended normal cosine; 0 on pixels nobody covers."""
    if alpha <= 0.0:
        return 0.0
    ndotv = -float(np.dot(normal, ray))
    return float(K.plane_depth_scalar(float(distance), ndotv, eps_n))


def nearest_depth(frags: SplatFragmentList) -> float:
    if len(frags) == 0:
        return 0.0
    return float(np.min(frags.plane_depth))


def first_surface_depth(frags: SplatFragmentList, cfg: WindowSearchConfig | None = None,
                        fallback: float = 0.0) -> FirstSurfaceResult:
    cfg = cfg or WindowSearchConfig()
    n = len(frags)
    T = np.ascontiguousarray(frags.T, dtype=np.float64)
    a = np.ascontiguousarray(frags.alpha, dtype=np.float64)
    d = np.ascontiguousarray(frags.plane_depth, dtype=np.float64)
    if n == 0:
        return FirstSurfaceResult(fallback, 0.0, np.zeros(0, dtype=np.int64), np.nan, True)
    depth, wsum, _, member = K.first_surface_list(T, a, d, cfg.t_start, cfg.t_end, cfg.dt)
    members = np.flatnonzero(member)
    if np.isnan(depth):
        return FirstSurfaceResult(fallback, 0.0, members, np.nan, True)
    return FirstSurfaceResult(float(depth), float(wsum), members, float(d[members].min()))


def _unbiased_range(bundle: RenderBundle, rays: np.ndarray, eps_n: float) -> np.ndarray:
    ndotv = -np.einsum("hwc,hwc->hw", bundle.normal, rays)
    rng = bundle.distance / np.maximum(ndotv, eps_n)
    return np.where(bundle.alpha > 0, rng, 0.0)


def depth_maps_from_bundle(bundle: RenderBundle, cam: CameraView,
                           cfg: WindowSearchConfig | None = None) -> DepthMaps:
    """Run all estimators on a bundle rendered with ``retain_fragments=True``."""
    cfg = cfg or WindowSearchConfig()
    fr = bundle.fragments
    if fr is None:
        raise ValueError("bundle was rendered without fragment lists")
    rays, cos = cam.world_rays()
    unb = _unbiased_range(bundle, rays, cfg.eps_n)
    nearest, first, flags = K.depth_estimators(
        fr.offsets, fr.T, fr.alpha, fr.plane_depth, fr.grazing, unb.ravel(),
        bundle.mask.ravel(), cfg.t_start, cfg.t_end, cfg.dt, cfg.gate,
    )
    shape = bundle.alpha.shape
    return DepthMaps(
        standard=bundle.depth_standard.copy(),
        unbiased=unb * cos,
        nearest=nearest.reshape(shape) * cos,
        first=first.reshape(shape) * cos,
        flags=flags.reshape(shape),
        mask=bundle.mask.copy(),
        alpha=bundle.alpha.copy(),
    )


def extract_all(scene: SceneFile, cam: CameraView, cfg: WindowSearchConfig | None = None,
                stage: int = 1, theta_t: float = 0.5) -> DepthMaps:
    cfg = cfg or WindowSearchConfig()
    bundle = render_view(scene, cam, stage=stage, theta_t=theta_t, retain_fragments=True,
                         eps_n=cfg.eps_n)
    return depth_maps_from_bundle(bundle, cam, cfg)
