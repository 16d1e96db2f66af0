"""Geometric and image quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .losses import ShapeMismatchError
from .losses import ssim as _ssim_t
from .meshing import EmptyMeshError, TriMesh

PSNR_CAP = 100.0


@dataclass
class GeoMetrics:
    chamfer: float
    precision: float
    recall: float
    f1: float
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform points on a triangle mesh."""
    if mesh.is_empty():
        raise EmptyMeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.areas()
    total = area.sum()
    if not total > 0:
        raise EmptyMeshError("mesh has zero area")
    tri = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])


def nearest_distances(query: np.ndarray, points: np.ndarray) -> np.ndarray:
    return cKDTree(points).query(query, k=1)[0]


def chamfer(pred: TriMesh, gt: TriMesh, n_samples: int = 100_000, seed: int = 0) -> float:
    a = sample_surface(pred, n_samples, seed)
    b = sample_surface(gt, n_samples, seed)
    return chamfer_points(a, b)


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * (nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def f1_score(pred: TriMesh, gt: TriMesh, tau: float = 0.005,
             n_samples: int = 100_000, seed: int = 0, with_chamfer: bool = True) -> GeoMetrics:
    """Vertex precision/recall at threshold tau and their harmonic mean.

    Recall counts ground-truth vertices that have a predicted vertex closer
    than tau.
    """
    if len(pred.vertices) == 0 or len(gt.vertices) == 0:
        raise EmptyMeshError("precision/recall need non-empty vertex sets")
    p = float((nearest_distances(pred.vertices, gt.vertices) < tau).mean())
    r = float((nearest_distances(gt.vertices, pred.vertices) < tau).mean())
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    cd = chamfer(pred, gt, n_samples, seed) if with_chamfer else float("nan")
    return GeoMetrics(chamfer=cd, precision=p, recall=r, f1=f, tau=tau)


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def masked_psnr(a, b, mask) -> float:
    m = np.asarray(mask) > 0
    return psnr(np.asarray(a)[m], np.asarray(b)[m])


def ssim(a, b) -> float:
    return float(_ssim_t(a, b))
