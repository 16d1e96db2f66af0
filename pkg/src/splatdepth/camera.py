"""Pinhole cameras (OpenCV convention: +z forward, +y down)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CameraError(ValueError):
    pass


@dataclass
class CameraView:
    K: np.ndarray        # 3x3 intrinsics, pixels
    W: np.ndarray        # 4x4 world-to-camera
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.W = np.asarray(self.W, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def R(self) -> np.ndarray:
        return self.W[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.W[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    def validate(self) -> None:
        K = self.K
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1:
            raise CameraError("intrinsics must be upper-triangular with positive focal lengths")
        if np.linalg.norm(self.R @ self.R.T - np.eye(3)) >= 1e-6:
            raise CameraError("extrinsic rotation is not orthonormal")
        if not np.allclose(self.W[3], [0, 0, 0, 1]):
            raise CameraError("extrinsics must be a rigid 4x4 transform")
        if self.width <= 0 or self.height <= 0:
            raise CameraError("image size must be positive")

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates (u, v), each (H, W)."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(u, v)

    def camera_rays(self) -> np.ndarray:
        """Unnormalised camera-space rays with z = 1, (H, W, 3)."""
        u, v = self.pixel_grid()
        Kinv = np.linalg.inv(self.K)
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        return pix @ Kinv.T

    def world_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-space ray directions (H, W, 3) and the cosine to the optical axis (H, W)."""
        rc = self.camera_rays()
        norm = np.linalg.norm(rc, axis=-1)
        rc = rc / norm[..., None]
        return rc @ self.R, rc[..., 2]

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "W": self.W.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(K=d["K"], W=d["W"], width=d["width"], height=d["height"])


def intrinsics(width: int, height: int, fov_deg: float) -> np.ndarray:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ eye
    return W


def save_camera(cam: CameraView, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1))


def load_camera(path) -> CameraView:
    cam = CameraView.from_dict(json.loads(Path(path).read_text()))
    cam.validate()
    return cam
