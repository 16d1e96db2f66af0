"""PFM and PNG image I/O."""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        header = b"Pf\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        # PFM rows run bottom to top
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * ch)
    img = data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)
    return np.flipud(img).astype(np.float32)


def write_png(path, image: np.ndarray, bits: int = 8) -> None:
    """Write a [0, 1] float image as an 8- or 16-bit PNG."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    maxv = 255 if bits == 8 else 65535
    q = np.round(img * maxv).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write {path}")


def read_png(path) -> np.ndarray:
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise OSError(f"cannot read {path}")
    maxv = 255.0 if q.dtype == np.uint8 else 65535.0
    img = q.astype(np.float64) / maxv
    if img.ndim == 3:
        img = img[..., 2::-1] if img.shape[2] >= 3 else img[..., 0]
    return np.ascontiguousarray(img)


def read_mask(path) -> np.ndarray:
    """Single-channel mask thresholded at mid-grey (128 for 8-bit)."""
    img = read_png(path)
    if img.ndim == 3:
        img = img[..., 0]
    return (img >= 128.0 / 255.0).astype(np.float64)


def write_mask(path, mask: np.ndarray) -> None:
    write_png(path, (np.asarray(mask) > 0.5).astype(np.float64), bits=8)


def read_image(path) -> np.ndarray:
    p = Path(path)
    return read_pfm(p).astype(np.float64) if p.suffix.lower() == ".pfm" else read_png(p)
