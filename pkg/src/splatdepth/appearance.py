"""Per-Gaussian colour: SH diffuse term and the ASG-driven specular term."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

DTYPE = torch.float64


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis values, shape (..., (degree+1)**2), for unit ``dirs``."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    if degree > 3:
        raise ValueError("SH degree above 3 is not supported")
    return torch.stack(out, dim=-1)


def sh_eval_t(coeffs: torch.Tensor, dirs: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """coeffs (N, C, 3), dirs (N, 3) -> rgb (N, 3)."""
    degree = int(round(math.sqrt(coeffs.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    rgb = (basis[..., :, None] * coeffs).sum(dim=-2)
    return rgb.clamp_min(0.0) if clamp else rgb


def sh_eval(coeffs, d) -> np.ndarray:
    """Evaluate real SH colour for one Gaussian (coeffs (C, 3)) or a batch."""
    c = torch.as_tensor(np.asarray(coeffs, dtype=np.float64))
    v = torch.as_tensor(np.asarray(d, dtype=np.float64))
    squeeze = c.dim() == 2
    if squeeze:
        c, v = c[None], v[None]
    out = sh_eval_t(c, v).numpy()
    return out[0] if squeeze else out


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def frame_from_axis(axis: np.ndarray) -> np.ndarray:
    """Rows (tangent_x, tangent_y, axis) of an orthonormal frame around ``axis``."""
    z = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


@dataclass
class AsgBank:
    """K shared ASG lobes plus the tiny decoder that maps features to RGB.

    ``frames[k]`` holds rows (x, y, z) with z the lobe axis.  Sharpness is kept
    as logs; the lobe frames are fixed, everything else is trainable.
    """

    frames: np.ndarray      # (K, 3, 3)
    log_lambda: np.ndarray  # (K,)
    log_mu: np.ndarray      # (K,)
    amplitude: np.ndarray   # (K, F)
    w1: np.ndarray          # (D_in, H)
    b1: np.ndarray          # (H,)
    w2: np.ndarray          # (H, 3)
    b2: np.ndarray          # (3,)
    n_freqs: int = 4

    TRAINABLE = ("log_lambda", "log_mu", "amplitude", "w1", "b1", "w2", "b2")

    def __post_init__(self):
        for name in ("frames",) + self.TRAINABLE:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))

    @property
    def k(self) -> int:
        return self.frames.shape[0]

    @property
    def f(self) -> int:
        return self.amplitude.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @staticmethod
    def input_width(f: int, n_freqs: int) -> int:
        return f + 2 * n_freqs * 3 + 3 + 3

    @classmethod
    def init(cls, k=16, f=8, n_freqs=4, hidden=32, seed=0, sharpness=10.0,
             out_bias=-4.0) -> "AsgBank":
        rng = np.random.default_rng(seed)
        frames = np.stack([frame_from_axis(a) for a in _fibonacci_sphere(k)])
        d_in = cls.input_width(f, n_freqs)
        return cls(
            frames=frames,
            log_lambda=np.full(k, math.log(sharpness)),
            log_mu=np.full(k, math.log(sharpness)),
            amplitude=np.zeros((k, f)),
            w1=rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 0.1 / math.sqrt(hidden), (hidden, 3)),
            b2=np.full(3, out_bias),
            n_freqs=n_freqs,
        )

    @classmethod
    def zeros(cls, k=16, f=8, n_freqs=4, hidden=32) -> "AsgBank":
        bank = cls.init(k, f, n_freqs, hidden)
        for name in ("amplitude", "w1", "b1", "w2", "b2"):
            setattr(bank, name, np.zeros_like(getattr(bank, name)))
        return bank

    def shape_info(self) -> dict:
        return {"f": self.f, "hidden": self.hidden, "k": self.k, "n_freqs": self.n_freqs}

    def pack(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in ("frames",) + self.TRAINABLE])

    @classmethod
    def unpack(cls, flat, info: dict) -> "AsgBank":
        k, f, h, nf = info["k"], info["f"], info["hidden"], info["n_freqs"]
        d_in = cls.input_width(f, nf)
        shapes = [(k, 3, 3), (k,), (k,), (k, f), (d_in, h), (h,), (h, 3), (3,)]
        flat = np.asarray(flat, dtype=np.float32)
        parts, off = [], 0
        for s in shapes:
            size = int(np.prod(s))
            parts.append(flat[off:off + size].reshape(s))
            off += size
        if off != flat.size:
            raise ValueError("ASG bank payload has the wrong length")
        return cls(*parts, n_freqs=nf)

    def tensors(self, requires_grad: bool = False) -> dict:
        out = {"frames": torch.tensor(self.frames, dtype=DTYPE)}
        for name in self.TRAINABLE:
            out[name] = torch.tensor(getattr(self, name), dtype=DTYPE, requires_grad=requires_grad)
        return out

    @classmethod
    def from_tensors(cls, t: dict, n_freqs: int) -> "AsgBank":
        vals = {n: t[n].detach().cpu().numpy() for n in ("frames",) + cls.TRAINABLE}
        return cls(**vals, n_freqs=n_freqs)


def reflect(d: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    return d - 2.0 * (d * n).sum(-1, keepdim=True) * n


def asg_lobes_t(bank: dict, omega: torch.Tensor) -> torch.Tensor:
    """Unit-amplitude lobe responses, (N, K)."""
    frames = bank["frames"]
    proj = torch.einsum("nd,kcd->nkc", omega, frames)
    a, b, c = proj[..., 0], proj[..., 1], proj[..., 2]
    lam = torch.exp(bank["log_lambda"])
    mu = torch.exp(bank["log_mu"])
    return torch.exp(-lam * a * a - mu * b * b) * c.clamp_min(0.0)


def asg_features_t(bank: dict, d: torch.Tensor, n: torch.Tensor,
                   offsets: torch.Tensor | None = None) -> torch.Tensor:
    """Latent feature per Gaussian, (N, F).

    Lobes are queried along the view direction mirrored about the normal.  A
    Gaussian's own ``offsets`` (N, K*F) add to the shared lobe amplitudes.
    """
    lobes = asg_lobes_t(bank, reflect(d, n))
    amp = bank["amplitude"][None]
    if offsets is not None:
        amp = amp + offsets.reshape(offsets.shape[0], amp.shape[1], amp.shape[2])
        return (lobes[..., None] * amp).sum(dim=1)
    return lobes @ bank["amplitude"]


def positional_encoding(d: torch.Tensor, n_freqs: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(n_freqs, dtype=d.dtype)) * math.pi
    ang = d[..., None, :] * freqs[:, None]
    return torch.cat([torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)], dim=-1)


def decode_t(bank: dict, feat: torch.Tensor, d: torch.Tensor, n: torch.Tensor,
             n_freqs: int) -> torch.Tensor:
    x = torch.cat([feat, positional_encoding(d, n_freqs), n, -d], dim=-1)
    h = torch.relu(x @ bank["w1"] + bank["b1"])
    return torch.sigmoid(h @ bank["w2"] + bank["b2"])


def specular_color_t(bank: dict, d, n, n_freqs: int, offsets=None) -> torch.Tensor:
    return decode_t(bank, asg_features_t(bank, d, n, offsets), d, n, n_freqs)


def full_color_t(sh: torch.Tensor, d: torch.Tensor, n: torch.Tensor, stage: int,
                 bank: dict | None = None, n_freqs: int = 4, offsets=None,
                 specular: bool = True) -> torch.Tensor:
    diffuse = sh_eval_t(sh, d)
    if stage == 1 or bank is None or not specular:
        return diffuse
    spec = specular_color_t(bank, d, n, n_freqs, offsets)
    return (diffuse + spec).clamp(0.0, 1.0)


def _np_bank(bank: AsgBank) -> dict:
    return bank.tensors(requires_grad=False)


def _as_t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def asg_features(bank: AsgBank, d, n, offsets=None) -> np.ndarray:
    """F-vector of ASG responses for view direction ``d`` and normal ``n``."""
    d, n = _as_t(d), _as_t(n)
    single = d.dim() == 1
    if single:
        d, n = d[None], n[None]
        if offsets is not None:
            offsets = np.asarray(offsets)[None]
    off = None if offsets is None else _as_t(offsets)
    out = asg_features_t(_np_bank(bank), d, n, off).numpy()
    return out[0] if single else out


def specular_color(bank: AsgBank, d, n, offsets=None) -> np.ndarray:
    d, n = _as_t(d), _as_t(n)
    single = d.dim() == 1
    if single:
        d, n = d[None], n[None]
        if offsets is not None:
            offsets = np.asarray(offsets)[None]
    off = None if offsets is None else _as_t(offsets)
    out = specular_color_t(_np_bank(bank), d, n, bank.n_freqs, off).numpy()
    return out[0] if single else out


def full_color(sh, d, n, stage: int, bank: AsgBank | None = None, offsets=None) -> np.ndarray:
    sh_t, d_t, n_t = _as_t(sh), _as_t(d), _as_t(n)
    single = d_t.dim() == 1
    if single:
        sh_t, d_t, n_t = sh_t[None], d_t[None], n_t[None]
        if offsets is not None:
            offsets = np.asarray(offsets)[None]
    off = None if offsets is None else _as_t(offsets)
    tb = None if bank is None else _np_bank(bank)
    nf = 4 if bank is None else bank.n_freqs
    out = full_color_t(sh_t, d_t, n_t, stage, tb, nf, off).numpy()
    return out[0] if single else out
