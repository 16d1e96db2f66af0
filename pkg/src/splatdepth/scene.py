"""Gaussian scene storage, activation and the binary scene container.

Parameters are kept in their optimisation form: opacity and transparency as
logits, scales as logs, rotations as (w, x, y, z) quaternions.  Everything in a
:class:`SceneFile` is float32 because that is what goes to disk; the trainer
promotes to float64 internally.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .appearance import AsgBank

MAGIC = b"SPLATDP\x00"
VERSION = 1
TEXT_MAGIC = "# splatdepth-scene v1"


class SceneFormatError(ValueError):
    """Raised when a scene container cannot be parsed or violates an invariant."""

    def __init__(self, kind: str, message: str, record: int | None = None):
        self.kind = kind
        self.record = record
        where = f" (record {record})" if record is not None else ""
        super().__init__(f"{kind}: {message}{where}")


class SceneIOError(OSError):
    kind = "io-failure"


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Gaussian:
    """One stored splat record (pre-activation)."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    tau_logit: float
    asg_feature: np.ndarray


@dataclass
class ActivatedGaussian:
    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray
    tau: float
    asg_feature: np.ndarray


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def activate(g: Gaussian) -> ActivatedGaussian:
    """Map stored parameters of a single Gaussian to rendering values."""
    r = np.asarray(g.rotation, dtype=np.float64)
    return ActivatedGaussian(
        center=np.asarray(g.center, dtype=np.float64),
        rotation=r / np.linalg.norm(r),
        scale=np.exp(np.asarray(g.log_scale, dtype=np.float64)),
        opacity=float(_sigmoid(g.opacity_logit)),
        sh=np.asarray(g.sh, dtype=np.float64),
        tau=float(_sigmoid(g.tau_logit)),
        asg_feature=np.asarray(g.asg_feature, dtype=np.float64),
    )


@dataclass
class SceneFile:
    """Struct-of-arrays container for N Gaussians plus global metadata."""

    centers: np.ndarray          # (N, 3)
    rotations: np.ndarray        # (N, 4) w, x, y, z
    log_scales: np.ndarray       # (N, 3)
    opacity_logits: np.ndarray   # (N,)
    sh: np.ndarray               # (N, (L+1)^2, 3)
    tau_logits: np.ndarray       # (N,)
    asg: np.ndarray              # (N, K*F)
    sh_degree: int = 3
    asg_k: int = 16
    asg_f: int = 8
    unit_scale: float = 1.0
    bank: AsgBank | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        f32 = np.float32
        n = len(self.centers)
        self.centers = np.ascontiguousarray(self.centers, dtype=f32).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=f32).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=f32).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=f32).reshape(n)
        self.sh = np.ascontiguousarray(self.sh, dtype=f32).reshape(n, sh_coeff_count(self.sh_degree), 3)
        self.tau_logits = np.ascontiguousarray(self.tau_logits, dtype=f32).reshape(n)
        self.asg = np.ascontiguousarray(self.asg, dtype=f32).reshape(n, self.asg_k * self.asg_f)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def record_width(self) -> int:
        return 3 + 4 + 3 + 1 + 3 * sh_coeff_count(self.sh_degree) + 1 + self.asg_k * self.asg_f

    @classmethod
    def empty(cls, sh_degree=3, asg_k=16, asg_f=8, bank=None) -> "SceneFile":
        return cls.from_activated(
            np.zeros((0, 3)), np.zeros((0, 4)), np.ones((0, 3)), np.zeros(0),
            np.zeros((0, sh_coeff_count(sh_degree), 3)), np.zeros(0),
            sh_degree=sh_degree, asg_k=asg_k, asg_f=asg_f, bank=bank,
        )

    @classmethod
    def from_activated(cls, centers, rotations, scales, opacities, sh, taus,
                       asg=None, sh_degree=3, asg_k=16, asg_f=8, bank=None,
                       unit_scale=1.0) -> "SceneFile":
        n = len(centers)
        if asg is None:
            asg = np.zeros((n, asg_k * asg_f))
        eps = 1e-6
        return cls(
            centers=centers,
            rotations=rotations,
            log_scales=np.log(np.asarray(scales, dtype=np.float64)),
            opacity_logits=_logit(np.clip(opacities, eps, 1 - eps)),
            sh=sh,
            tau_logits=_logit(np.clip(taus, eps, 1 - eps)),
            asg=asg,
            sh_degree=sh_degree, asg_k=asg_k, asg_f=asg_f,
            unit_scale=unit_scale, bank=bank,
        )

    def record(self, i: int) -> Gaussian:
        return Gaussian(
            center=self.centers[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
            tau_logit=float(self.tau_logits[i]),
            asg_feature=self.asg[i].copy(),
        )

    def subset(self, index) -> "SceneFile":
        index = np.asarray(index)
        return replace(
            self,
            centers=self.centers[index], rotations=self.rotations[index],
            log_scales=self.log_scales[index], opacity_logits=self.opacity_logits[index],
            sh=self.sh[index], tau_logits=self.tau_logits[index], asg=self.asg[index],
            extra=dict(self.extra),
        )

    def concat(self, other: "SceneFile") -> "SceneFile":
        return replace(
            self,
            centers=np.concatenate([self.centers, other.centers]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            opacity_logits=np.concatenate([self.opacity_logits, other.opacity_logits]),
            sh=np.concatenate([self.sh, other.sh]),
            tau_logits=np.concatenate([self.tau_logits, other.tau_logits]),
            asg=np.concatenate([self.asg, other.asg]),
            extra=dict(self.extra),
        )

    def packed(self) -> np.ndarray:
        """Records as one (N, record_width) float32 array in file order."""
        n = len(self)
        return np.concatenate(
            [
                self.centers, self.rotations, self.log_scales,
                self.opacity_logits[:, None], self.sh.reshape(n, 3 * sh_coeff_count(self.sh_degree)),
                self.tau_logits[:, None], self.asg,
            ],
            axis=1,
        ).astype(np.float32)

    def canonical_order(self) -> np.ndarray:
        """Permutation sorting records by their packed content.

        Rendering goes through this order so that shuffling the records of a
        scene cannot change a single output bit.
        """
        packed = self.packed()
        if len(packed) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.lexsort(packed.T[::-1])

    def activated_arrays(self) -> dict:
        q = self.rotations.astype(np.float64)
        return {
            "centers": self.centers.astype(np.float64),
            "rotations": q / np.linalg.norm(q, axis=1, keepdims=True),
            "scales": np.exp(self.log_scales.astype(np.float64)),
            "opacities": _sigmoid(self.opacity_logits),
            "taus": _sigmoid(self.tau_logits),
        }

    def validate(self) -> None:
        if len(self) == 0:
            raise SceneFormatError("empty-scene", "scene has no records")
        packed = self.packed()
        bad = ~np.isfinite(packed).all(axis=1)
        if bad.any():
            raise SceneFormatError("nonfinite-field", "non-finite stored value", int(np.argmax(bad)))
        qn = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if (qn == 0).any():
            raise SceneFormatError("invalid-rotation", "zero quaternion", int(np.argmax(qn == 0)))

    def metadata(self) -> dict:
        meta = {
            "asg_f": int(self.asg_f),
            "asg_k": int(self.asg_k),
            "count": len(self),
            "record_width": self.record_width,
            "sh_degree": int(self.sh_degree),
            "unit_scale": float(self.unit_scale),
            "bank": None if self.bank is None else self.bank.shape_info(),
        }
        if self.extra:
            meta["extra"] = self.extra
        return meta


def _header_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def scene_to_bytes(scene: SceneFile) -> bytes:
    buf = io.BytesIO()
    header = _header_bytes(scene.metadata())
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    bank = np.zeros(0, dtype="<f4") if scene.bank is None else scene.bank.pack().astype("<f4")
    buf.write(struct.pack("<I", bank.size))
    buf.write(bank.tobytes())
    buf.write(scene.packed().astype("<f4").tobytes())
    return buf.getvalue()


def scene_from_bytes(data: bytes) -> SceneFile:
    if len(data) < 16 or data[:8] != MAGIC:
        raise SceneFormatError("malformed-header", "bad magic")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise SceneFormatError("malformed-header", f"unsupported version {version}")
    off = 16
    try:
        meta = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (nbank,) = struct.unpack_from("<I", data, off)
        off += 4
        count = int(meta["count"])
        width = int(meta["record_width"])
        sh_degree = int(meta["sh_degree"])
        asg_k, asg_f = int(meta["asg_k"]), int(meta["asg_f"])
    except (ValueError, KeyError, TypeError, struct.error, UnicodeDecodeError) as exc:
        raise SceneFormatError("malformed-header", str(exc)) from None
    expected_width = 3 + 4 + 3 + 1 + 3 * sh_coeff_count(sh_degree) + 1 + asg_k * asg_f
    if width != expected_width:
        raise SceneFormatError("malformed-header", f"record width {width} != {expected_width}")
    if len(data) != off + 4 * nbank + 4 * count * width:
        raise SceneFormatError("malformed-header", "size does not match header")
    bank_arr = np.frombuffer(data, dtype="<f4", count=nbank, offset=off)
    off += 4 * nbank
    if count == 0:
        raise SceneFormatError("empty-scene", "scene has no records")
    rec = np.frombuffer(data, dtype="<f4", count=count * width, offset=off).reshape(count, width)
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        raise SceneFormatError("nonfinite-field", "non-finite stored value", int(np.argmax(bad)))
    bank = None
    if meta.get("bank") is not None:
        bank = AsgBank.unpack(bank_arr, meta["bank"])
    scene = _unpack_records(rec, sh_degree, asg_k, asg_f)
    scene.unit_scale = float(meta["unit_scale"])
    scene.bank = bank
    scene.extra = meta.get("extra", {})
    scene.validate()
    return scene


def _unpack_records(rec: np.ndarray, sh_degree: int, asg_k: int, asg_f: int) -> SceneFile:
    n = len(rec)
    nsh = 3 * sh_coeff_count(sh_degree)
    c = 0

    def take(w):
        nonlocal c
        out = rec[:, c:c + w]
        c += w
        return out

    return SceneFile(
        centers=take(3), rotations=take(4), log_scales=take(3),
        opacity_logits=take(1)[:, 0], sh=take(nsh).reshape(n, -1, 3),
        tau_logits=take(1)[:, 0], asg=take(asg_k * asg_f),
        sh_degree=sh_degree, asg_k=asg_k, asg_f=asg_f,
    )


def save_scene(scene: SceneFile, path) -> None:
    data = scene_to_bytes(scene)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise SceneIOError(f"io-failure: cannot write {path}: {exc}") from exc


def load_scene(path) -> SceneFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SceneIOError(f"io-failure: cannot read {path}: {exc}") from exc
    return scene_from_bytes(data)


def _fmt32(x) -> str:
    return np.format_float_positional(np.float32(x), unique=True, trim="-") if np.isfinite(x) else repr(float(x))


def export_text(scene: SceneFile) -> str:
    """Human-readable dump; ``import_text`` inverts it exactly."""
    lines = [TEXT_MAGIC, "meta " + _header_bytes(scene.metadata()).decode()]
    if scene.bank is not None:
        lines.append("bank " + " ".join(_fmt32(v) for v in scene.bank.pack()))
    for row in scene.packed():
        lines.append(" ".join(_fmt32(v) for v in row))
    return "\n".join(lines) + "\n"


def import_text(text: str) -> SceneFile:
    lines = text.splitlines()
    if not lines or lines[0] != TEXT_MAGIC or not lines[1].startswith("meta "):
        raise SceneFormatError("malformed-header", "not a text scene export")
    meta = json.loads(lines[1][5:])
    body = lines[2:]
    bank = None
    if body and body[0].startswith("bank "):
        bank = AsgBank.unpack(np.array(body[0][5:].split(), dtype=np.float32), meta["bank"])
        body = body[1:]
    rec = np.array([ln.split() for ln in body], dtype=np.float32).reshape(len(body), -1)
    scene = _unpack_records(rec, meta["sh_degree"], meta["asg_k"], meta["asg_f"])
    scene.unit_scale = meta["unit_scale"]
    scene.bank = bank
    scene.extra = meta.get("extra", {})
    return scene
