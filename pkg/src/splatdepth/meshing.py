"""TSDF fusion, iso-surface extraction and PLY mesh I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .camera import CameraView


class EmptyIsosurfaceError(ValueError):
    pass


class EmptyMeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray    # (V, 3) float64
    faces: np.ndarray       # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self) -> None:
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh has non-finite vertices")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.faces) == 0

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def translated(self, t) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(t, dtype=np.float64), self.faces.copy())

    def keep_faces(self, keep: np.ndarray) -> "TriMesh":
        """Subset of faces, dropping vertices nobody references."""
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(self.vertices[used], remap[faces])

    @staticmethod
    def merge(meshes) -> "TriMesh":
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        if not verts:
            return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriMesh(np.concatenate(verts), np.concatenate(faces))


# --------------------------------------------------------------------------
# PLY


def save_ply(mesh: TriMesh, path, binary: bool = True) -> None:
    nv, nf = len(mesh.vertices), len(mesh.faces)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {nv}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f4").tobytes())
            rec = np.zeros(nf, dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = mesh.faces
            fh.write(rec.tobytes())
        else:
            for v in mesh.vertices.astype(np.float32):
                fh.write(("%.9g %.9g %.9g\n" % tuple(v)).encode())
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode())


def load_ply(path) -> TriMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = next(line.split()[1] for line in header if line.startswith("format"))
    elements = []
    for line in header:
        parts = line.split()
        if parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
    counts = {name: n for name, n, _ in elements}
    vprops = next(props for name, _, props in elements if name == "vertex")
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    if fmt == "ascii":
        lines = body.decode("ascii").split("\n")
        verts = np.array([[float(x) for x in lines[i].split()[:3]] for i in range(nv)]).reshape(-1, 3)
        faces = np.array([[int(x) for x in lines[nv + i].split()[1:4]] for i in range(nf)],
                         dtype=np.int64).reshape(-1, 3)
        return TriMesh(verts, faces)
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt}")
    sizes = {"float": 4, "double": 8, "uchar": 1, "int": 4, "uint": 4, "char": 1,
             "short": 2, "ushort": 2, "float32": 4, "float64": 8, "int32": 4, "uint8": 1}
    codes = {"float": "f", "double": "d", "uchar": "B", "int": "i", "uint": "I", "char": "b",
             "short": "h", "ushort": "H", "float32": "f", "float64": "d", "int32": "i",
             "uint8": "B"}
    vdtype = np.dtype([(p[-1], "<" + codes[p[0]]) for p in vprops])
    vrec = np.frombuffer(body, dtype=vdtype, count=nv)
    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(np.float64)
    pos = nv * vdtype.itemsize
    faces = np.empty((nf, 3), dtype=np.int64)
    fprops = next((props for name, _, props in elements if name == "face"), [])
    cnt_t, idx_t = fprops[0][1], fprops[0][2]
    for i in range(nf):
        (k,) = struct.unpack_from("<" + codes[cnt_t], body, pos)
        pos += sizes[cnt_t]
        idx = struct.unpack_from(f"<{k}{codes[idx_t]}", body, pos)
        pos += k * sizes[idx_t]
        faces[i] = idx[:3]
    return TriMesh(verts, faces)


# --------------------------------------------------------------------------
# TSDF


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel: float
    dims: tuple
    tsdf: np.ndarray
    weight: np.ndarray
    trunc: float

    @classmethod
    def create(cls, lo, hi, voxel: float = 0.004, trunc_voxels: float = 5.0) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = tuple(int(v) for v in np.maximum(np.ceil((hi - lo) / voxel).astype(int) + 1, 2))
        return cls(
            origin=lo, voxel=float(voxel), dims=dims,
            tsdf=np.ones(dims, dtype=np.float32), weight=np.zeros(dims, dtype=np.float32),
            trunc=float(trunc_voxels * voxel),
        )

    def coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.voxel * np.arange(self.dims[axis])


def _sample_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray, rel_jump: float):
    """Bilinear depth lookup at continuous pixel coords.

    NaN where a tap is a sentinel or the taps straddle a depth jump, so
    silhouette pixels carry no observation.
    """
    H, W = depth.shape
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    y0c = np.clip(y0, 0, H - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)
    d00 = depth[y0c, x0c]
    d01 = depth[y0c, x1c]
    d10 = depth[y1c, x0c]
    d11 = depth[y1c, x1c]
    lo = np.minimum(np.minimum(d00, d01), np.minimum(d10, d11))
    hi = np.maximum(np.maximum(d00, d01), np.maximum(d10, d11))
    out = (d00 * (1 - fx) * (1 - fy) + d01 * fx * (1 - fy) + d10 * (1 - fx) * fy + d11 * fx * fy)
    ok = (lo > 0) & (hi - lo <= rel_jump * np.maximum(lo, 1e-9))
    return np.where(ok, out, np.nan)


def tsdf_integrate(vol: TsdfVolume, depth: np.ndarray, cam: CameraView,
                   rel_jump: float = 0.05, chunk: int = 4) -> TsdfVolume:
    """Fold one z-depth map into the volume in place (and return it).

    Signed distance is measured along the optical axis: positive in front of
    the observed surface.  Voxels farther than the truncation band behind the
    surface are left untouched, as are voxels landing on sentinel pixels.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if not (depth > 0).any():
        return vol
    R, t, K = cam.R, cam.t, cam.K
    xs, ys, zs = vol.coords(0), vol.coords(1), vol.coords(2)
    gy, gz = np.meshgrid(ys, zs, indexing="ij")
    for i0 in range(0, len(xs), chunk):
        xx = xs[i0:i0 + chunk]
        px = np.broadcast_to(xx[:, None, None], (len(xx),) + gy.shape)
        py = np.broadcast_to(gy[None], px.shape)
        pz = np.broadcast_to(gz[None], px.shape)
        cx = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        cy = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        cz = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        front = cz > 1e-6
        zsafe = np.where(front, cz, 1.0)
        u = (K[0, 0] * cx + K[0, 1] * cy) / zsafe + K[0, 2]
        v = K[1, 1] * cy / zsafe + K[1, 2]
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        d = np.full(px.shape, np.nan)
        if inside.any():
            d[inside] = _sample_depth(depth, u[inside], v[inside], rel_jump)
        sdf = d - cz
        upd = inside & np.isfinite(d) & (sdf >= -vol.trunc)
        if not upd.any():
            continue
        tsdf_new = np.minimum(1.0, sdf / vol.trunc)
        ts = vol.tsdf[i0:i0 + chunk]
        wt = vol.weight[i0:i0 + chunk]
        w_old = wt[upd].astype(np.float64)
        ts[upd] = ((ts[upd] * w_old + tsdf_new[upd]) / (w_old + 1.0)).astype(np.float32)
        wt[upd] = (w_old + 1.0).astype(np.float32)
    return vol


def marching_cubes(vol: TsdfVolume, iso: float = 0.0) -> TriMesh:
    """Zero level set of the observed part of the volume.

    A cube emits triangles only when all eight of its corners carry weight.
    """
    obs = vol.weight > 0
    cube = np.zeros_like(obs)
    inner = obs[:-1, :-1, :-1].copy()
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                inner &= obs[a:a + obs.shape[0] - 1, b:b + obs.shape[1] - 1, c:c + obs.shape[2] - 1]
    cube[:-1, :-1, :-1] = inner
    vals = vol.tsdf
    lo = vals[cube].min() if cube.any() else 1.0
    hi = vals[cube].max() if cube.any() else 1.0
    if not (lo < iso < hi):
        raise EmptyIsosurfaceError("volume has no sign change at the iso level")
    verts, faces, _, _ = measure.marching_cubes(
        vals, level=iso, spacing=(vol.voxel,) * 3, mask=cube, allow_degenerate=False
    )
    if len(faces) == 0:
        raise EmptyIsosurfaceError("no triangles extracted")
    return TriMesh(verts + vol.origin, faces)


def sdf_volume(fn, lo, hi, voxel: float) -> TsdfVolume:
    """Volume filled from an analytic signed distance function (for tests)."""
    vol = TsdfVolume.create(lo, hi, voxel)
    gx, gy, gz = np.meshgrid(vol.coords(0), vol.coords(1), vol.coords(2), indexing="ij")
    vol.tsdf = np.clip(fn(gx, gy, gz) / vol.trunc, -1, 1).astype(np.float32)
    vol.weight[:] = 1.0
    return vol


def depth_bounds(depths, cams, margin: float = 0.05):
    """Axis-aligned box around all back-projected valid depths."""
    pts = []
    for d, cam in zip(depths, cams):
        m = d > 0
        if not m.any():
            continue
        rc = cam.camera_rays()[m] * d[m][:, None]
        pts.append((rc - cam.t) @ cam.R)
    if not pts:
        raise EmptyMeshError("no valid depth to fuse")
    p = np.concatenate(pts)
    return p.min(0) - margin, p.max(0) + margin
