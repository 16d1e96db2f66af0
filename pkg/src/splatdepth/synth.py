"""Synthetic scenes with analytic ground truth.

Geometry (depth, normals, transparency masks, meshes) is computed from the
scenario description by ray intersection, never by the splat renderer.  The
de-lighted images are renders of the generated splat scene; the captured
images add an analytic specular lobe on the transparent plate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .appearance import SH_C0
from .camera import CameraView, intrinsics, load_camera, look_at, save_camera
from .depth import WindowSearchConfig, extract_all
from .imgio import read_mask, read_pfm, read_png, write_mask, write_pfm, write_png
from .losses import PriorInputs
from .meshing import TriMesh, load_ply, save_ply
from .projection import LOWPASS
from .rasterizer import ALPHA_MAX, ALPHA_MIN, render_view
from .scene import SceneFile, load_scene, save_scene, sh_coeff_count

SCENARIOS = ("plate-over-wall", "sphere", "opaque-wall", "floater-field")


class InvalidSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    scenario: str = "plate-over-wall"
    # planes (z = const, facing the cameras)
    d1: float = 1.0
    d2: float = 1.5
    plate_half: float = 0.15
    plate_opacity: float = 0.64
    plate_spacing: float = 0.01
    plate_sigma: float = 0.7          # splat std as a fraction of the spacing
    plate_margin: float = 2.5         # grid overhang past the footprint, in spacings
    plate_color: tuple = (0.55, 0.75, 0.85)
    wall_spacing: float = 0.04
    wall_opacity: float = 0.99
    wall_period: float = 0.3
    # floaters in front of the plate
    floater_fraction: float = 0.05
    floater_opacity: float = 0.15
    floater_size: float = 0.015
    floater_gap: tuple = (0.05, 0.3)
    # sphere
    sphere_radius: float = 0.3
    sphere_depth: float = 1.5
    sphere_spacing: float = 0.02
    # cameras
    n_views: int = 8
    ring_radius: float = 0.2
    fov: float = 40.0
    look: str = ""            # "forward" or "center"; empty picks per scenario
    width: int = 128
    height: int = 128
    # specular lobe on the plate, present only in the captured images
    highlight_dir: tuple = (0.05, -0.05, -1.0)   # toward the light
    highlight_intensity: float = 0.5
    highlight_sharpness: float = 200.0
    prior_flip_fraction: float = 0.0
    mesh_spacing: float = 0.004
    sh_degree: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise InvalidSpecError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if not 0 < self.d1 < self.d2:
            raise InvalidSpecError(f"need 0 < d1 < d2, got d1={self.d1}, d2={self.d2}")
        for name in ("plate_opacity", "wall_opacity", "floater_opacity"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidSpecError(f"{name} must lie in (0, 1), got {v}")
        if self.n_views < 1:
            raise InvalidSpecError("need at least one view")
        if self.width < 1 or self.height < 1:
            raise InvalidSpecError("image size must be positive")
        for name in ("plate_half", "plate_spacing", "wall_spacing", "sphere_radius",
                     "sphere_spacing", "mesh_spacing", "floater_size", "fov", "plate_sigma"):
            if not getattr(self, name) > 0:
                raise InvalidSpecError(f"{name} must be positive")
        if not 0 <= self.floater_fraction <= 1 or not 0 <= self.prior_flip_fraction <= 1:
            raise InvalidSpecError("fractions must lie in [0, 1]")
        if self.plate_margin < 0:
            raise InvalidSpecError("plate_margin must be >= 0")
        if self.look not in ("", "forward", "center"):
            raise InvalidSpecError(f"unknown camera mode {self.look!r}")

    @property
    def look_mode(self) -> str:
        if self.look:
            return self.look
        return "center" if self.scenario == "sphere" else "forward"

    @property
    def has_plate(self) -> bool:
        return self.scenario in ("plate-over-wall", "floater-field")

    @property
    def has_wall(self) -> bool:
        return self.scenario in ("plate-over-wall", "opaque-wall", "floater-field")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpecError(f"unknown synth keys: {sorted(unknown)}")
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**vals)


@dataclass
class ViewTruth:
    depth: np.ndarray          # z-depth of the first real surface, 0 = no hit
    normal: np.ndarray         # camera-facing world normal
    mask: np.ndarray           # 1 on the transparent plate
    image_delit: np.ndarray
    image_gt: np.ndarray
    highlight: np.ndarray      # additive lobe (before clipping)
    prior_normal: np.ndarray   # normal prior handed to training

    def priors(self) -> PriorInputs:
        return PriorInputs(self.image_gt, self.image_delit, self.mask, self.prior_normal)


@dataclass
class GroundTruth:
    spec: SynthSpec
    cameras: list
    views: list
    mesh: TriMesh
    plate_splat_opacity: float = 0.0
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# cameras


def make_cameras(spec: SynthSpec) -> list[CameraView]:
    K = intrinsics(spec.width, spec.height, spec.fov)
    target_depth = spec.sphere_depth if spec.scenario == "sphere" else spec.d1
    cams = []
    for i in range(spec.n_views):
        phi = 2 * np.pi * i / spec.n_views
        eye = np.array([spec.ring_radius * np.cos(phi), spec.ring_radius * np.sin(phi), 0.0])
        if spec.look_mode == "forward":
            target = eye + np.array([0.0, 0.0, 1.0])
        else:
            target = np.array([0.0, 0.0, target_depth])
        cams.append(CameraView(K, look_at(eye, target), spec.width, spec.height))
    return cams


# --------------------------------------------------------------------------
# splat construction


def _quat_z_to(n: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) rotating +z onto each row of ``n``."""
    z = np.array([0.0, 0.0, 1.0])
    d = n @ z
    axis = np.cross(np.broadcast_to(z, n.shape), n)
    q = np.concatenate([(1.0 + d)[:, None], axis], axis=1)
    flip = d < -1 + 1e-12
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _sh_from_rgb(rgb: np.ndarray, degree: int) -> np.ndarray:
    rgb = np.atleast_2d(rgb)
    sh = np.zeros((len(rgb), sh_coeff_count(degree), 3))
    sh[:, 0] = rgb / SH_C0
    return sh


def wall_color(x: np.ndarray, y: np.ndarray, period: float) -> np.ndarray:
    k = 2 * np.pi / period
    base = np.array([0.45, 0.4, 0.35])
    tex = 0.2 * np.sin(k * x)[..., None] * np.array([1.0, 0.4, -0.3]) \
        + 0.2 * np.sin(k * y)[..., None] * np.array([-0.2, 0.5, 1.0])
    return np.clip(base + tex, 0.02, 0.98)


def plate_alpha_model(o: float, spacing_px: float, sigma_px: float, phases: int = 16) -> float:
    """Mean composited alpha of an infinite square lattice of isotropic splats.

    An independent per-pixel model of the compositing rules (clamp, cutoff)
    averaged over sub-cell pixel positions.
    """
    reach = int(np.ceil(4.0 * sigma_px / spacing_px)) + 1
    lat = np.arange(-reach, reach + 1) * spacing_px
    gx, gy = np.meshgrid(lat, lat)
    ph = (np.arange(phases) + 0.5) / phases * spacing_px
    total = 0.0
    for px in ph:
        for py in ph:
            r2 = (gx - px) ** 2 + (gy - py) ** 2
            a = np.minimum(ALPHA_MAX, o * np.exp(-0.5 * r2 / sigma_px ** 2))
            a = np.where(a < ALPHA_MIN, 0.0, a)
            total += 1.0 - np.prod(1.0 - a)
    return total / phases ** 2


def calibrate_splat_opacity(target: float, spacing_px: float, sigma_px: float,
                            iters: int = 60) -> float:
    """Per-splat opacity giving the requested net lattice alpha (bisection)."""
    lo, hi = 1e-4, ALPHA_MAX
    if plate_alpha_model(hi, spacing_px, sigma_px) < target:
        raise InvalidSpecError(f"net opacity {target} unreachable with this splat density")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if plate_alpha_model(mid, spacing_px, sigma_px) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _grid(half_x: float, half_y: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    nx = int(np.floor(half_x / spacing))
    ny = int(np.floor(half_y / spacing))
    xs = np.arange(-nx, nx + 1) * spacing
    ys = np.arange(-ny, ny + 1) * spacing
    gx, gy = np.meshgrid(xs, ys)
    return gx.ravel(), gy.ravel()


def wall_half_extent(spec: SynthSpec, cams) -> tuple[float, float]:
    """Half-size of a wall at d2 that fills every view."""
    hx = hy = 0.0
    for cam in cams:
        corners = np.array([[0, 0], [cam.width, 0], [0, cam.height], [cam.width, cam.height]],
                           dtype=np.float64)
        pix = np.c_[corners, np.ones(4)] @ np.linalg.inv(cam.K).T
        dirs = pix @ cam.R
        o = cam.center
        t = (spec.d2 - o[2]) / dirs[:, 2]
        p = o + t[:, None] * dirs
        hx = max(hx, np.abs(p[:, 0]).max())
        hy = max(hy, np.abs(p[:, 1]).max())
    pad = 3 * spec.wall_spacing
    return hx + pad, hy + pad


def _plane_splats(gx, gy, depth, spacing, opacity, colors, tau, degree, sigma=None):
    n = len(gx)
    sigma = spacing if sigma is None else sigma
    centers = np.c_[gx, gy, np.full(n, depth)]
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    thin = 5e-4 * spacing
    scales = np.tile([sigma, sigma, thin], (n, 1))
    return centers, rot, scales, np.full(n, opacity), _sh_from_rgb(colors, degree), np.full(n, tau)


def build_scene(spec: SynthSpec, cams) -> tuple[SceneFile, float]:
    rng = np.random.default_rng(spec.seed)
    parts = []
    plate_o = 0.0
    if spec.has_wall:
        hx, hy = wall_half_extent(spec, cams)
        gx, gy = _grid(hx, hy, spec.wall_spacing)
        parts.append(_plane_splats(gx, gy, spec.d2, spec.wall_spacing, spec.wall_opacity,
                                   wall_color(gx, gy, spec.wall_period), 0.0, spec.sh_degree))
    if spec.has_plate:
        cam = cams[0]
        fx = cam.fx
        spacing_px = fx * spec.plate_spacing / spec.d1
        sigma = spec.plate_sigma * spec.plate_spacing
        sigma_px = np.sqrt((fx * sigma / spec.d1) ** 2 + LOWPASS)
        plate_o = calibrate_splat_opacity(spec.plate_opacity, spacing_px, sigma_px)
        # splats spill past the footprint so coverage is uniform up to its edge
        half = spec.plate_half + spec.plate_margin * spec.plate_spacing
        gx, gy = _grid(half, half, spec.plate_spacing)
        col = np.tile(np.asarray(spec.plate_color, dtype=np.float64), (len(gx), 1))
        parts.append(_plane_splats(gx, gy, spec.d1, spec.plate_spacing, plate_o, col, 1.0,
                                   spec.sh_degree, sigma))
        if spec.scenario == "floater-field":
            nf = int(round(spec.floater_fraction * len(gx)))
            fxy = rng.uniform(-spec.plate_half, spec.plate_half, (nf, 2))
            fz = spec.d1 - rng.uniform(*spec.floater_gap, nf)
            q = rng.normal(size=(nf, 4))
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            s = spec.floater_size * np.tile([1.0, 1.0, 0.3], (nf, 1))
            gray = rng.uniform(0.2, 0.8, (nf, 1)) * np.ones((1, 3))
            parts.append((np.c_[fxy, fz], q, s, np.full(nf, spec.floater_opacity),
                          _sh_from_rgb(gray, spec.sh_degree), np.zeros(nf)))
    if spec.scenario == "sphere":
        n = int(np.ceil(4 * np.pi * spec.sphere_radius ** 2 / spec.sphere_spacing ** 2))
        nrm = _fibonacci(n)
        centers = np.array([0.0, 0.0, spec.sphere_depth]) + spec.sphere_radius * nrm
        rot = _quat_z_to(nrm)
        scales = np.tile([spec.sphere_spacing, spec.sphere_spacing, 5e-4 * spec.sphere_spacing],
                         (n, 1))
        colors = np.clip(0.5 + 0.35 * nrm, 0.05, 0.95)
        parts.append((centers, rot, scales, np.full(n, 0.95), _sh_from_rgb(colors, spec.sh_degree),
                      np.zeros(n)))
    cat = [np.concatenate([p[i] for p in parts]) for i in range(6)]
    scene = SceneFile.from_activated(*cat, sh_degree=spec.sh_degree)
    return scene, plate_o


def _fibonacci(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


# --------------------------------------------------------------------------
# analytic ground truth


def _hit_plane(o, dirs, z, half_x, half_y):
    t = (z - o[2]) / dirs[..., 2]
    p = o + t[..., None] * dirs
    ok = (t > 0) & (np.abs(p[..., 0]) <= half_x) & (np.abs(p[..., 1]) <= half_y)
    return np.where(ok, t, np.inf)


def _hit_sphere(o, dirs, c, r):
    oc = o - c
    b = dirs @ oc
    disc = b * b - (oc @ oc - r * r)
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def view_geometry(spec: SynthSpec, cam: CameraView, wall_half) -> dict:
    dirs, cos = cam.world_rays()
    o = cam.center
    H, W = cam.height, cam.width
    t_best = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))
    mask = np.zeros((H, W))
    facing = np.array([0.0, 0.0, -1.0])
    if spec.has_wall:
        t = _hit_plane(o, dirs, spec.d2, *wall_half)
        hit = t < t_best
        t_best = np.where(hit, t, t_best)
        normal[hit] = facing
    if spec.has_plate:
        t = _hit_plane(o, dirs, spec.d1, spec.plate_half, spec.plate_half)
        hit = t < t_best
        t_best = np.where(hit, t, t_best)
        normal[hit] = facing
        mask[hit] = 1.0
    if spec.scenario == "sphere":
        c = np.array([0.0, 0.0, spec.sphere_depth])
        t = _hit_sphere(o, dirs, c, spec.sphere_radius)
        hit = t < t_best
        t_best = np.where(hit, t, t_best)
        p = o + t[..., None] * dirs
        normal[hit] = ((p - c) / spec.sphere_radius)[hit]
    valid = np.isfinite(t_best)
    depth = np.where(valid, t_best * cos, 0.0)
    # highlight: lobe around the mirror direction of the light on the plate
    L = np.asarray(spec.highlight_dir, dtype=np.float64)
    L = L / np.linalg.norm(L)
    refl = dirs - 2 * (dirs @ facing)[..., None] * facing
    lobe = spec.highlight_intensity * np.exp(spec.highlight_sharpness * (refl @ L - 1.0))
    highlight = np.where(mask > 0, lobe, 0.0)
    return {"depth": depth, "normal": normal, "mask": mask, "highlight": highlight}


def _plane_mesh(z, half_x, half_y, spacing) -> TriMesh:
    nx = max(1, int(np.ceil(2 * half_x / spacing)))
    ny = max(1, int(np.ceil(2 * half_y / spacing)))
    xs = np.linspace(-half_x, half_x, nx + 1)
    ys = np.linspace(-half_y, half_y, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.c_[gx.ravel(), gy.ravel(), np.full(gx.size, z)]
    idx = np.arange(gx.size).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.c_[a, c, b], np.c_[b, c, d]])
    return TriMesh(verts, faces)


def _sphere_mesh(center, r, spacing) -> TriMesh:
    m = max(2, int(np.ceil(np.pi * r / 2 / spacing)))
    g = np.linspace(-1, 1, m + 1)
    u, v = np.meshgrid(g, g)
    idx = np.arange(u.size).reshape(m + 1, m + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    quad = np.concatenate([np.c_[a, c, b], np.c_[b, c, d]])
    meshes = []
    one = np.ones_like(u.ravel())
    for axis in range(3):
        for sign in (1.0, -1.0):
            p = np.empty((u.size, 3))
            p[:, axis] = sign * one
            p[:, (axis + 1) % 3] = u.ravel()
            p[:, (axis + 2) % 3] = v.ravel()
            p /= np.linalg.norm(p, axis=1, keepdims=True)
            faces = quad if sign > 0 else quad[:, ::-1]
            meshes.append(TriMesh(center + r * p, faces))
    return TriMesh.merge(meshes)


def _visible_somewhere(points: np.ndarray, spec: SynthSpec, cams, normals=None,
                       occluder=None) -> np.ndarray:
    vis = np.zeros(len(points), dtype=bool)
    for cam in cams:
        pc = points @ cam.R.T + cam.t
        front = pc[:, 2] > 1e-6
        uv = pc @ cam.K.T
        u = uv[:, 0] / np.where(front, uv[:, 2], 1.0)
        v = uv[:, 1] / np.where(front, uv[:, 2], 1.0)
        ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        o = cam.center
        if normals is not None:
            ok &= ((o - points) * normals).sum(1) > 0
        if occluder is not None:
            z, half = occluder
            d = points - o
            t = (z - o[2]) / d[:, 2]
            p = o + t[:, None] * d
            blocked = (t > 0) & (t < 1) & (np.abs(p[:, 0]) <= half) & (np.abs(p[:, 1]) <= half)
            ok &= ~blocked
        vis |= ok
    return vis


def gt_mesh(spec: SynthSpec, cams, wall_half) -> TriMesh:
    """Analytic surfaces restricted to what at least one view sees first."""
    meshes = []
    if spec.has_wall:
        m = _plane_mesh(spec.d2, *wall_half, spec.mesh_spacing)
        occ = (spec.d1, spec.plate_half) if spec.has_plate else None
        vis = _visible_somewhere(m.vertices, spec, cams, occluder=occ)
        meshes.append(m.keep_faces(vis[m.faces].all(axis=1)))
    if spec.has_plate:
        m = _plane_mesh(spec.d1, spec.plate_half, spec.plate_half, spec.mesh_spacing)
        vis = _visible_somewhere(m.vertices, spec, cams)
        meshes.append(m.keep_faces(vis[m.faces].all(axis=1)))
    if spec.scenario == "sphere":
        c = np.array([0.0, 0.0, spec.sphere_depth])
        m = _sphere_mesh(c, spec.sphere_radius, spec.mesh_spacing)
        nrm = (m.vertices - c) / spec.sphere_radius
        vis = _visible_somewhere(m.vertices, spec, cams, normals=nrm)
        meshes.append(m.keep_faces(vis[m.faces].all(axis=1)))
    return TriMesh.merge(meshes)


# --------------------------------------------------------------------------


def generate(spec: SynthSpec) -> tuple[SceneFile, GroundTruth]:
    spec.validate()
    cams = make_cameras(spec)
    scene, plate_o = build_scene(spec, cams)
    wall_half = wall_half_extent(spec, cams) if spec.has_wall else (0.0, 0.0)
    rng = np.random.default_rng(spec.seed + 1)
    views = []
    for cam in cams:
        g = view_geometry(spec, cam, wall_half)
        delit = np.clip(render_view(scene, cam, stage=1).color, 0.0, 1.0)
        captured = np.clip(delit + g["highlight"][..., None], 0.0, 1.0)
        prior = g["normal"].copy()
        if spec.prior_flip_fraction > 0:
            flip = rng.random(prior.shape[:2]) < spec.prior_flip_fraction
            prior[flip] *= -1.0
        views.append(ViewTruth(
            depth=g["depth"], normal=g["normal"], mask=g["mask"], image_delit=delit,
            image_gt=captured, highlight=g["highlight"], prior_normal=prior,
        ))
    gt = GroundTruth(spec=spec, cameras=cams, views=views, mesh=gt_mesh(spec, cams, wall_half),
                     plate_splat_opacity=plate_o)
    return scene, gt


def dilemma_report(scene: SceneFile, gt: GroundTruth, cfg: WindowSearchConfig | None = None,
                   views=None) -> list[dict]:
    """Per-estimator error statistics against the analytic depth.

    Pixels are those on the transparent plate when the scene has one, else
    every pixel with a ground-truth hit.  Errors are signed (estimate - truth).
    """
    cfg = cfg or WindowSearchConfig()
    idx = range(len(gt.cameras)) if views is None else views
    errs = {k: [] for k in ("standard", "unbiased", "nearest", "first")}
    for i in idx:
        cam, vt = gt.cameras[i], gt.views[i]
        maps = extract_all(scene, cam, cfg)
        region = vt.mask > 0 if gt.spec.has_plate else vt.depth > 0
        for k in errs:
            errs[k].append((maps.get(k) - vt.depth)[region])
    rows = []
    for k, e in errs.items():
        e = np.concatenate(e) if e else np.zeros(0)
        rows.append({
            "estimator": k,
            "pixels": int(e.size),
            "mean_abs": float(np.abs(e).mean()) if e.size else float("nan"),
            "max_abs": float(np.abs(e).max()) if e.size else float("nan"),
            "signed_mean": float(e.mean()) if e.size else float("nan"),
        })
    return rows


# --------------------------------------------------------------------------
# dataset files


def save_dataset(scene: SceneFile, gt: GroundTruth, out) -> dict:
    out = Path(out)
    for sub in ("views", "priors", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene_gt.splat")
    save_ply(gt.mesh, out / "gt_mesh.ply")
    meta = {"spec": gt.spec.to_dict(), "plate_splat_opacity": gt.plate_splat_opacity,
            "views": len(gt.cameras)}
    (out / "synth.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    for i, (cam, vt) in enumerate(zip(gt.cameras, gt.views)):
        save_camera(cam, out / "views" / f"cam_{i:03d}.json")
        write_png(out / "views" / f"image_{i:03d}.png", vt.image_gt, bits=16)
        write_png(out / "priors" / f"delit_{i:03d}.png", vt.image_delit, bits=16)
        write_mask(out / "priors" / f"mask_{i:03d}.png", vt.mask)
        write_pfm(out / "priors" / f"normal_{i:03d}.pfm", vt.prior_normal)
        write_pfm(out / "gt" / f"depth_{i:03d}.pfm", vt.depth)
        write_pfm(out / "gt" / f"normal_{i:03d}.pfm", vt.normal)
        write_pfm(out / "gt" / f"highlight_{i:03d}.pfm", vt.highlight)
    return meta


def load_views(root) -> tuple[list[CameraView], list[np.ndarray]]:
    root = Path(root)
    cams = [load_camera(p) for p in sorted(root.glob("cam_*.json"))]
    imgs = [read_png(p) for p in sorted(root.glob("image_*.png"))]
    if not cams or len(cams) != len(imgs):
        raise FileNotFoundError(f"{root}: expected matching cam_*.json and image_*.png files")
    return cams, imgs


def load_priors(root, images) -> list[PriorInputs]:
    root = Path(root)
    out = []
    for i, img in enumerate(images):
        p = PriorInputs(
            image_gt=img,
            image_delit=read_png(root / f"delit_{i:03d}.png"),
            mask=read_mask(root / f"mask_{i:03d}.png"),
            normals=read_pfm(root / f"normal_{i:03d}.pfm").astype(np.float64),
        )
        p.validate()
        out.append(p)
    return out


def load_dataset(root) -> tuple[SceneFile, GroundTruth]:
    root = Path(root)
    meta = json.loads((root / "synth.json").read_text())
    spec = SynthSpec.from_dict(meta["spec"])
    cams, imgs = load_views(root / "views")
    priors = load_priors(root / "priors", imgs)
    views = []
    for i, p in enumerate(priors):
        views.append(ViewTruth(
            depth=read_pfm(root / "gt" / f"depth_{i:03d}.pfm").astype(np.float64),
            normal=read_pfm(root / "gt" / f"normal_{i:03d}.pfm").astype(np.float64),
            mask=p.mask, image_delit=p.image_delit, image_gt=p.image_gt,
            highlight=read_pfm(root / "gt" / f"highlight_{i:03d}.pfm").astype(np.float64),
            prior_normal=p.normals,
        ))
    gt = GroundTruth(spec=spec, cameras=cams, views=views, mesh=load_ply(root / "gt_mesh.ply"),
                     plate_splat_opacity=meta["plate_splat_opacity"])
    return load_scene(root / "scene_gt.splat"), gt
