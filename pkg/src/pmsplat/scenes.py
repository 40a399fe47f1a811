"""Deterministic synthetic scenes: ray-cast ground truth and canonical point-map corruption.

A scene is a handful of analytic primitives (spheres, yawed boxes and a
finite z-up ground plane) carrying solid value-noise or checker textures, lit
by one directional Lambertian light. Because shading depends only on the
surface point, every view of a scene is photo-consistent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import AffineTransform, CameraModel, PointMap, Space, unproject
from .gaussians import DepthMap

_EPS = 1e-9


@dataclass(frozen=True)
class Texture:
    kind: str = "noise"  # "noise" or "checker"
    cell: float = 0.1  # metres per lattice cell / checker square
    base_color: tuple = (0.6, 0.6, 0.6)
    contrast: float = 0.6
    octaves: int = 2
    seed: int = 0


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere", "box" or "plane"
    center: tuple
    size: tuple  # sphere: (r,); box: half extents; plane: (half_x, half_y)
    yaw: float = 0.0  # boxes only, radians about +z
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if any(s <= 0 for s in self.size):
            raise ValueError("primitive sizes must be positive")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple
    light_dir: tuple = (0.3, -0.5, 0.8)
    ambient: float = 0.35
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not any(p.texture.contrast > 0 for p in self.primitives):
            raise ValueError("scene needs at least one textured primitive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = tuple(
            Primitive(
                kind=p["kind"],
                center=tuple(p["center"]),
                size=tuple(p["size"]),
                yaw=p.get("yaw", 0.0),
                texture=Texture(**{**p.get("texture", {}), "base_color": tuple(p.get("texture", {}).get("base_color", (0.6, 0.6, 0.6)))}),
            )
            for p in d["primitives"]
        )
        return cls(
            seed=int(d["seed"]),
            primitives=prims,
            light_dir=tuple(d.get("light_dir", (0.3, -0.5, 0.8))),
            ambient=d.get("ambient", 0.35),
            background=tuple(d.get("background", (0.0, 0.0, 0.0))),
        )


@dataclass(frozen=True)
class CorruptionSpec:
    true_scale: tuple = (1.0, 1.0, 1.0)
    true_offset: tuple = (0.0, 0.0, 0.0)
    smooth_warp_amplitude: float = 0.0
    smooth_warp_wavelength: float = 64.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.true_scale):
            raise ValueError("true_scale must be positive")
        if self.smooth_warp_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.smooth_warp_wavelength <= 0:
            raise ValueError("warp wavelength must be positive")


@dataclass(frozen=True, eq=False)
class RenderedView:
    image: np.ndarray
    depth: DepthMap
    points: PointMap
    primitive_id: np.ndarray


# --- textures -----------------------------------------------------------------


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    """Smooth (C2) lattice value noise in [0, 1], three decorrelated channels."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    values = rng.random((256, 3))
    base = np.floor(p)
    f = p - base
    i = base.astype(np.int64)
    w = _fade(f)
    out = np.zeros(p.shape[:-1] + (3,))
    for dx in (0, 1):
        wx = w[..., 0] if dx else 1 - w[..., 0]
        for dy in (0, 1):
            wy = w[..., 1] if dy else 1 - w[..., 1]
            for dz in (0, 1):
                wz = w[..., 2] if dz else 1 - w[..., 2]
                h = perm[(i[..., 0] + dx) & 255]
                h = perm[(h + i[..., 1] + dy) & 255]
                h = perm[(h + i[..., 2] + dz) & 255]
                out += (wx * wy * wz)[..., None] * values[h]
    return out


def texture_albedo(tex: Texture, points: np.ndarray, scene_seed: int) -> np.ndarray:
    base = np.asarray(tex.base_color, dtype=np.float64)
    if tex.kind == "checker":
        k = np.floor(points / tex.cell).astype(np.int64).sum(axis=-1) & 1
        mod = np.where(k[..., None] == 1, 1.0, 0.0) * np.ones(3)
    else:
        mod = np.zeros(points.shape[:-1] + (3,))
        amp_total = 0.0
        for octave in range(tex.octaves):
            amp = 0.5**octave
            mod += amp * _value_noise(points / (tex.cell * 0.5**octave), scene_seed * 7919 + tex.seed * 31 + octave)
            amp_total += amp
        mod /= amp_total
    return np.clip(base * (1.0 - tex.contrast / 2 + tex.contrast * mod), 0.0, 1.0)


# --- ray casting --------------------------------------------------------------


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray):
    """Nearest positive hit distance (inf on miss) and outward normal, per ray."""
    n_rays = d.shape[0]
    t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    c = np.asarray(prim.center, dtype=np.float64)
    if prim.kind == "sphere":
        r = prim.size[0]
        oc = o - c
        b = d @ oc
        cc = oc @ oc - r * r
        disc = b * b - cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        th = np.where(t0 > _EPS, t0, t1)
        hit &= th > _EPS
        t = np.where(hit, th, np.inf)
        p = o + np.where(hit, t, 0.0)[:, None] * d
        normal = (p - c) / r
    elif prim.kind == "plane":
        hx, hy = prim.size[:2]
        with np.errstate(divide="ignore", invalid="ignore"):
            th = (c[2] - o[2]) / d[:, 2]
        p = o + np.where(np.isfinite(th), th, 0.0)[:, None] * d
        hit = np.isfinite(th) & (th > _EPS) & (np.abs(p[:, 0] - c[0]) <= hx) & (np.abs(p[:, 1] - c[1]) <= hy)
        t = np.where(hit, th, np.inf)
        normal[:] = (0.0, 0.0, 1.0)
    else:
        cy, sy = np.cos(prim.yaw), np.sin(prim.yaw)
        Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ol = Rz.T @ (o - c)
        dl = d @ Rz
        half = np.asarray(prim.size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            ta = (-half - ol) * inv
            tb = (half - ol) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        axis = tmin.argmax(axis=1)
        hit = (t_near <= t_far) & (t_far > _EPS)
        th = np.where(t_near > _EPS, t_near, t_far)
        t = np.where(hit, th, np.inf)
        nl = np.zeros((n_rays, 3))
        sign = -np.sign(dl[np.arange(n_rays), axis])
        nl[np.arange(n_rays), axis] = sign
        normal = nl @ Rz.T
    return t, normal


def _cast(scene: SceneSpec, cam: CameraModel, pixels: np.ndarray):
    o = cam.center
    d = cam.ray_directions(pixels).reshape(-1, 3)
    best_t = np.full(len(d), np.inf)
    best_n = np.zeros((len(d), 3))
    best_id = np.full(len(d), -1)
    for k, prim in enumerate(scene.primitives):
        t, n = _intersect(prim, o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], n, best_n)
        best_id = np.where(closer, k, best_id)
    hit = np.isfinite(best_t)
    pts = o + np.where(hit, best_t, 0.0)[:, None] * d
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    # shade the side facing the camera
    n = np.where((np.sum(best_n * d, axis=1) > 0)[:, None], -best_n, best_n)
    shade = scene.ambient + (1.0 - scene.ambient) * np.clip(n @ light, 0.0, None)
    color = np.tile(np.asarray(scene.background, dtype=np.float64), (len(d), 1))
    for k, prim in enumerate(scene.primitives):
        sel = best_id == k
        if sel.any():
            color[sel] = texture_albedo(prim.texture, pts[sel], scene.seed) * shade[sel, None]
    shape = pixels.shape[:-1]
    return (
        np.clip(color, 0.0, 1.0).reshape(shape + (3,)),
        pts.reshape(shape + (3,)),
        hit.reshape(shape),
        best_id.reshape(shape),
    )


def raycast_render(scene: SceneSpec, cam: CameraModel, supersample: int = 1) -> RenderedView:
    """Image, z-depth and world point map of ``scene`` seen by ``cam``.

    Geometry comes from the pixel-centre ray; with ``supersample > 1`` the
    colour is the mean over an ``s x s`` grid of sub-pixel rays.
    """
    pix = cam.pixel_grid()
    color, pts, hit, prim_id = _cast(scene, cam, pix)
    if supersample > 1:
        s = supersample
        offs = (np.arange(s) + 0.5) / s - 0.5
        acc = np.zeros_like(color)
        for dv in offs:
            for du in offs:
                acc += _cast(scene, cam, pix + np.array([du, dv]))[0]
        color = acc / (s * s)
    depth = np.where(hit, cam.to_camera(pts)[..., 2], np.nan)
    return RenderedView(
        image=color,
        depth=DepthMap(depth, hit),
        points=PointMap(np.where(hit[..., None], pts, 0.0), hit, Space.METRIC),
        primitive_id=prim_id,
    )


# --- canonical corruption -----------------------------------------------------


def smooth_warp(height: int, width: int, amplitude: float, wavelength: float, seed: int) -> np.ndarray:
    """Low-frequency sinusoidal 3-vector field over the pixel grid, ``(H, W, 3)``."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    direction = rng.normal(size=(3, 2))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    k = 2 * np.pi / wavelength
    out = np.empty((height, width, 3))
    for c in range(3):
        arg = k * (direction[c, 0] * u + direction[c, 1] * v)
        out[..., c] = amplitude * np.sin(arg + phase[c])
    return out


def affine_free_warp(gt: PointMap, amplitude: float, wavelength: float, seed: int) -> np.ndarray:
    """``smooth_warp`` minus its least-squares affine fit in the ground-truth coordinates.

    A per-pixel translation can absorb any global affine, so the warp is kept
    orthogonal to ``[1, x, y, z]`` over the valid pixels; the global scale of
    the corruption is then the unique affine part.
    """
    H, W = gt.shape
    warp = smooth_warp(H, W, amplitude, wavelength, seed)
    if amplitude == 0 or not gt.valid.any():
        return warp
    design = np.concatenate([np.ones(gt.shape + (1,)), gt.points], axis=-1)
    coef, *_ = np.linalg.lstsq(design[gt.valid], warp[gt.valid], rcond=None)
    warp = warp - design @ coef
    peak = np.abs(warp[gt.valid]).max()
    # removing the fit can raise the peak; keep the stated amplitude an upper bound
    return warp * (amplitude / peak) if peak > amplitude else warp


def joint_bounds(*maps: PointMap) -> tuple[np.ndarray, np.ndarray]:
    pts = np.concatenate([m.valid_points() for m in maps])
    return pts.min(axis=0), pts.max(axis=0)


def corrupt_pointmap(gt: PointMap, spec: CorruptionSpec, bounds=None) -> tuple[PointMap, AffineTransform]:
    """Map a metric point map into a canonical frame and return the affine that undoes it.

    ``out = normalise((gt - offset - warp - noise) / true_scale)``, where the
    min-max normalisation uses ``bounds`` (lower, upper) given in the divided
    frame, or the map's own extent when omitted. Pass shared bounds to give
    two views one canonical frame.
    """
    rng = np.random.default_rng(spec.seed)
    H, W = gt.shape
    warp = affine_free_warp(gt, spec.smooth_warp_amplitude, spec.smooth_warp_wavelength, spec.seed + 1)
    noise = spec.noise_sigma * rng.normal(size=(H, W, 3)) if spec.noise_sigma > 0 else 0.0
    s_true = np.asarray(spec.true_scale, dtype=np.float64)
    offset = np.asarray(spec.true_offset, dtype=np.float64)
    divided = (gt.points - offset - warp - noise) / s_true
    if bounds is None:
        sel = divided[gt.valid]
        lo, hi = sel.min(axis=0), sel.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    extent = np.where(hi - lo > 0, hi - lo, 1.0)
    canonical = (divided - lo) / extent
    canonical = np.where(gt.valid[..., None], canonical, 0.0)
    scale_gt = s_true * extent
    translation_gt = s_true * lo + offset + warp + noise
    return PointMap(canonical, gt.valid, Space.CANONICAL), AffineTransform(scale_gt, translation_gt)


def corrupt_pair(gt_l: PointMap, gt_r: PointMap, spec: CorruptionSpec):
    """Corrupt a source pair into one shared canonical frame.

    Returns ``((canon_l, affine_l), (canon_r, affine_r))``; both affines share
    one scale.
    """
    spec_r = CorruptionSpec(**{**asdict(spec), "seed": spec.seed + 1000})
    s_true = np.asarray(spec.true_scale, dtype=np.float64)
    offset = np.asarray(spec.true_offset, dtype=np.float64)
    lows, highs = [], []
    for gt, sp in ((gt_l, spec), (gt_r, spec_r)):
        warp = affine_free_warp(gt, sp.smooth_warp_amplitude, sp.smooth_warp_wavelength, sp.seed + 1)
        # the noise draw is bounded by a few sigma; widen so shared bounds cover it
        margin = 6 * sp.noise_sigma
        d = ((gt.points - offset - warp) / s_true)[gt.valid]
        lows.append(d.min(axis=0) - margin / s_true)
        highs.append(d.max(axis=0) + margin / s_true)
    bounds = (np.min(lows, axis=0), np.max(highs, axis=0))
    return corrupt_pointmap(gt_l, spec, bounds), corrupt_pointmap(gt_r, spec_r, bounds)


# --- rigs and default scenes --------------------------------------------------


def gen_rig(
    n_cams: int,
    radius: float,
    look_at=(0.0, 0.0, 0.9),
    arc_degrees: float = 60.0,
    elevation: float = 0.5,
    width: int = 256,
    height: int = 144,
    focal_ratio: float = 0.9,
) -> list[CameraModel]:
    """Cameras on a horizontal arc around ``look_at``, all aimed at it.

    The first and last cameras are the source pair; the rest are targets.
    ``focal_ratio`` is the focal length in units of image width.
    """
    if n_cams < 3:
        raise ValueError("a rig needs at least 3 cameras")
    look_at = np.asarray(look_at, dtype=np.float64)
    angles = np.radians(np.linspace(-arc_degrees / 2, arc_degrees / 2, n_cams))
    cams = []
    for a in angles:
        eye = look_at + np.array([radius * np.sin(a), -radius * np.cos(a), elevation])
        cams.append(CameraModel.look_at(eye, look_at, width, height, fx=focal_ratio * width))
    return cams


def studio_scene(seed: int) -> SceneSpec:
    """Figure-like sphere/box cluster on a textured floor in front of a textured wall."""
    rng = np.random.default_rng(seed)

    def tex(cell, contrast=0.7):
        base = tuple(float(x) for x in rng.uniform(0.35, 0.95, size=3))
        return Texture(kind="noise", cell=cell, base_color=base, contrast=contrast, seed=int(rng.integers(1 << 30)))

    prims = [
        Primitive("plane", (0.0, 0.0, 0.0), (12.0, 12.0), texture=tex(0.25)),
        Primitive("box", (0.0, 2.6, 1.5), (12.0, 0.1, 1.5), texture=tex(0.3)),
    ]
    # torso, head and a few limbs, jittered per seed
    x0, y0 = rng.uniform(-0.25, 0.25, size=2)
    torso_h = rng.uniform(0.9, 1.1)
    prims.append(
        Primitive(
            "box",
            (x0, y0, torso_h),
            (rng.uniform(0.18, 0.25), rng.uniform(0.1, 0.15), rng.uniform(0.28, 0.35)),
            yaw=float(rng.uniform(-0.5, 0.5)),
            texture=tex(0.08),
        )
    )
    prims.append(Primitive("sphere", (x0, y0, torso_h + 0.5), (rng.uniform(0.12, 0.16),), texture=tex(0.06)))
    for side in (-1, 1):
        prims.append(
            Primitive(
                "sphere",
                (x0 + side * rng.uniform(0.3, 0.45), y0 + rng.uniform(-0.2, 0.1), torso_h + rng.uniform(-0.2, 0.2)),
                (rng.uniform(0.08, 0.12),),
                texture=tex(0.06),
            )
        )
        prims.append(
            Primitive(
                "box",
                (x0 + side * 0.12, y0, 0.35),
                (0.08, 0.08, 0.35),
                yaw=float(rng.uniform(-0.3, 0.3)),
                texture=tex(0.07),
            )
        )
    prims.append(
        Primitive(
            "sphere",
            (rng.uniform(-1.2, 1.2), rng.uniform(0.5, 1.5), rng.uniform(0.3, 0.5)),
            (rng.uniform(0.25, 0.4),),
            texture=tex(0.1),
        )
    )
    light = rng.normal(size=3) * 0.3 + np.array([0.3, -0.6, 0.8])
    return SceneSpec(seed=seed, primitives=tuple(prims), light_dir=tuple(float(x) for x in light))


def gt_affine_check(canonical: PointMap, affine: AffineTransform, gt: PointMap) -> float:
    """Max error of applying ``affine`` to ``canonical`` against ``gt`` on valid pixels."""
    rec = affine.scale * canonical.points + affine.translation
    return float(np.abs(rec - gt.points)[gt.valid].max())


def unproject_depth(depth: DepthMap, cam: CameraModel) -> np.ndarray:
    pts = np.zeros(depth.shape + (3,))
    if depth.valid.any():
        pts[depth.valid] = unproject(cam.pixel_grid()[depth.valid], depth.depth[depth.valid], cam)
    return pts
