"""Gaussian planes and front-to-back splatting.

Two rasterizers live here. ``splat`` bins primitives into screen tiles and
composites each tile as one batched array operation; ``splat_reference``
walks the globally sorted primitives one at a time over the whole frame and
exists to check the tiled path. Both share projection, culling and the 3-sigma
support rule, so they agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularCovariance
from .geometry import CameraModel

TILE = 8
COV2D_DILATION = 0.3
T_MIN = 1e-4
SUPPORT_SIGMAS = 3.0


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel z-depth ``(H, W)`` with validity; invalid entries are NaN."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool) & np.isfinite(d) & (np.nan_to_num(d) > 0)
        object.__setattr__(self, "depth", np.where(valid, d, np.nan))
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: np.ndarray
    depth: DepthMap
    alpha: np.ndarray


@dataclass(frozen=True, eq=False)
class GaussianPlane:
    """Flat arrays of Gaussian attributes, one row per primitive.

    ``rotations`` are unit quaternions stored ``(w, x, y, z)``.
    """

    positions: np.ndarray
    colors: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        arrays = {
            "positions": pos,
            "colors": np.asarray(self.colors, dtype=np.float64).reshape(-1, 3),
            "rotations": np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4),
            "scales": np.asarray(self.scales, dtype=np.float64).reshape(-1, 3),
            "opacities": np.asarray(self.opacities, dtype=np.float64).reshape(-1),
        }
        for name, arr in arrays.items():
            if len(arr) != n:
                raise DimensionMismatch(f"{name} has {len(arr)} rows, expected {n}")
            object.__setattr__(self, name, arr)
        if n:
            if np.abs(np.linalg.norm(arrays["rotations"], axis=1) - 1).max() > 1e-9:
                raise ValueError("rotations must be unit quaternions")
            if np.any(arrays["scales"] <= 0):
                raise ValueError("scales must be positive")
            o = arrays["opacities"]
            if np.any(o <= 0) or np.any(o > 1):
                raise ValueError("opacities must lie in (0, 1]")

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> "GaussianPlane":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def concatenate(cls, planes) -> "GaussianPlane":
        planes = list(planes)
        if not planes:
            return cls.empty()
        return cls(
            *(
                np.concatenate([getattr(p, name) for p in planes])
                for name in ("positions", "colors", "rotations", "scales", "opacities")
            )
        )

    def take(self, index) -> "GaussianPlane":
        return GaussianPlane(
            self.positions[index],
            self.colors[index],
            self.rotations[index],
            self.scales[index],
            self.opacities[index],
        )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    from scipy.spatial.transform import Rotation

    xyzw = Rotation.from_matrix(R).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    q = np.where(q[..., :1] < 0, -q, q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def isotropic_plane(positions, colors, scale, opacity) -> GaussianPlane:
    """Identity-rotation isotropic primitives, the default layout for planes built from pixels."""
    n = len(positions)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64).reshape(-1, 1), (n, 3))
    opacity = np.broadcast_to(np.asarray(opacity, dtype=np.float64).reshape(-1), (n,))
    return GaussianPlane(positions, colors, rot, scale.copy(), opacity.copy())


@dataclass(frozen=True)
class _Projected:
    """Screen-space data for the primitives that survived culling, in composite order."""

    uv: np.ndarray
    conic: np.ndarray  # (a, b, c) of the inverse 2-D covariance
    depth: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radius: np.ndarray
    index: np.ndarray  # storage index of each surviving primitive


def _sort_order(plane: GaussianPlane, depth: np.ndarray) -> np.ndarray:
    # Total order on content (depth first), so storage order never matters.
    keys = [plane.opacities]
    for arr in (plane.scales, plane.rotations, plane.colors, plane.positions):
        keys.extend(arr[:, k] for k in range(arr.shape[1] - 1, -1, -1))
    keys.append(depth)
    return np.lexsort(keys)


def _project(plane: GaussianPlane, cam: CameraModel) -> _Projected:
    if plane.count == 0:
        z = np.zeros(0)
        return _Projected(np.zeros((0, 2)), np.zeros((0, 3)), z, np.zeros((0, 3)), z, z, np.zeros(0, dtype=int))
    pc = cam.to_camera(plane.positions)
    z_all = pc[:, 2]
    order = _sort_order(plane, z_all)
    order = order[z_all[order] > 0]
    pc = pc[order]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    uv = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=-1)

    Rg = quat_to_matrix(plane.rotations[order])
    s2 = plane.scales[order] ** 2
    cov3 = np.einsum("nij,nj,nkj->nik", Rg, s2, Rg)
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    M = J @ cam.rotation
    cov2 = M @ cov3 @ np.transpose(M, (0, 2, 1))
    a = cov2[:, 0, 0] + COV2D_DILATION
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV2D_DILATION
    det = a * c - b * b
    if not (np.all(np.isfinite(det)) and np.all(det > 0)):
        raise SingularCovariance("projected covariance is singular or non-finite")
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = SUPPORT_SIGMAS * np.sqrt(lam_max)

    W, H = cam.width, cam.height
    on_screen = (
        (uv[:, 0] + radius >= -0.5)
        & (uv[:, 0] - radius <= W - 0.5)
        & (uv[:, 1] + radius >= -0.5)
        & (uv[:, 1] - radius <= H - 0.5)
    )
    keep = order[on_screen]
    return _Projected(
        uv=uv[on_screen],
        conic=conic[on_screen],
        depth=z[on_screen],
        colors=plane.colors[keep],
        opacities=plane.opacities[keep],
        radius=radius[on_screen],
        index=keep,
    )


def _alpha(proj: _Projected, idx, pu, pv):
    """Per-(primitive, pixel) opacity; ``idx`` indexes primitives, ``pu, pv`` pixels."""
    du = pu[None, :] - proj.uv[idx, 0][:, None]
    dv = pv[None, :] - proj.uv[idx, 1][:, None]
    A = proj.conic[idx, 0][:, None]
    B = proj.conic[idx, 1][:, None]
    C = proj.conic[idx, 2][:, None]
    m2 = A * du * du + 2.0 * B * du * dv + C * dv * dv
    inside = m2 <= SUPPORT_SIGMAS**2
    return np.where(inside, proj.opacities[idx][:, None] * np.exp(-0.5 * m2), 0.0)


def _as_planes(planes) -> GaussianPlane:
    if isinstance(planes, GaussianPlane):
        return planes
    return GaussianPlane.concatenate(planes)


def _finish(color, depth_acc, T, H, W) -> RenderOutput:
    alpha = np.clip(1.0 - T, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha > 0, depth_acc / alpha, np.nan)
    return RenderOutput(
        color=color.reshape(H, W, 3),
        depth=DepthMap(depth.reshape(H, W), (alpha > 0).reshape(H, W)),
        alpha=alpha.reshape(H, W),
    )


def _target_camera(cam: CameraModel, width, height) -> CameraModel:
    width = cam.width if width is None else width
    height = cam.height if height is None else height
    if (width, height) != (cam.width, cam.height):
        return cam.resized(width, height)
    return cam


def splat(planes, cam: CameraModel, width: int | None = None, height: int | None = None) -> RenderOutput:
    """Tile-binned front-to-back alpha compositing of one or more Gaussian planes.

    If ``width``/``height`` differ from the camera's resolution the intrinsics
    are rescaled to the requested grid.
    """
    plane = _as_planes(planes)
    cam = _target_camera(cam, width, height)
    W, H = cam.width, cam.height
    proj = _project(plane, cam)
    color = np.zeros((H * W, 3))
    depth_acc = np.zeros(H * W)
    T_out = np.ones(H * W)
    for pix, idx, weight, T_final in _tiles(proj, W, H):
        color[pix] = weight.T @ proj.colors[idx]
        depth_acc[pix] = weight.T @ proj.depth[idx]
        T_out[pix] = T_final
    return _finish(color, depth_acc, T_out, H, W)


def _tiles(proj: _Projected, W: int, H: int):
    """Yield ``(pixel ids, primitive ids, weights (n_prim, n_pix), final transmittance)`` per tile.

    Primitive ids index ``proj``; weights are the front-to-back compositing
    weights ``T_i * alpha_i`` with early termination applied.
    """
    n = len(proj.depth)
    if n == 0:
        return
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    # pixel p covers [p - 0.5, p + 0.5); tile k holds pixels [k*TILE, (k+1)*TILE)
    tx0 = np.clip(np.floor((proj.uv[:, 0] - proj.radius + 0.5) / TILE), 0, tiles_x - 1).astype(int)
    tx1 = np.clip(np.floor((proj.uv[:, 0] + proj.radius + 0.5) / TILE), 0, tiles_x - 1).astype(int)
    ty0 = np.clip(np.floor((proj.uv[:, 1] - proj.radius + 0.5) / TILE), 0, tiles_y - 1).astype(int)
    ty1 = np.clip(np.floor((proj.uv[:, 1] + proj.radius + 0.5) / TILE), 0, tiles_y - 1).astype(int)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    gid = np.repeat(np.arange(n), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[gid] + local % nx[gid]
    tile_y = ty0[gid] + local // nx[gid]
    tile_id = tile_y * tiles_x + tile_x
    # gid is already in composite order, so a stable sort keeps it within each tile
    perm = np.argsort(tile_id, kind="stable")
    tile_id = tile_id[perm]
    gid = gid[perm]
    bounds = np.searchsorted(tile_id, np.arange(tiles_x * tiles_y + 1))

    for t in range(tiles_x * tiles_y):
        lo, hi = bounds[t], bounds[t + 1]
        if lo == hi:
            continue
        idx = gid[lo:hi]
        ty, tx = divmod(t, tiles_x)
        vs, us = np.mgrid[ty * TILE : min((ty + 1) * TILE, H), tx * TILE : min((tx + 1) * TILE, W)]
        pu = us.ravel().astype(np.float64)
        pv = vs.ravel().astype(np.float64)
        alpha = _alpha(proj, idx, pu, pv)
        T_after = np.cumprod(1.0 - alpha, axis=0)
        T_before = np.vstack([np.ones((1, alpha.shape[1])), T_after[:-1]])
        live = T_before >= T_MIN
        weight = np.where(live, T_before * alpha, 0.0)
        n_live = live.sum(axis=0)
        T_final = np.where(n_live > 0, T_after[np.maximum(n_live - 1, 0), np.arange(alpha.shape[1])], 1.0)
        yield (vs * W + us).ravel(), idx, weight, T_final


def splat_weights(planes, cam: CameraModel, width: int | None = None, height: int | None = None):
    """Compositing weights as a sparse ``(H*W, count)`` matrix over storage order.

    The rendered colour is linear in the primitive colours once geometry and
    opacity are fixed: ``splat(...).color.reshape(-1, 3) == M @ plane.colors``.
    """
    from scipy.sparse import csr_matrix

    plane = _as_planes(planes)
    cam = _target_camera(cam, width, height)
    W, H = cam.width, cam.height
    proj = _project(plane, cam)
    rows, cols, vals = [], [], []
    for pix, idx, weight, _ in _tiles(proj, W, H):
        i, j = np.nonzero(weight)
        rows.append(pix[j])
        cols.append(proj.index[idx[i]])
        vals.append(weight[i, j])
    if not rows:
        return csr_matrix((H * W, plane.count))
    return csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(H * W, plane.count)
    )


def corrected_colors(
    plane: GaussianPlane,
    cam: CameraModel,
    target: np.ndarray,
    valid: np.ndarray | None = None,
    iterations: int = 60,
    prior_weight: float = 1e-2,
) -> np.ndarray:
    """Primitive colours whose splat into ``cam`` best reproduces ``target``.

    Minimises ``|M c - target|^2 + prior_weight |c - c0|^2`` over valid pixels
    with ``c`` boxed to [0, 1], where ``M`` are the compositing weights and
    ``c0`` the current colours. Overlapping footprints blur a pixel-aligned
    plane; this undoes the blur for the camera the plane was built in.
    Projected accelerated gradient, fixed iteration count.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    M = splat_weights(plane, cam)
    if valid is not None:
        M = M[np.asarray(valid, bool).ravel()]
        target = target[np.asarray(valid, bool).ravel()]
    c0 = plane.colors
    if plane.count == 0 or M.shape[0] == 0:
        return c0.copy()
    # Lipschitz constant of the gradient by power iteration
    v = np.ones(plane.count) / np.sqrt(plane.count)
    for _ in range(30):
        v = M.T @ (M @ v)
        nrm = np.linalg.norm(v)
        if nrm == 0:
            return c0.copy()
        v /= nrm
    L = 1.05 * nrm + prior_weight
    x = c0.copy()
    y = x.copy()
    t = 1.0
    for _ in range(iterations):
        grad = M.T @ (M @ y - target) + prior_weight * (y - c0)
        x_new = np.clip(y - grad / L, 0.0, 1.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    return x


def splat_reference(planes, cam: CameraModel, width: int | None = None, height: int | None = None) -> RenderOutput:
    """Untiled compositor: every sorted primitive is evaluated at every pixel."""
    plane = _as_planes(planes)
    cam = _target_camera(cam, width, height)
    W, H = cam.width, cam.height
    proj = _project(plane, cam)
    vs, us = np.mgrid[0:H, 0:W]
    pu = us.ravel().astype(np.float64)
    pv = vs.ravel().astype(np.float64)
    color = np.zeros((H * W, 3))
    depth_acc = np.zeros(H * W)
    T = np.ones(H * W)
    for i in range(len(proj.depth)):
        live = T >= T_MIN
        a = _alpha(proj, [i], pu, pv)[0]
        a = np.where(live, a, 0.0)
        w = T * a
        color += w[:, None] * proj.colors[i]
        depth_acc += w * proj.depth[i]
        T = np.where(live, T * (1.0 - a), T)
    return _finish(color, depth_acc, T, H, W)


def pixel_plane(
    points: np.ndarray,
    valid: np.ndarray,
    colors: np.ndarray,
    cam: CameraModel,
    opacity,
    footprint: float = 1.0,
) -> GaussianPlane:
    """One isotropic Gaussian per valid pixel, sized to ``footprint`` pixels at its depth in ``cam``."""
    valid = np.asarray(valid, dtype=bool)
    pos = np.asarray(points)[valid]
    if len(pos) == 0:
        return GaussianPlane.empty()
    z = cam.to_camera(pos)[:, 2]
    focal = np.sqrt(cam.fx * cam.fy)
    scale = footprint * np.abs(z) / focal
    col = np.clip(np.asarray(colors, dtype=np.float64)[valid], 0.0, 1.0)
    op = np.broadcast_to(np.asarray(opacity, dtype=np.float64), valid.shape)[valid]
    return isotropic_plane(pos, col, scale, op)


def build_gaussian_plane(
    depth: DepthMap,
    color: np.ndarray,
    confidence: np.ndarray,
    cam: CameraModel,
    footprint: float = 1.0,
    opacity_floor: float = 0.5,
    opacity_range: float = 0.45,
    blend_alpha: float = 0.8,
    residual: np.ndarray | None = None,
) -> GaussianPlane:
    """Target-view Gaussian plane anchored on a depth map.

    Color follows ``blend_alpha * C + (1 - blend_alpha) * residual``; with no
    residual source the residual slot holds ``C`` itself so the blend is the
    identity. Rotation is identity, scale spans ``footprint`` pixels and
    opacity is ``opacity_floor + opacity_range * confidence``.
    """
    from .geometry import unproject

    color = np.asarray(color, dtype=np.float64)
    confidence = np.asarray(confidence, dtype=np.float64)
    if color.shape[:2] != depth.shape or confidence.shape != depth.shape or depth.shape != cam.shape:
        raise DimensionMismatch("depth, color, confidence and camera must share one pixel grid")
    residual = color if residual is None else np.asarray(residual, dtype=np.float64)
    blended = blend_alpha * color + (1.0 - blend_alpha) * residual
    valid = depth.valid
    pts = np.zeros(depth.shape + (3,))
    if valid.any():
        pts[valid] = unproject(cam.pixel_grid()[valid], depth.depth[valid], cam)
    opacity = opacity_floor + opacity_range * np.clip(confidence, 0.0, 1.0)
    return pixel_plane(pts, valid, blended, cam, opacity, footprint)
