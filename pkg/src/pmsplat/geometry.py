"""Pinhole cameras, point maps and the sampling primitives shared by both stages.

Conventions used everywhere in the package:

* world frame is right-handed; a camera looks down its own +z axis, x to the
  right of the image and y down;
* ``depth`` is the camera-space z coordinate, never the ray length;
* continuous pixel coordinates ``(u, v)`` put pixel centres on integers, so the
  pixel stored at ``image[v, u]`` covers ``[u - 0.5, u + 0.5)``;
* images and grids are numpy arrays shaped ``(H, W)`` or ``(H, W, C)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole intrinsics plus a world-to-camera rigid pose.

    A world point ``X`` maps to camera coordinates ``R @ X + t``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def resized(self, width: int, height: int) -> "CameraModel":
        """Same camera sampled on a ``width x height`` pixel grid.

        Pixel edges are preserved, so under the pixel-centre-at-integer
        convention the principal point maps as ``(c + 0.5) * s - 0.5``.
        """
        sx = width / self.width
        sy = height / self.height
        return CameraModel(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
            rotation=self.rotation,
            translation=self.translation,
        )

    @classmethod
    def look_at(cls, eye, target, width, height, fx, fy=None, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` whose optical axis passes through ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(
            fx=fx,
            fy=fx if fy is None else fy,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
            rotation=R,
            translation=-R @ eye,
        )

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def pixel_grid(self) -> np.ndarray:
        """``(H, W, 2)`` array of integer pixel-centre coordinates ``(u, v)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u, v], axis=-1).astype(np.float64)

    def ray_directions(self, pixels: np.ndarray | None = None) -> np.ndarray:
        """World-space unit ray directions through ``pixels`` (default: every pixel)."""
        if pixels is None:
            pixels = self.pixel_grid()
        pixels = np.asarray(pixels, dtype=np.float64)
        d_cam = np.stack(
            [
                (pixels[..., 0] - self.cx) / self.fx,
                (pixels[..., 1] - self.cy) / self.fy,
                np.ones(pixels.shape[:-1]),
            ],
            axis=-1,
        )
        d = d_cam @ self.rotation
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Project world points ``(..., 3)`` to pixels ``(..., 2)`` and depths ``(...)``.

    Nothing is culled: points behind the camera come back with ``depth <= 0``
    and the caller decides what to do with them.
    """
    pc = cam.to_camera(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / z + cam.cx
        v = cam.fy * pc[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1), z


def projection_jacobian(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """d(u, v)/d(world point), shaped ``(..., 2, 3)``."""
    pc = cam.to_camera(points)
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    zero = np.zeros_like(z)
    J = np.stack(
        [
            np.stack([cam.fx / z, zero, -cam.fx * x / z**2], axis=-1),
            np.stack([zero, cam.fy / z, -cam.fy * y / z**2], axis=-1),
        ],
        axis=-2,
    )
    return J @ cam.rotation


def unproject(pixels: np.ndarray, depth, cam: CameraModel) -> np.ndarray:
    """Lift pixels ``(..., 2)`` at z-depth ``depth`` to world points ``(..., 3)``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject needs strictly positive depth")
    pc = np.stack(
        [
            (pixels[..., 0] - cam.cx) / cam.fx * depth,
            (pixels[..., 1] - cam.cy) / cam.fy * depth,
            np.broadcast_to(depth, pixels.shape[:-1]),
        ],
        axis=-1,
    )
    return (pc - cam.translation) @ cam.rotation


EDGE_TOLERANCE = 1e-9  # pixels


def bilinear_query(grid: np.ndarray, coords: np.ndarray, return_grad: bool = False):
    """Bilinearly sample ``grid`` (``(H, W)`` or ``(H, W, C)``) at ``coords`` (``(..., 2)``, u then v).

    Returns ``(values, valid)``. A sample is valid only when every corner that
    carries weight lies inside the grid; invalid samples are zero-filled,
    never extrapolated. With ``return_grad`` the partial derivatives with
    respect to ``u`` and ``v`` are returned as a third element ``(du, dv)``.
    """
    grid = np.asarray(grid)
    coords = np.asarray(coords, dtype=np.float64)
    H, W = grid.shape[:2]
    u = coords[..., 0]
    v = coords[..., 1]
    # round-off from a project/unproject round trip must not push an edge pixel outside
    tol = EDGE_TOLERANCE
    valid = (u >= -tol) & (u <= W - 1 + tol) & (v >= -tol) & (v <= H - 1 + tol)
    us = np.where(valid, np.clip(u, 0, W - 1), 0.0)
    vs = np.where(valid, np.clip(v, 0, H - 1), 0.0)
    # at the last row/column the far corner gets zero weight
    u0 = np.minimum(np.floor(us).astype(np.intp), max(W - 2, 0))
    v0 = np.minimum(np.floor(vs).astype(np.intp), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = us - u0
    b = vs - v0
    g00 = grid[v0, u0]
    g01 = grid[v0, u1]
    g10 = grid[v1, u0]
    g11 = grid[v1, u1]
    if grid.ndim == 3:
        a = a[..., None]
        b = b[..., None]
        mask = valid[..., None]
    else:
        mask = valid
    top = g00 + a * (g01 - g00)
    bottom = g10 + a * (g11 - g10)
    values = np.where(mask, top + b * (bottom - top), 0.0)
    if not return_grad:
        return values, valid
    du = (1 - b) * (g01 - g00) + b * (g11 - g10)
    dv = bottom - top
    return values, valid, (np.where(mask, du, 0.0), np.where(mask, dv, 0.0))


class Space(enum.Enum):
    CANONICAL = "canonical"
    METRIC = "metric"


@dataclass(frozen=True, eq=False)
class PointMap:
    """Per-pixel 3-D points ``(H, W, 3)`` with a validity mask ``(H, W)``."""

    points: np.ndarray
    valid: np.ndarray
    space: Space = Space.METRIC

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3 or valid.shape != pts.shape[:2]:
            raise DimensionMismatch("points must be (H, W, 3) and valid (H, W)")
        valid = valid & np.all(np.isfinite(pts), axis=-1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def with_space(self, space: Space) -> "PointMap":
        return PointMap(self.points, self.valid, space)

    def depth_in(self, cam: CameraModel) -> np.ndarray:
        """Camera-space z of every point; NaN where invalid."""
        z = cam.to_camera(self.points)[..., 2]
        return np.where(self.valid, z, np.nan)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Per-axis scale ``(3,)`` plus a per-pixel translation field ``(H, W, 3)``."""

    scale: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        T = np.asarray(self.translation, dtype=np.float64)
        if np.any(s <= 0):
            raise ValueError("scale components must be positive")
        if T.ndim != 3 or T.shape[2] != 3:
            raise DimensionMismatch("translation must be (H, W, 3)")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls, height: int, width: int) -> "AffineTransform":
        return cls(np.ones(3), np.zeros((height, width, 3)))


def apply_affine(pmap: PointMap, transform: AffineTransform) -> PointMap:
    """Metric point map ``S * X + T``; the validity mask is carried over."""
    if transform.translation.shape[:2] != pmap.shape:
        raise DimensionMismatch(
            f"transform grid {transform.translation.shape[:2]} != point map {pmap.shape}"
        )
    pts = transform.scale * pmap.points + transform.translation
    return PointMap(pts, pmap.valid, Space.METRIC)


def camera_baseline(cam_a: CameraModel, cam_b: CameraModel) -> float:
    return float(np.linalg.norm(cam_a.center - cam_b.center))
