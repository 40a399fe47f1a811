"""Stage 2: target-view depth from the metric point maps, refined by a plane sweep.

The two metric point maps are splatted into the target camera to get an
initial depth. Around it every pixel gets ``N`` depth candidates; both fine
source images are warped to each candidate and compared, and the softmax of
the negated patch cost gives per-candidate weights. Their expectation is the
refined depth, and the same warp at the refined depth gives the colour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, uniform_filter

from .errors import DimensionMismatch, EmptyGeometry
from .gaussians import DepthMap, splat
from .geometry import CameraModel, PointMap, Space, bilinear_query, project, unproject
from .registration import auxiliary_gaussian_plane


@dataclass(frozen=True)
class RefineConfig:
    n_candidates: int = 8
    search_halfwidth: float = 0.05
    fine_width: int = 1024
    fine_height: int = 576
    softmax_temperature: float = 0.1
    patch_radius: int = 1
    invalid_cost: float = 1.0
    alpha_threshold: float = 0.5
    footprint: float = 1.0

    def __post_init__(self):
        if self.n_candidates < 2:
            raise ValueError("need at least two depth candidates")
        if self.search_halfwidth <= 0 or self.softmax_temperature <= 0:
            raise ValueError("search_halfwidth and softmax_temperature must be positive")


@dataclass(frozen=True, eq=False)
class CostVolume:
    """Per-pixel candidates ``(H, W, N)``, their costs and softmax weights."""

    candidates: np.ndarray
    cost: np.ndarray
    weights: np.ndarray
    valid: np.ndarray

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.candidates.shape[:2]


@dataclass(frozen=True, eq=False)
class WarpedSamples:
    """Source samples warped onto the target grid, ``(H, W, N, C)`` plus validity ``(H, W, N)``."""

    values: np.ndarray
    valid: np.ndarray
    src_depth: np.ndarray  # z of each candidate point in the source camera


@dataclass(frozen=True, eq=False)
class ColorInit:
    color: np.ndarray
    valid: np.ndarray
    weights: np.ndarray  # (H, W, 2) left/right blend weights


def init_target_depth(
    metric_l: PointMap,
    metric_r: PointMap,
    img_l,
    img_r,
    cam_l: CameraModel,
    cam_r: CameraModel,
    target: CameraModel,
    width: int | None = None,
    height: int | None = None,
    cfg: RefineConfig = RefineConfig(),
) -> DepthMap:
    """Alpha-composited expected depth of both source Gaussian planes seen from ``target``.

    Pixels whose accumulated opacity stays under ``cfg.alpha_threshold`` are invalid.
    """
    for pmap in (metric_l, metric_r):
        if pmap.space is not Space.METRIC:
            raise ValueError("depth initialisation needs metric point maps")
    planes = [
        auxiliary_gaussian_plane(metric_l, img_l, cam_l, cfg.footprint),
        auxiliary_gaussian_plane(metric_r, img_r, cam_r, cfg.footprint),
    ]
    out = splat(planes, target, width, height)
    if not np.any(out.alpha > 0):
        raise EmptyGeometry("no Gaussian lands inside the target frustum")
    return DepthMap(out.depth.depth, out.depth.valid & (out.alpha >= cfg.alpha_threshold))


def fill_depth_holes(depth: DepthMap, max_distance: float | None = None) -> DepthMap:
    """Give invalid pixels the depth of their nearest valid pixel.

    Only pixels within ``max_distance`` pixels of a valid one are filled
    (all of them when ``None``). The plane sweep then refines the filled
    values like any other.
    """
    if depth.valid.all() or not depth.valid.any():
        return depth
    dist, (iy, ix) = distance_transform_edt(~depth.valid, return_indices=True)
    fill = ~depth.valid if max_distance is None else ~depth.valid & (dist <= max_distance)
    out = np.where(fill, depth.depth[iy, ix], depth.depth)
    return DepthMap(out, depth.valid | fill)


def sample_depth_candidates(init: DepthMap, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    """``N`` depths spaced uniformly over ``d * [1 - hw, 1 + hw]`` per pixel, ``(H, W, N)``.

    Invalid pixels are centred on the median of the valid depths.
    """
    if not init.valid.any():
        raise EmptyGeometry("initial depth map has no valid pixel")
    centre = np.where(init.valid, init.depth, float(np.median(init.depth[init.valid])))
    offsets = cfg.search_halfwidth * np.linspace(-1.0, 1.0, cfg.n_candidates)
    return centre[..., None] * (1.0 + offsets)


def warp_source_to_target(
    src_image, candidates: np.ndarray, target: CameraModel, src_cam: CameraModel
) -> WarpedSamples:
    """Sample ``src_image`` where each target candidate point lands in the source view."""
    src_image = np.asarray(src_image, dtype=np.float64)
    if src_image.ndim == 2:
        src_image = src_image[..., None]
    if candidates.shape[:2] != target.shape:
        raise DimensionMismatch("candidate grid must match the target camera")
    n = candidates.shape[-1]
    pix = np.broadcast_to(target.pixel_grid()[:, :, None, :], candidates.shape + (2,))
    pts = unproject(pix, candidates, target)
    uv, z = project(pts, src_cam)
    values, inside = bilinear_query(src_image, uv)
    valid = inside & (z > 0)
    values = np.where(valid[..., None], values, 0.0)
    assert values.shape[2] == n
    return WarpedSamples(values, valid, z)


def _source_depth_at(uv: np.ndarray, src_depth_map: np.ndarray):
    """Bilinear source depth at ``uv`` and a flag for samples whose four corners are all known."""
    known_map = np.isfinite(src_depth_map)
    z, inside = bilinear_query(np.where(known_map, src_depth_map, 0.0), uv)
    frac, _ = bilinear_query(known_map.astype(np.float64), uv)
    return z, inside & (frac > 1 - 1e-9)


def mask_occluded(
    warp: WarpedSamples,
    reference: np.ndarray,
    target: CameraModel,
    src_depth_map: np.ndarray,
    depth_cam: CameraModel,
    tolerance: float,
) -> WarpedSamples:
    """Invalidate every candidate of pixels that the source cannot see.

    The test runs once per pixel at ``reference`` depth (normally the initial
    depth), so it never favours one candidate over another. ``src_depth_map``
    is the source's z-depth (NaN where unknown) on the grid of ``depth_cam``,
    which may be coarser than the warped image. A point farther than
    ``(1 + tolerance)`` times the surface depth is hidden; where the source
    depth is unknown nothing changes.
    """
    uv, z = project(unproject(target.pixel_grid(), reference, target), depth_cam)
    surface, known = _source_depth_at(uv, src_depth_map)
    hidden = known & (z > surface * (1.0 + tolerance))
    valid = warp.valid & ~hidden[..., None]
    return WarpedSamples(np.where(valid[..., None], warp.values, 0.0), valid, warp.src_depth)


def require_joint_support(warp_l: WarpedSamples, warp_r: WarpedSamples) -> tuple[WarpedSamples, WarpedSamples]:
    """Invalidate all candidates of a pixel unless both sources see every one of them.

    A pixel whose window runs off one source's frame would otherwise favour
    the in-frame candidates for no photometric reason. With every candidate
    at the penalty the weights are uniform and the regressed depth stays at
    the centre of the window.
    """
    full = (warp_l.valid & warp_r.valid).all(axis=-1, keepdims=True)
    out = []
    for w in (warp_l, warp_r):
        valid = w.valid & full
        out.append(WarpedSamples(np.where(valid[..., None], w.values, 0.0), valid, w.src_depth))
    return out[0], out[1]


def softmax_weights(cost: np.ndarray, temperature: float) -> np.ndarray:
    logits = -cost / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def build_cost_volume(
    warp_l: WarpedSamples,
    warp_r: WarpedSamples,
    candidates: np.ndarray,
    cfg: RefineConfig = RefineConfig(),
    pixel_valid: np.ndarray | None = None,
) -> CostVolume:
    """Patch-mean squared difference between the two warps, per candidate.

    A candidate where either warp is invalid costs ``cfg.invalid_cost``;
    invalid samples also enter neighbouring patches at that cost.
    """
    if warp_l.values.shape != warp_r.values.shape or warp_l.valid.shape != candidates.shape:
        raise DimensionMismatch("warped samples and candidates must share shape")
    both = warp_l.valid & warp_r.valid
    diff = warp_l.values - warp_r.values
    sq = np.mean(diff * diff, axis=-1)
    sq = np.where(both, sq, cfg.invalid_cost)
    r = cfg.patch_radius
    if r > 0:
        sq = uniform_filter(sq, size=(2 * r + 1, 2 * r + 1, 1), mode="nearest")
    cost = np.where(both, sq, cfg.invalid_cost)
    weights = softmax_weights(cost, cfg.softmax_temperature)
    # pixels seen by one source only get uniform weights, so d-bar stays at the initial depth
    valid = np.ones(candidates.shape[:2], dtype=bool) if pixel_valid is None else np.asarray(pixel_valid, bool)
    return CostVolume(candidates, cost, weights, valid.copy())


def regress_depth(vol: CostVolume) -> DepthMap:
    """Expected depth ``sum_n w_n d_n`` under the cost-volume weights."""
    d = np.sum(vol.weights * vol.candidates, axis=-1)
    return DepthMap(d, vol.valid)


def confidence(vol: CostVolume) -> np.ndarray:
    """Peak weight rescaled so a uniform distribution maps to 0 and a one-hot to 1."""
    n = vol.n_candidates
    return np.clip((vol.weights.max(axis=-1) - 1.0 / n) / (1.0 - 1.0 / n), 0.0, 1.0)


def visibility_cost(point_depth: np.ndarray, uv: np.ndarray, src_depth_map: np.ndarray, halfwidth: float) -> np.ndarray:
    """Penalty in [0, 1] for points lying behind the source's own surface.

    Zero when the point is in front of (or on) the source depth; reaches 1 when
    it is ``halfwidth`` (relative) behind it.
    """
    src_z, known = _source_depth_at(uv, src_depth_map)
    with np.errstate(divide="ignore", invalid="ignore"):
        behind = np.where(known, np.maximum(point_depth / src_z - 1.0, 0.0) / halfwidth, 0.0)
    return np.minimum(behind * behind, 1.0)


def init_color(
    warp_l: WarpedSamples,
    warp_r: WarpedSamples,
    cfg: RefineConfig = RefineConfig(),
    extra_cost_l: np.ndarray | None = None,
    extra_cost_r: np.ndarray | None = None,
) -> ColorInit:
    """Convex blend of the two warped colours at the refined depth.

    ``warp_l``/``warp_r`` hold a single candidate (the refined depth). Each
    source is weighted by ``exp(-cost_i / tau)`` where ``cost_i`` is the
    patch-mean squared difference against the other source plus an optional
    per-source term (e.g. ``visibility_cost``). A source with an invalid
    sample gets weight zero; with neither valid the pixel is invalid.
    """
    vl = warp_l.valid[..., 0]
    vr = warp_r.valid[..., 0]
    cl = warp_l.values[..., 0, :]
    cr = warp_r.values[..., 0, :]
    both = vl & vr
    sq = np.where(both, np.mean((cl - cr) ** 2, axis=-1), cfg.invalid_cost)
    r = cfg.patch_radius
    if r > 0:
        sq = uniform_filter(sq, size=2 * r + 1, mode="nearest")
    cost_l = sq + (0.0 if extra_cost_l is None else extra_cost_l)
    cost_r = sq + (0.0 if extra_cost_r is None else extra_cost_r)
    logits = np.stack([-cost_l, -cost_r], axis=-1) / cfg.softmax_temperature
    logits = np.where(np.stack([vl, vr], axis=-1), logits, -np.inf)
    top = np.max(logits, axis=-1, keepdims=True)
    any_valid = vl | vr
    e = np.where(any_valid[..., None], np.exp(logits - np.where(any_valid[..., None], top, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    w = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    color = w[..., :1] * cl + w[..., 1:] * cr
    color = np.where(both[..., None] & (cl == cr), cl, color)
    return ColorInit(np.clip(color, 0.0, 1.0), any_valid, w)
