"""Stage 1: lift a pair of canonical point maps into metric space.

The canonical maps first get one global per-axis scale (plus a global offset)
from a linear least-squares fit, then a per-pixel translation field refined by
repeatedly projecting every point into the other view, sampling that image,
and descending the photometric mismatch.

Every metric point is expected to sit on the viewing ray of the pixel that
owns it. Both fits use that as an anchor: without it the cross-view
correspondence distance is minimised by shrinking the scale to zero, and the
photometric term alone pins only one of the three translation components.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, DimensionMismatch, EmptySet, InsufficientOverlap, NonFiniteResidual
from .gaussians import GaussianPlane, pixel_plane
from .geometry import (
    AffineTransform,
    CameraModel,
    PointMap,
    Space,
    apply_affine,
    bilinear_query,
    project,
    projection_jacobian,
)
from .metrics import l_render, nearest_distances

logger = logging.getLogger(__name__)

GAMMA = 0.5


@dataclass(frozen=True)
class RegistrationConfig:
    iterations: int = 30
    step_size: float = 1.0
    smoothness_weight: float = 0.01
    gamma: float = GAMMA
    coarse_width: int = 512
    coarse_height: int = 288
    huber_delta: float = 0.05
    ray_weight: float = 1000.0
    occlusion_threshold: float = 0.05
    max_halvings: int = 8
    scale_rounds: int = 10
    scale_tol: float = 1e-6
    min_correspondences: int = 100
    color_weight: float = 1.0
    damping: float = 1e-6
    mask_refresh: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.smoothness_weight < 0 or self.gamma < 0:
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True, eq=False)
class ColoredPointSet:
    """``(N, 6)`` rows of ``x, y, z, r, g, b``."""

    points: np.ndarray
    source: str = ""

    @classmethod
    def from_map(cls, pmap: PointMap, image: np.ndarray, source: str = "", color_weight: float = 1.0):
        xyz = pmap.points[pmap.valid]
        rgb = np.asarray(image, dtype=np.float64).reshape(pmap.shape + (-1,))[pmap.valid]
        if rgb.shape[1] == 1:
            rgb = np.repeat(rgb, 3, axis=1)
        return cls(np.hstack([xyz, color_weight * rgb]), source)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class ScaleEstimate:
    scale: np.ndarray
    offset: np.ndarray
    correspondences: int
    rounds: int


@dataclass(frozen=True, eq=False)
class Registration:
    transform_l: AffineTransform
    transform_r: AffineTransform
    metric_l: PointMap
    metric_r: PointMap
    scale: ScaleEstimate
    energies: list


# --- global scale ---------------------------------------------------------------


def _ray_system(X: np.ndarray, rays: np.ndarray, center: np.ndarray):
    """Normal equations of ``(I - r r^T)(S*X + t0 - C) = 0`` for rows ``X`` (n, 3), rays (n, 3)."""
    P = np.eye(3) - rays[:, :, None] * rays[:, None, :]
    A = np.concatenate([P * X[:, None, :], P], axis=2)  # (n, 3, 6): P @ [diag(X) | I]
    b = P @ center
    return np.einsum("nki,nkj->ij", A, A), np.einsum("nki,nk->i", A, b)


def _cross_view_pairs(src: PointMap, dst: PointMap, scale, offset, cam_src, cam_dst: CameraModel, threshold):
    """Pair each scaled ``src`` point with the ``dst`` point sampled at its reprojection.

    Returns the sampled canonical ``dst`` points and the ``src`` pixel rays
    they must lie on, keeping only depth-consistent pairs.
    """
    P = scale * src.points + offset
    uv, z = project(P, cam_dst)
    dst_metric = scale * dst.points + offset
    sampled, inside = bilinear_query(dst.points, uv)
    vfrac, _ = bilinear_query(dst.valid.astype(np.float64), uv)
    ok = src.valid & inside & (z > 0) & (vfrac > 1 - 1e-9)
    z_dst, _ = bilinear_query(cam_dst.to_camera(dst_metric)[..., 2], uv)
    dz = np.abs(z - z_dst)
    if ok.any():
        threshold = max(threshold, 2.5 * float(np.median(dz[ok])))
    ok &= dz <= threshold
    return sampled[ok], cam_src.ray_directions()[ok]


def estimate_scale_and_offset(
    map_l: PointMap,
    map_r: PointMap,
    cam_l: CameraModel,
    cam_r: CameraModel,
    cfg: RegistrationConfig = RegistrationConfig(),
) -> ScaleEstimate:
    """Per-axis scale and global offset taking both canonical maps into the cameras' metric frame.

    Every point must lie on its own pixel ray. Each round also pairs every
    scaled point with the bilinearly sampled point of the other map at its
    reprojection and asks that sampled point to lie on the same pixel ray,
    then solves one linear least-squares problem over all of it.
    """
    n_ray_l, b_ray_l = _ray_system(map_l.points[map_l.valid], cam_l.ray_directions()[map_l.valid], cam_l.center)
    n_ray_r, b_ray_r = _ray_system(map_r.points[map_r.valid], cam_r.ray_directions()[map_r.valid], cam_r.center)
    N_ray = n_ray_l + n_ray_r
    b_ray = b_ray_l + b_ray_r

    def solve(N, b):
        w, _ = np.linalg.eigh(N)
        if w[0] <= 1e-12 * max(w[-1], 1e-300):
            raise DegenerateGeometry("scale/offset least-squares system is rank deficient")
        theta = np.linalg.solve(N, b)
        if np.any(theta[:3] <= 0) or not np.all(np.isfinite(theta)):
            raise DegenerateGeometry(f"non-positive scale estimate {theta[:3]}")
        return theta[:3], theta[3:]

    scale, offset = solve(N_ray, b_ray)
    n_pairs = 0
    rounds = 0
    for rounds in range(1, cfg.scale_rounds + 1):
        x_lr, rays_l = _cross_view_pairs(map_l, map_r, scale, offset, cam_l, cam_r, cfg.occlusion_threshold)
        x_rl, rays_r = _cross_view_pairs(map_r, map_l, scale, offset, cam_r, cam_l, cfg.occlusion_threshold)
        n_pairs = len(x_lr) + len(x_rl)
        if min(len(x_lr), len(x_rl)) < cfg.min_correspondences:
            raise InsufficientOverlap(
                f"only {len(x_lr)}/{len(x_rl)} cross-view correspondences (need {cfg.min_correspondences})"
            )
        n_lr, b_lr = _ray_system(x_lr, rays_l, cam_l.center)
        n_rl, b_rl = _ray_system(x_rl, rays_r, cam_r.center)
        new_scale, new_offset = solve(N_ray + n_lr + n_rl, b_ray + b_lr + b_rl)
        change = np.max(np.abs(new_scale - scale) / scale)
        scale, offset = new_scale, new_offset
        if change < cfg.scale_tol:
            break
    return ScaleEstimate(scale, offset, n_pairs, rounds)


def refit_scale(canon_l, canon_r, metric_l, metric_r, mask_l, mask_r) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis scale and offset from registered metric points, canonical regressed on metric.

    A per-pixel translation absorbs whatever the global fit misses, so once the
    metric points are in place the split between ``S`` and ``T`` is the
    question. Regressing canonical on metric (one intercept per view) keeps
    the non-affine part of the translation in the response, where it does
    not bias the slope.
    """
    n_l, n_r = int(mask_l.sum()), int(mask_r.sum())
    ind = np.r_[np.ones(n_l), np.zeros(n_r)]
    scale = np.empty(3)
    offset = np.empty(3)
    for c in range(3):
        m = np.r_[metric_l.points[..., c][mask_l], metric_r.points[..., c][mask_r]]
        x = np.r_[canon_l.points[..., c][mask_l], canon_r.points[..., c][mask_r]]
        (a, c_l, c_r), *_ = np.linalg.lstsq(np.c_[m, ind, 1 - ind], x, rcond=None)
        if not a > 0:
            raise DegenerateGeometry(f"non-positive slope on axis {c} during scale refit")
        scale[c] = 1.0 / a
        offset[c] = -0.5 * (c_l + c_r) * scale[c]
    return scale, offset


def estimate_scale(map_l, map_r, cam_l, cam_r, cfg: RegistrationConfig = RegistrationConfig()) -> np.ndarray:
    """Per-axis scale ``S`` (3,) for a canonical pair; see ``estimate_scale_and_offset``."""
    return estimate_scale_and_offset(map_l, map_r, cam_l, cam_r, cfg).scale


# --- per-pixel translation ------------------------------------------------------


def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_grad(r, delta):
    return np.clip(r, -delta, delta)


@dataclass(frozen=True, eq=False)
class _View:
    base: np.ndarray  # (H, W, 3) scaled points before translation
    valid: np.ndarray
    image: np.ndarray  # (H, W, C)
    cam: CameraModel
    ray_proj: np.ndarray  # (H, W, 3, 3) projector orthogonal to the pixel ray


@dataclass(frozen=True, eq=False)
class TranslationProblem:
    """Fixed data of the translation objective for one source pair."""

    views: tuple
    masks: tuple  # per view, pixels whose data term is active
    cfg: RegistrationConfig

    def with_masks_at(self, T_l, T_r) -> "TranslationProblem":
        """Same problem with the occlusion masks recomputed for the current translations."""
        moved = [
            _View(v.base + T, v.valid, v.image, v.cam, v.ray_proj) for v, T in zip(self.views, (T_l, T_r))
        ]
        masks = tuple(_consistency_mask(moved[i], moved[1 - i], self.cfg.occlusion_threshold) for i in range(2))
        return TranslationProblem(self.views, masks, self.cfg)

    @classmethod
    def build(cls, map_l, map_r, img_l, img_r, cam_l, cam_r, cfg):
        views = []
        for pmap, img, cam in ((map_l, img_l, cam_l), (map_r, img_r, cam_r)):
            img = np.asarray(img, dtype=np.float64)
            if img.ndim == 2:
                img = img[..., None]
            if img.shape[:2] != pmap.shape or cam.shape != pmap.shape:
                raise DimensionMismatch("point map, image and camera must share one pixel grid")
            r = cam.ray_directions()
            proj = np.eye(3) - r[..., :, None] * r[..., None, :]
            views.append(_View(pmap.points, pmap.valid, img, cam, proj))
        masks = tuple(
            _consistency_mask(views[i], views[1 - i], cfg.occlusion_threshold) for i in range(2)
        )
        return cls(tuple(views), masks, cfg)


def _consistency_mask(src: _View, dst: _View, threshold: float) -> np.ndarray:
    """Pixels whose point reprojects onto a depth-consistent point of the other view."""
    uv, z = project(src.base, dst.cam)
    z_dst_map = np.where(dst.valid, dst.cam.to_camera(dst.base)[..., 2], 0.0)
    z_dst, inside = bilinear_query(z_dst_map, uv)
    vfrac, _ = bilinear_query(dst.valid.astype(np.float64), uv)
    return src.valid & inside & (z > 0) & (vfrac > 1 - 1e-9) & (np.abs(z - z_dst) <= threshold)


def _data_terms(view: _View, other: _View, mask, T, delta, want_grad):
    P = view.base + T
    uv, z = project(P, other.cam)
    out = bilinear_query(other.image, uv, return_grad=want_grad)
    sampled, inside = out[0], out[1]
    active = mask & inside & (z > 0)
    resid = view.image - sampled
    if not np.all(np.isfinite(resid[active])):
        raise NonFiniteResidual("photometric residual is not finite")
    energy = np.where(active[..., None], huber(resid, delta), 0.0).sum()
    if not want_grad:
        return energy, None, None
    du, dv = out[2]
    J = projection_jacobian(np.where(active[..., None], P, view.base + 1.0), other.cam)
    # d resid_c / dP = -(du_c * J[0] + dv_c * J[1])
    g_c = -(du[..., :, None] * J[..., None, 0, :] + dv[..., :, None] * J[..., None, 1, :])
    g_c = np.where(active[..., None, None], g_c, 0.0)
    rho1 = huber_grad(resid, delta)
    grad = np.einsum("hwc,hwck->hwk", rho1, g_c)
    # IRLS weight for the Gauss-Newton block
    w = np.where(np.abs(resid) <= delta, 1.0, delta / np.maximum(np.abs(resid), 1e-300))
    hess = np.einsum("hwc,hwci,hwcj->hwij", w, g_c, g_c)
    return energy, grad, hess


def _smoothness(T, valid, weight):
    """``weight * sum over 4-neighbour edges of |T_p - T_q|^2`` between valid pixels."""
    energy = 0.0
    grad = np.zeros_like(T)
    degree = np.zeros(T.shape[:2])
    for axis in (0, 1):
        n = T.shape[axis]
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(0, n - 1)
        b[axis] = slice(1, n)
        a, b = tuple(a), tuple(b)
        edge = valid[a] & valid[b]
        diff = np.where(edge[..., None], T[a] - T[b], 0.0)
        energy += weight * float(np.sum(diff * diff))
        grad[a] += 2 * weight * diff
        grad[b] -= 2 * weight * diff
        degree[a] += edge
        degree[b] += edge
    return energy, grad, 2 * weight * degree


def _ray_terms(view: _View, T, weight):
    """``weight * |(I - r r^T)(P - C)|^2``: distance of each point from its own pixel ray."""
    q = np.einsum("hwij,hwj->hwi", view.ray_proj, view.base + T - view.cam.center)
    q = np.where(view.valid[..., None], q, 0.0)
    energy = weight * float(np.sum(q * q))
    return energy, 2 * weight * q, 2 * weight * view.ray_proj


def translation_objective(problem: TranslationProblem, T_l, T_r, want_grad: bool = False):
    """Objective value (and per-pixel gradients / Gauss-Newton blocks) of a translation pair."""
    cfg = problem.cfg
    Ts = (T_l, T_r)
    total = 0.0
    grads, blocks = [], []
    for i in range(2):
        view, other = problem.views[i], problem.views[1 - i]
        e_d, g_d, h_d = _data_terms(view, other, problem.masks[i], Ts[i], cfg.huber_delta, want_grad)
        e_s, g_s, h_s = _smoothness(Ts[i], view.valid, cfg.smoothness_weight)
        e_r, g_r, h_r = _ray_terms(view, Ts[i], cfg.ray_weight)
        total += e_d + e_s + e_r
        if want_grad:
            mask = view.valid[..., None]
            grads.append(np.where(mask, g_d + g_s + g_r, 0.0))
            blocks.append(h_d + h_s[..., None, None] * np.eye(3) + h_r)
    if want_grad:
        return total, grads, blocks
    return total


def iterative_translation(map_l, map_r, img_l, img_r, cam_l, cam_r, cfg: RegistrationConfig = RegistrationConfig()):
    """Per-pixel translation fields ``(T_l, T_r)`` for two scaled point maps.

    Each iteration projects every point into the other view, samples the
    image there, and takes a block-preconditioned descent step on the
    objective; a backtracking line search (halving up to ``max_halvings``
    times) keeps only steps that lower it. The occlusion masks are
    recomputed every ``mask_refresh`` iterations, which starts a new epoch
    of the objective.

    Returns ``(T_l, T_r, history)`` where ``history`` holds one list of
    objective values per epoch, each non-increasing.
    """
    problem = TranslationProblem.build(map_l, map_r, img_l, img_r, cam_l, cam_r, cfg)
    T = [np.zeros(map_l.points.shape), np.zeros(map_r.points.shape)]
    history = []
    eye = np.eye(3)
    stalled = False
    for it in range(cfg.iterations):
        if it % cfg.mask_refresh == 0:
            if it:
                problem = problem.with_masks_at(*T)
            history.append([translation_objective(problem, *T)])
            stalled = False
        if stalled:
            continue
        energy, grads, blocks = translation_objective(problem, *T, want_grad=True)
        steps = []
        for g, Hb, view in zip(grads, blocks, problem.views):
            damp = cfg.damping * (1.0 + np.trace(Hb, axis1=-2, axis2=-1))[..., None, None]
            d = -np.linalg.solve(Hb + damp * eye, g[..., None])[..., 0]
            steps.append(np.where(view.valid[..., None], d, 0.0))
        t = cfg.step_size
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = [T[k] + t * steps[k] for k in range(2)]
            e_new = translation_objective(problem, *trial)
            if e_new < energy:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            stalled = True
            continue
        T = trial
        history[-1].append(e_new)
    logger.debug("translation objective per epoch: %s", [(h[0], h[-1]) for h in history])
    return T[0], T[1], history


# --- chamfer, auxiliary planes, objective -------------------------------------


def chamfer_6d(p_l: ColoredPointSet, p_r: ColoredPointSet) -> tuple[float, float, float]:
    """Directed 6-D Chamfer terms and their sum ``(l->r, r->l, total)``."""
    a = np.asarray(p_l.points if isinstance(p_l, ColoredPointSet) else p_l, dtype=np.float64)
    b = np.asarray(p_r.points if isinstance(p_r, ColoredPointSet) else p_r, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer_6d needs non-empty point sets")
    l2r = float(nearest_distances(a, b).mean())
    r2l = float(nearest_distances(b, a).mean())
    return l2r, r2l, l2r + r2l


def auxiliary_gaussian_plane(
    pmap: PointMap, image: np.ndarray, cam: CameraModel, footprint: float = 1.0, opacity: float = 0.95
) -> GaussianPlane:
    """Source-view Gaussian plane: one isotropic primitive per valid point, coloured by its pixel."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != pmap.shape:
        raise DimensionMismatch("point map and image must share one pixel grid")
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    return pixel_plane(pmap.points, pmap.valid, image, cam, opacity, footprint)


def stage1_objective(render, gt, p_l: ColoredPointSet, p_r: ColoredPointSet, gamma: float = GAMMA) -> float:
    """Rendering loss plus ``gamma`` times the 6-D Chamfer regulariser."""
    loss = l_render(render, gt)
    if gamma == 0:
        return loss
    return loss + gamma * chamfer_6d(p_l, p_r)[2]


def register(
    map_l: PointMap,
    map_r: PointMap,
    img_l,
    img_r,
    cam_l: CameraModel,
    cam_r: CameraModel,
    cfg: RegistrationConfig = RegistrationConfig(),
) -> Registration:
    """Scale, then per-pixel translation, then apply: canonical pair in, metric pair out."""
    est = estimate_scale_and_offset(map_l, map_r, cam_l, cam_r, cfg)
    scaled_l = PointMap(est.scale * map_l.points + est.offset, map_l.valid, Space.METRIC)
    scaled_r = PointMap(est.scale * map_r.points + est.offset, map_r.valid, Space.METRIC)
    T_l, T_r, history = iterative_translation(scaled_l, scaled_r, img_l, img_r, cam_l, cam_r, cfg)
    metric_l = apply_affine(map_l, AffineTransform(est.scale, est.offset + T_l))
    metric_r = apply_affine(map_r, AffineTransform(est.scale, est.offset + T_r))

    # re-split into S and T over the co-visible pixels; metric points stay put
    problem = TranslationProblem.build(metric_l, metric_r, img_l, img_r, cam_l, cam_r, cfg)
    mask_l, mask_r = problem.masks
    if min(mask_l.sum(), mask_r.sum()) < cfg.min_correspondences:
        mask_l, mask_r = map_l.valid, map_r.valid
    scale, offset = refit_scale(map_l, map_r, metric_l, metric_r, mask_l, mask_r)
    tf_l = AffineTransform(scale, metric_l.points - scale * map_l.points)
    tf_r = AffineTransform(scale, metric_r.points - scale * map_r.points)
    est = ScaleEstimate(scale, offset, est.correspondences, est.rounds)
    return Registration(tf_l, tf_r, apply_affine(map_l, tf_l), apply_affine(map_r, tf_r), est, history)
