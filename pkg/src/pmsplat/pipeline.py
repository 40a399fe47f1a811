"""End-to-end driver: synthetic sources -> registration -> target refinement -> render.

The configuration mirrors the JSON file read by the command-line tool, one
section per stage. ``run_pipeline`` returns every intermediate so tests and
demos can inspect them; ``Timer`` collects the per-stage wall clock.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .gaussians import DepthMap, GaussianPlane, RenderOutput, build_gaussian_plane, corrected_colors, splat
from .geometry import CameraModel, PointMap, project, unproject
from .metrics import chamfer_eval, psnr, ssim
from .refinement import (
    ColorInit,
    CostVolume,
    RefineConfig,
    build_cost_volume,
    confidence,
    fill_depth_holes,
    init_color,
    init_target_depth,
    mask_occluded,
    regress_depth,
    require_joint_support,
    sample_depth_candidates,
    visibility_cost,
    warp_source_to_target,
)
from .registration import Registration, RegistrationConfig, auxiliary_gaussian_plane, register
from .scenes import CorruptionSpec, SceneSpec, corrupt_pair, gen_rig, raycast_render, studio_scene

STAGES = (
    "point init",
    "affine transform",
    "depth init",
    "depth refine",
    "color init",
    "gaussian plane",
    "splatting",
)


class Timer:
    """Accumulates wall-clock milliseconds per named stage."""

    def __init__(self):
        self.ms = {name: 0.0 for name in STAGES}

    @contextmanager
    def __call__(self, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.ms[stage] = self.ms.get(stage, 0.0) + 1e3 * (time.perf_counter() - t0)

    @property
    def total(self) -> float:
        return sum(self.ms.values())


def _null_timer():
    @contextmanager
    def noop(stage):
        yield

    return noop


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    spec_path: str | None = None  # scene.json; procedural studio scene when omitted


@dataclass(frozen=True)
class RigConfig:
    n_cams: int = 6
    radius: float = 3.0
    arc_degrees: float = 60.0
    elevation: float = 0.5
    look_at: tuple = (0.0, 0.0, 0.9)


@dataclass(frozen=True)
class Stage1Config:
    coarse_width: int = 128
    coarse_height: int = 72
    true_scale: tuple = (1.3, 0.8, 1.6)
    true_offset: tuple = (0.04, -0.03, 0.05)
    smooth_warp_amplitude: float = 0.05
    smooth_warp_wavelength: float = 32.0
    noise_sigma: float = 0.0
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)


@dataclass(frozen=True)
class Stage2Config:
    fine_width: int = 256
    fine_height: int = 144
    refine: RefineConfig = field(
        default_factory=lambda: RefineConfig(search_halfwidth=0.03, softmax_temperature=3e-4, footprint=0.5)
    )
    footprint: float = 1.0
    opacity_floor: float = 0.5
    opacity_range: float = 0.45
    blend_alpha: float = 0.8
    occlusion_tolerance: float | None = 0.05  # relative; None disables the source visibility test
    hole_fill_distance: float | None = None  # pixels; None fills every hole, 0 disables
    color_correction_iterations: int = 30  # 0 keeps the residual colour at zero


@dataclass(frozen=True)
class RenderConfig:
    width: int = 320
    height: int = 180


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        """Build from nested dicts; unknown keys raise ``ValueError``, missing keys take defaults."""
        data = dict(data)
        data.pop("eval", None)  # evaluation has no tunables yet

        def build(klass, d):
            if d is None:
                return klass()
            if not isinstance(d, dict):
                raise ValueError(f"section for {klass.__name__} must be an object")
            known = {f.name: f for f in fields(klass)}
            unknown = set(d) - set(known)
            if unknown:
                raise ValueError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
            kw = {}
            for name, value in d.items():
                default = getattr(klass(), name)
                if hasattr(default, "__dataclass_fields__"):
                    kw[name] = build(type(default), value)
                elif isinstance(default, tuple):
                    kw[name] = tuple(value)
                else:
                    kw[name] = value
            try:
                return klass(**kw)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"bad {klass.__name__}: {exc}") from exc

        unknown = set(data) - {"scene", "rig", "stage1", "stage2", "render"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            build(SceneConfig, data.get("scene")),
            build(RigConfig, data.get("rig")),
            build(Stage1Config, data.get("stage1")),
            build(Stage2Config, data.get("stage2")),
            build(RenderConfig, data.get("render")),
        )


# --- stage 2 for one target --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SourceViews:
    """Everything stage 2 needs from the two registered sources."""

    metric_l: PointMap
    metric_r: PointMap
    coarse_l: np.ndarray
    coarse_r: np.ndarray
    coarse_cam_l: CameraModel
    coarse_cam_r: CameraModel
    fine_l: np.ndarray
    fine_r: np.ndarray
    fine_cam_l: CameraModel
    fine_cam_r: CameraModel


@dataclass(frozen=True, eq=False)
class TargetResult:
    init_depth: DepthMap
    volume: CostVolume
    depth: DepthMap
    color: ColorInit
    plane: GaussianPlane
    render: RenderOutput


def refine_target(
    src: SourceViews, target: CameraModel, out_size: tuple[int, int], cfg: Stage2Config = Stage2Config(), timer=None
) -> TargetResult:
    """Depth init, plane sweep, colour init, Gaussian plane and splat for one target camera.

    ``target`` is the camera at the fine resolution; ``out_size`` is the
    (width, height) of the final render.
    """
    timer = timer or _null_timer()
    rc = cfg.refine
    with timer("depth init"):
        init = init_target_depth(
            src.metric_l, src.metric_r, src.coarse_l, src.coarse_r, src.coarse_cam_l, src.coarse_cam_r, target, cfg=rc
        )
    with timer("depth refine"):
        if cfg.hole_fill_distance != 0:
            init = fill_depth_holes(init, cfg.hole_fill_distance)
        cands = sample_depth_candidates(init, rc)
        wl = warp_source_to_target(src.fine_l, cands, target, src.fine_cam_l)
        wr = warp_source_to_target(src.fine_r, cands, target, src.fine_cam_r)
        if cfg.occlusion_tolerance is not None:
            tol = cfg.occlusion_tolerance
            ref = cands[..., cands.shape[-1] // 2] * 0.5 + cands[..., (cands.shape[-1] - 1) // 2] * 0.5
            wl = mask_occluded(wl, ref, target, src.metric_l.depth_in(src.coarse_cam_l), src.coarse_cam_l, tol)
            wr = mask_occluded(wr, ref, target, src.metric_r.depth_in(src.coarse_cam_r), src.coarse_cam_r, tol)
        wl, wr = require_joint_support(wl, wr)
        vol = build_cost_volume(wl, wr, cands, rc, pixel_valid=init.valid)
        depth = regress_depth(vol)
    with timer("color init"):
        d = np.where(depth.valid, depth.depth, cands[..., cands.shape[-1] // 2])[..., None]
        cl = warp_source_to_target(src.fine_l, d, target, src.fine_cam_l)
        cr = warp_source_to_target(src.fine_r, d, target, src.fine_cam_r)
        pts = unproject(target.pixel_grid(), d[..., 0], target)
        extra = []
        for pmap, cam in ((src.metric_l, src.coarse_cam_l), (src.metric_r, src.coarse_cam_r)):
            uv, z = project(pts, cam)
            extra.append(visibility_cost(z, uv, pmap.depth_in(cam), rc.search_halfwidth))
        color = init_color(cl, cr, rc, *extra)
    with timer("gaussian plane"):
        anchored = DepthMap(depth.depth, depth.valid & color.valid)
        conf = np.where(anchored.valid, confidence(vol), 0.0)
        opts = dict(
            footprint=cfg.footprint,
            opacity_floor=cfg.opacity_floor,
            opacity_range=cfg.opacity_range,
            blend_alpha=cfg.blend_alpha,
        )
        plane = build_gaussian_plane(anchored, color.color, conf, target, **opts)
        if cfg.color_correction_iterations > 0 and plane.count and cfg.blend_alpha < 1:
            # residual colour chosen so the blended plane splats back onto the initial colour
            fixed = corrected_colors(plane, target, color.color, anchored.valid, cfg.color_correction_iterations)
            residual = np.zeros_like(color.color)
            residual[anchored.valid] = (fixed - cfg.blend_alpha * plane.colors) / (1.0 - cfg.blend_alpha)
            plane = build_gaussian_plane(anchored, color.color, conf, target, residual=residual, **opts)
    with timer("splatting"):
        render = splat(plane, target, *out_size)
    return TargetResult(init, vol, depth, color, plane, render)


def stage1_render(src: SourceViews, target: CameraModel, out_size: tuple[int, int], footprint: float = 1.0) -> RenderOutput:
    """Baseline: splat the two source-view auxiliary planes straight into the target."""
    planes = [
        auxiliary_gaussian_plane(src.metric_l, src.coarse_l, src.coarse_cam_l, footprint),
        auxiliary_gaussian_plane(src.metric_r, src.coarse_r, src.coarse_cam_r, footprint),
    ]
    return splat(planes, target, *out_size)


# --- whole pipeline ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PipelineResult:
    config: PipelineConfig
    scene: SceneSpec
    cameras: list  # at the output resolution
    registration: Registration
    sources: SourceViews
    targets: dict  # camera index -> TargetResult
    ground_truth: dict  # camera index -> RenderedView at the output resolution
    timer: Timer

    def report(self) -> dict:
        """Per-target image and geometry scores against ground truth, plus means."""
        return evaluate_frames(
            {f"view_{k}": (res.render.color, res.plane.positions) for k, res in self.targets.items()},
            {
                f"view_{k}": (gt.image, gt.points.valid_points() if gt.points is not None else None)
                for k, gt in self.ground_truth.items()
            },
        )


def evaluate_frames(pred: dict, gt: dict) -> dict:
    """Score matching frames; each value is ``(image, points or None)``.

    Chamfer entries are ``None`` when either side lacks points.
    """
    frames = {}
    for name in sorted(set(pred) & set(gt)):
        (img_p, pts_p), (img_g, pts_g) = pred[name], gt[name]
        row = {"psnr": psnr(img_p, img_g), "ssim": ssim(img_p, img_g), "chamfer_p2g": None, "chamfer_g2p": None}
        if pts_p is not None and pts_g is not None and len(pts_p) and len(pts_g):
            row["chamfer_p2g"], row["chamfer_g2p"] = chamfer_eval(pts_p, pts_g)
        frames[name] = row
    out = {"frames": frames}
    if frames:
        out["mean"] = {
            m: float(np.mean([f[m] for f in frames.values()]))
            if all(f[m] is not None for f in frames.values())
            else None
            for m in ("psnr", "ssim", "chamfer_p2g", "chamfer_g2p")
        }
    return out


def make_scene(cfg: PipelineConfig) -> SceneSpec:
    if cfg.scene.spec_path:
        import json

        with open(cfg.scene.spec_path) as fh:
            return SceneSpec.from_dict(json.load(fh))
    return studio_scene(cfg.scene.seed)


def make_rig(cfg: PipelineConfig, width: int, height: int) -> list:
    r = cfg.rig
    return gen_rig(
        r.n_cams,
        r.radius,
        look_at=r.look_at,
        arc_degrees=r.arc_degrees,
        elevation=r.elevation,
        width=width,
        height=height,
    )


def corruption_for(cfg: PipelineConfig) -> CorruptionSpec:
    s1 = cfg.stage1
    return CorruptionSpec(
        true_scale=s1.true_scale,
        true_offset=s1.true_offset,
        smooth_warp_amplitude=s1.smooth_warp_amplitude,
        smooth_warp_wavelength=s1.smooth_warp_wavelength,
        noise_sigma=s1.noise_sigma,
        seed=cfg.scene.seed,
    )


@dataclass(frozen=True, eq=False)
class SourceInputs:
    """What the two-stage pipeline consumes, whether generated in memory or read from disk.

    Cameras are full rig lists; the first and last entries are the sources.
    ``ground_truth`` maps target index to a rendered view at the output size
    and may be empty when no reference exists.
    """

    canonical_l: PointMap
    canonical_r: PointMap
    coarse_l: np.ndarray
    coarse_r: np.ndarray
    fine_l: np.ndarray
    fine_r: np.ndarray
    coarse_rig: list
    fine_rig: list
    out_rig: list
    ground_truth: dict = field(default_factory=dict)
    scene: SceneSpec | None = None


def prepare_sources(cfg: PipelineConfig, scene: SceneSpec | None = None, timer=None, targets=None) -> SourceInputs:
    """Render the synthetic rig and corrupt the coarse source point maps."""
    timer = timer or _null_timer()
    scene = scene if scene is not None else make_scene(cfg)
    s1, s2 = cfg.stage1, cfg.stage2
    with timer("point init"):
        coarse = make_rig(cfg, s1.coarse_width, s1.coarse_height)
        fine = make_rig(cfg, s2.fine_width, s2.fine_height)
        out = make_rig(cfg, cfg.render.width, cfg.render.height)
        ends = (0, len(coarse) - 1)
        cv = [raycast_render(scene, coarse[i]) for i in ends]
        fv = [raycast_render(scene, fine[i]) for i in ends]
        (canon_l, _), (canon_r, _) = corrupt_pair(cv[0].points, cv[1].points, corruption_for(cfg))
    indices = range(1, len(out) - 1) if targets is None else targets
    gts = {k: raycast_render(scene, out[k]) for k in indices}
    return SourceInputs(
        canon_l, canon_r, cv[0].image, cv[1].image, fv[0].image, fv[1].image, coarse, fine, out, gts, scene
    )


def register_sources(inputs: SourceInputs, cfg: RegistrationConfig = RegistrationConfig(), timer=None):
    """Stage 1 on the source pair; returns the registration and the stage-2 inputs."""
    timer = timer or _null_timer()
    cl, cr = inputs.coarse_rig[0], inputs.coarse_rig[-1]
    with timer("affine transform"):
        reg = register(inputs.canonical_l, inputs.canonical_r, inputs.coarse_l, inputs.coarse_r, cl, cr, cfg)
    src = SourceViews(
        reg.metric_l,
        reg.metric_r,
        inputs.coarse_l,
        inputs.coarse_r,
        cl,
        cr,
        inputs.fine_l,
        inputs.fine_r,
        inputs.fine_rig[0],
        inputs.fine_rig[-1],
    )
    return reg, src


def run_pipeline(
    cfg: PipelineConfig = PipelineConfig(), targets=None, timer: Timer | None = None, inputs: SourceInputs | None = None
) -> PipelineResult:
    """Run both stages for every interior rig camera (or the given indices).

    Without ``inputs`` the synthetic scene named by ``cfg`` is rendered first.
    """
    timer = timer or Timer()
    if inputs is None:
        inputs = prepare_sources(cfg, timer=timer, targets=targets)
    reg, src = register_sources(inputs, cfg.stage1.registration, timer)
    out_size = (cfg.render.width, cfg.render.height)
    indices = range(1, len(inputs.fine_rig) - 1) if targets is None else targets
    results = {k: refine_target(src, inputs.fine_rig[k], out_size, cfg.stage2, timer) for k in indices}
    gts = {k: v for k, v in inputs.ground_truth.items() if k in results}
    return PipelineResult(cfg, inputs.scene, inputs.out_rig, reg, src, results, gts, timer)


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, scene=replace(cfg.scene, seed=seed))
