"""Command-line driver: gen-scene, stage1, stage2, render, eval, pipeline, profile.

Exit status is 0 on success, 2 when the configuration or arguments are
unusable and 3 when a processing stage fails. Failures are reported on
standard error as ``<stage>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import io
from .gaussians import splat
from .geometry import Space, unproject
from .pipeline import (
    STAGES,
    PipelineConfig,
    SourceInputs,
    SourceViews,
    Timer,
    corruption_for,
    evaluate_frames,
    make_rig,
    make_scene,
    refine_target,
    run_pipeline,
)
from .registration import register
from .scenes import RenderedView, SceneSpec, corrupt_pair, raycast_render

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    """Re-raise anything that goes wrong inside as a ``StageError`` naming ``name``."""
    try:
        yield
    except (StageError, ConfigError):
        raise
    except FileNotFoundError as exc:
        raise StageError(name, f"missing file {exc.filename or exc}") from exc
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    try:
        return PipelineConfig.from_dict(data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "No such file", str(path))
    return path


def _out_path(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _rig_for(cams_path, width: int, height: int) -> list:
    return [c.resized(width, height) for c in io.load_cameras(_require(cams_path))]


# --- scene directories ---------------------------------------------------------------
#
#   cams.json                 rig at the fine resolution
#   scene.json                the scene that was rendered
#   view_<k>.png/.pfm/.ply    fine-resolution ground truth for every camera
#   left.png, right.png       coarse source images
#   left.ply, right.ply       canonical (corrupted) coarse source point maps
#   gt/view_<k>.png/.ply      output-resolution ground truth for the targets


def write_scene_dir(out: Path, cfg: PipelineConfig, scene: SceneSpec) -> None:
    out.mkdir(parents=True, exist_ok=True)
    s1, s2 = cfg.stage1, cfg.stage2
    fine = make_rig(cfg, s2.fine_width, s2.fine_height)
    coarse = make_rig(cfg, s1.coarse_width, s1.coarse_height)
    final = make_rig(cfg, cfg.render.width, cfg.render.height)
    io.save_cameras(out / "cams.json", fine)
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=1) + "\n")
    for k, cam in enumerate(fine):
        view = raycast_render(scene, cam)
        io.save_image(out / f"view_{k}.png", view.image)
        io.save_pfm(out / f"view_{k}.pfm", view.depth)
        io.save_pointmap(out / f"view_{k}.ply", view.points, view.image)
    cv = [raycast_render(scene, coarse[i]) for i in (0, -1)]
    (canon_l, _), (canon_r, _) = corrupt_pair(cv[0].points, cv[1].points, corruption_for(cfg))
    for name, view, canon in (("left", cv[0], canon_l), ("right", cv[1], canon_r)):
        io.save_image(out / f"{name}.png", view.image)
        io.save_pointmap(out / f"{name}.ply", canon, view.image)
    (out / "gt").mkdir(exist_ok=True)
    for k in range(1, len(final) - 1):
        view = raycast_render(scene, final[k])
        io.save_image(out / "gt" / f"view_{k}.png", view.image)
        io.save_pointmap(out / "gt" / f"view_{k}.ply", view.points, view.image)


def read_scene_dir(directory, cfg: PipelineConfig) -> SourceInputs:
    d = Path(directory)
    cams = io.load_cameras(_require(d / "cams.json"))
    canon_l, _ = io.load_pointmap(_require(d / "left.ply"), Space.CANONICAL)
    canon_r, _ = io.load_pointmap(_require(d / "right.ply"), Space.CANONICAL)
    coarse_l = io.load_image(_require(d / "left.png"))
    coarse_r = io.load_image(_require(d / "right.png"))
    fine_l = io.load_image(_require(d / "view_0.png"))
    fine_r = io.load_image(_require(d / f"view_{len(cams) - 1}.png"))
    ch, cw = coarse_l.shape[:2]
    fh, fw = fine_l.shape[:2]
    coarse_rig = [c.resized(cw, ch) for c in cams]
    fine_rig = [c.resized(fw, fh) for c in cams]
    out_rig = [c.resized(cfg.render.width, cfg.render.height) for c in cams]
    gts = {}
    for k in range(1, len(cams) - 1):
        img_path, ply_path = d / "gt" / f"view_{k}.png", d / "gt" / f"view_{k}.ply"
        if img_path.exists():
            image = io.load_image(img_path)
            points = io.load_pointmap(ply_path)[0] if ply_path.exists() else None
            gts[k] = RenderedView(image, None, points, None)
    scene = None
    if (d / "scene.json").exists():
        scene = SceneSpec.from_dict(json.loads((d / "scene.json").read_text()))
    return SourceInputs(canon_l, canon_r, coarse_l, coarse_r, fine_l, fine_r, coarse_rig, fine_rig, out_rig, gts, scene)


# --- subcommands ---------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, seed=args.seed))
    if args.spec is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, spec_path=str(args.spec)))
    if args.rig is not None:
        if args.rig < 3:
            raise ConfigError("--rig needs at least 3 cameras")
        cfg = replace(cfg, rig=replace(cfg.rig, n_cams=args.rig))
    with stage("point init"):
        scene = make_scene(cfg)
        write_scene_dir(Path(args.out), cfg, scene)
    return EXIT_OK


def cmd_stage1(args) -> int:
    cfg = load_config(args.config)
    with stage("point init"):
        img_l, img_r = io.load_image(_require(args.left)), io.load_image(_require(args.right))
        map_l, _ = io.load_pointmap(_require(args.pm_left), Space.CANONICAL)
        map_r, _ = io.load_pointmap(_require(args.pm_right), Space.CANONICAL)
        H, W = img_l.shape[:2]
        if map_l.shape != (H, W) or map_r.shape != img_r.shape[:2]:
            raise ValueError("point maps and images must share a pixel grid")
        rig = _rig_for(args.cams, W, H)
    with stage("affine transform"):
        reg = register(map_l, map_r, img_l, img_r, rig[0], rig[-1], cfg.stage1.registration)
    out = _out_path(args.out)
    stem = out.with_suffix("")
    io.save_pointmap(f"{stem}.metric_left.ply", reg.metric_l, img_l)
    io.save_pointmap(f"{stem}.metric_right.ply", reg.metric_r, img_r)
    extra = {
        "metric_left": Path(f"{stem}.metric_left.ply").name,
        "metric_right": Path(f"{stem}.metric_right.ply").name,
        "image_left": str(Path(args.left).resolve()),
        "image_right": str(Path(args.right).resolve()),
    }
    io.save_registration(out, reg, extra)
    return EXIT_OK


def cmd_stage2(args) -> int:
    cfg = load_config(args.config)
    with stage("depth init"):
        reg_path = _require(args.reg)
        rec = io.load_registration(reg_path)
        base = reg_path.parent
        metric_l, coarse_l = io.load_pointmap(_require(base / rec["metric_left"]), Space.METRIC)
        metric_r, coarse_r = io.load_pointmap(_require(base / rec["metric_right"]), Space.METRIC)
        if "image_left" in rec and Path(rec["image_left"]).exists():
            coarse_l, coarse_r = io.load_image(rec["image_left"]), io.load_image(rec["image_right"])
        fine_l, fine_r = io.load_image(_require(args.left_fine)), io.load_image(_require(args.right_fine))
        fh, fw = fine_l.shape[:2]
        ch, cw = metric_l.shape
        cams = io.load_cameras(_require(args.cams))
        if not 0 <= args.target < len(cams):
            raise ValueError(f"target {args.target} outside rig of {len(cams)} cameras")
        coarse = [c.resized(cw, ch) for c in cams]
        fine = [c.resized(fw, fh) for c in cams]
    src = SourceViews(metric_l, metric_r, coarse_l, coarse_r, coarse[0], coarse[-1], fine_l, fine_r, fine[0], fine[-1])
    out_size = (args.width or cfg.render.width, args.height or cfg.render.height)
    res = _staged_refine(src, fine[args.target], out_size, cfg)
    out = _out_path(args.out)
    stem = out.with_suffix("")
    io.save_pfm(out, res.depth)
    io.save_image(f"{stem}.color.png", res.color.color)
    io.save_plane(f"{stem}.plane.bin", res.plane)
    return EXIT_OK


def _staged_refine(src, target, out_size, cfg):
    """``refine_target`` with the failing stage reported by name."""
    timer = Timer()
    current = {"name": "depth init"}

    @contextmanager
    def tracking(name):
        current["name"] = name
        with timer(name):
            yield

    try:
        return refine_target(src, target, out_size, cfg.stage2, tracking)
    except Exception as exc:
        raise StageError(current["name"], f"{type(exc).__name__}: {exc}") from exc


def cmd_render(args) -> int:
    with stage("splatting"):
        plane = io.load_plane(_require(args.plane))
        cams = io.load_cameras(_require(args.cam))
        if not 0 <= args.view < len(cams):
            raise ValueError(f"view {args.view} outside rig of {len(cams)} cameras")
        cam = cams[args.view]
        out = splat(plane, cam, args.width or cam.width, args.height or cam.height)
        io.save_image(_out_path(args.out), out.color)
        if args.depth:
            io.save_pfm(_out_path(args.depth), out.depth)
    return EXIT_OK


def _frames_in(directory: Path, cams=None) -> dict:
    """``name -> (png path, points or None)``; points come from ``name.ply`` or,
    given the rig, from unprojecting ``name.pfm`` with camera ``k`` for ``view_<k>``."""
    frames = {}
    for png in sorted(directory.glob("*.png")):
        if png.name.endswith(".mask.png") or png.name.endswith(".color.png"):
            continue
        ply, pfm = png.with_suffix(".ply"), png.with_suffix(".pfm")
        pts = None
        if ply.exists():
            pts = io.load_points(ply)[0]
        elif pfm.exists() and cams is not None and png.stem.startswith("view_"):
            k = int(png.stem.split("_", 1)[1])
            depth = io.load_pfm(pfm)
            cam = cams[k].resized(depth.shape[1], depth.shape[0])
            pts = unproject(cam.pixel_grid()[depth.valid], depth.depth[depth.valid], cam)
        frames[png.stem] = (png, pts)
    return frames


def cmd_eval(args) -> int:
    with stage("eval"):
        pred_dir, gt_dir = _require(args.pred), _require(args.gt)
        cams = io.load_cameras(_require(args.cams)) if args.cams else None
        pred, gt = _frames_in(pred_dir, cams), _frames_in(gt_dir, cams)
        common = sorted(set(pred) & set(gt))
        if not common:
            raise ValueError(f"no frame names shared by {pred_dir} and {gt_dir}")
        load = lambda d: {k: (io.load_image(d[k][0]), d[k][1]) for k in common}  # noqa: E731
        report = evaluate_frames(load(pred), load(gt))
        _write_json(_out_path(args.out), report)
    return EXIT_OK


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _run(cfg: PipelineConfig, inputs_dir, timer: Timer):
    current = {"name": STAGES[0]}

    @contextmanager
    def tracking(name):
        current["name"] = name
        with timer(name):
            yield

    try:
        inputs = None
        if inputs_dir is not None:
            with tracking("point init"):
                inputs = read_scene_dir(inputs_dir, cfg)
        return run_pipeline(cfg, timer=tracking, inputs=inputs)
    except FileNotFoundError as exc:
        raise StageError(current["name"], f"missing file {exc.filename or exc}") from exc
    except Exception as exc:
        raise StageError(current["name"], f"{type(exc).__name__}: {exc}") from exc


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    result = _run(cfg, args.inputs, Timer())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with stage("output"):
        _write_json(out / "config.json", cfg.to_dict())
        io.save_registration(out / "reg.json", result.registration, {"metric_left": "reg.metric_left.ply", "metric_right": "reg.metric_right.ply"})
        io.save_pointmap(out / "reg.metric_left.ply", result.registration.metric_l, result.sources.coarse_l)
        io.save_pointmap(out / "reg.metric_right.ply", result.registration.metric_r, result.sources.coarse_r)
        for k, res in result.targets.items():
            name = f"view_{k}"
            io.save_image(out / f"{name}.png", res.render.color)
            io.save_image(out / f"{name}.color.png", res.color.color)
            io.save_pfm(out / f"{name}.refined.pfm", res.depth)
            io.save_plane(out / f"{name}.plane.bin", res.plane)
        _write_json(out / "report.json", result.report())
    return EXIT_OK


def format_profile(timer: Timer) -> str:
    rows = [(name, timer.ms.get(name, 0.0)) for name in STAGES]
    total = sum(ms for _, ms in rows)
    width = max(len(name) for name in STAGES + ("total",))
    lines = [f"{'stage':<{width}}  {'ms':>10}"]
    lines += [f"{name:<{width}}  {ms:>10.1f}" for name, ms in rows]
    lines.append(f"{'total':<{width}}  {total:>10.1f}")
    return "\n".join(lines)


def cmd_profile(args) -> int:
    cfg = load_config(args.config)
    timer = Timer()
    _run(cfg, args.inputs, timer)
    print(format_profile(timer))
    if args.json:
        _write_json(args.json, {name: timer.ms.get(name, 0.0) for name in STAGES} | {"total": timer.total})
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmsplat", description="Two-view point-map registration and Gaussian-plane novel views.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", type=Path, help="JSON config with sections scene, rig, stage1, stage2, render, eval")

    g = sub.add_parser("gen-scene", help="render a synthetic rig and corrupted source point maps")
    add_config(g)
    g.add_argument("--spec", type=Path, help="scene.json; the procedural studio scene when omitted")
    g.add_argument("--seed", type=int, help="scene and corruption seed (overrides the config)")
    g.add_argument("--rig", type=int, help="number of cameras (overrides the config)")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.set_defaults(func=cmd_gen_scene)

    s1 = sub.add_parser("stage1", help="register canonical source point maps into metric space")
    add_config(s1)
    s1.add_argument("--left", required=True, help="left source image (PNG)")
    s1.add_argument("--right", required=True, help="right source image (PNG)")
    s1.add_argument("--pm-left", required=True, help="left canonical point map (PLY with .mask.png)")
    s1.add_argument("--pm-right", required=True, help="right canonical point map (PLY with .mask.png)")
    s1.add_argument("--cams", required=True, help="rig cams.json; first and last entries are the sources")
    s1.add_argument("--out", required=True, help="reg.json; metric PLYs are written next to it")
    s1.set_defaults(func=cmd_stage1)

    s2 = sub.add_parser("stage2", help="refine depth and colour for one target view")
    add_config(s2)
    s2.add_argument("--reg", required=True, help="reg.json written by stage1")
    s2.add_argument("--left-fine", required=True, help="left source image at the fine resolution")
    s2.add_argument("--right-fine", required=True, help="right source image at the fine resolution")
    s2.add_argument("--cams", required=True, help="rig cams.json")
    s2.add_argument("--target", type=int, required=True, help="index of the target camera in cams.json")
    s2.add_argument("--out", required=True, help="refined depth PFM; .color.png and .plane.bin are written beside it")
    s2.add_argument("--width", type=int, help="render width used for the plane footprint (default: config)")
    s2.add_argument("--height", type=int, help="render height (default: config)")
    s2.set_defaults(func=cmd_stage2)

    r = sub.add_parser("render", help="splat a Gaussian plane file into a camera")
    r.add_argument("--plane", required=True, help="plane.bin")
    r.add_argument("--cam", required=True, help="cams.json")
    r.add_argument("--view", type=int, required=True, help="camera index")
    r.add_argument("--out", required=True, help="output PNG")
    r.add_argument("--depth", help="optional output depth PFM")
    r.add_argument("--width", type=int, help="output width (default: the camera's)")
    r.add_argument("--height", type=int, help="output height (default: the camera's)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR, SSIM and Chamfer between matching frames of two directories")
    e.add_argument("--pred", required=True, type=Path, help="directory of predicted <frame>.png (+ optional .ply)")
    e.add_argument("--gt", required=True, type=Path, help="directory of reference <frame>.png (+ optional .ply)")
    e.add_argument("--out", required=True, help="report.json")
    e.add_argument("--cams", help="cams.json, to turn view_<k>.pfm depths into points when no .ply exists")
    e.set_defaults(func=cmd_eval)

    for name, func, help_text in (
        ("pipeline", cmd_pipeline, "run every stage and write artifacts plus report.json"),
        ("profile", cmd_profile, "run every stage and print per-stage wall time in ms"),
    ):
        sp = sub.add_parser(name, help=help_text)
        add_config(sp)
        sp.add_argument("--inputs", type=Path, help="scene directory from gen-scene (default: render in memory)")
        if name == "pipeline":
            sp.add_argument("--out", type=Path, required=True, help="artifact directory")
        else:
            sp.add_argument("--json", help="also write the timings to this JSON file")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads if args.threads is not None else os.cpu_count()
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
