import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from conftest import fronto_camera, textured_wall
from pmsplat.errors import EmptyGeometry
from pmsplat.gaussians import DepthMap
from pmsplat.geometry import PointMap, Space, unproject
from pmsplat.metrics import psnr
from pmsplat.refinement import (
    CostVolume,
    RefineConfig,
    WarpedSamples,
    build_cost_volume,
    fill_depth_holes,
    init_color,
    init_target_depth,
    regress_depth,
    require_joint_support,
    sample_depth_candidates,
    softmax_weights,
    warp_source_to_target,
)
from pmsplat.scenes import raycast_render

H, W = 64, 96


def flat_depth(value, valid=True, shape=(4, 5)):
    return DepthMap(np.full(shape, float(value)), np.full(shape, valid))


@pytest.fixture(scope="module")
def wall_rig():
    # sources 0.3 m either side of the target: a 16 px disparity between them at 3 m
    return fronto_camera(eye=(-0.3, 0, 0)), fronto_camera(eye=(0.3, 0, 0)), fronto_camera()


def render_wall(rig, depth, cell=0.15, seed=0):
    scene = textured_wall(depth, cell=cell, seed=seed)
    return [raycast_render(scene, cam) for cam in rig]


# --- candidates ---------------------------------------------------------------------------


def test_candidates_example():
    cands = sample_depth_candidates(flat_depth(2.0), RefineConfig(n_candidates=3, search_halfwidth=0.05))
    assert np.allclose(cands[0, 0], [1.9, 2.0, 2.1], atol=1e-12)
    assert np.all(np.diff(cands, axis=-1) > 0)


def test_two_candidates_are_the_window_ends():
    cands = sample_depth_candidates(flat_depth(4.0), RefineConfig(n_candidates=2, search_halfwidth=0.1))
    assert np.allclose(cands[2, 3], [3.6, 4.4])


def test_candidates_fall_back_to_valid_median():
    d = np.array([[1.0, 2.0, 3.0], [5.0, 7.0, 9.0]])
    valid = np.array([[True, True, True], [False, False, False]])
    cands = sample_depth_candidates(DepthMap(d, valid), RefineConfig())
    assert np.allclose(cands[1, :, 0], 0.95 * 2.0) and np.allclose(cands[1, :, -1], 1.05 * 2.0)
    with pytest.raises(EmptyGeometry):
        sample_depth_candidates(flat_depth(1.0, valid=False))


def test_refine_config_validation():
    for bad in (dict(n_candidates=1), dict(search_halfwidth=0.0), dict(softmax_temperature=-1.0)):
        with pytest.raises(ValueError):
            RefineConfig(**bad)


# --- warping ------------------------------------------------------------------------------


def test_warp_into_own_camera_is_identity():
    cam = fronto_camera(width=40, height=30)
    image = np.random.default_rng(0).random((30, 40, 3))
    cands = np.random.default_rng(1).uniform(1, 5, (30, 40, 4))
    warp = warp_source_to_target(image, cands, cam, cam)
    assert warp.valid.all()
    assert np.abs(warp.values - image[:, :, None, :]).max() <= 1e-6


def test_candidates_behind_source_are_invalid():
    target = fronto_camera(width=20, height=10)
    source = fronto_camera(width=20, height=10, eye=(0, 0, 5.0))
    warp = warp_source_to_target(np.ones((10, 20, 3)), np.full((10, 20, 2), 2.0), target, source)
    assert not warp.valid.any() and np.all(warp.values == 0)


def test_warps_agree_at_true_depth(wall_rig):
    vl, vr, vt = render_wall(wall_rig, 3.0, cell=0.1)
    d = vt.depth.depth[..., None]
    wl = warp_source_to_target(vl.image, d, wall_rig[2], wall_rig[0])
    wr = warp_source_to_target(vr.image, d, wall_rig[2], wall_rig[1])
    both = wl.valid & wr.valid
    assert both.mean() > 0.7
    assert np.abs(wl.values - wr.values)[both].max() <= 1e-3


# --- cost volume ---------------------------------------------------------------------------


def _samples(values, valid=None):
    valid = np.ones(values.shape[:-1], bool) if valid is None else valid
    return WarpedSamples(values, valid, np.ones(values.shape[:-1]))


def test_equal_warps_give_uniform_weights():
    rng = np.random.default_rng(2)
    vals = rng.random((6, 7, 5, 3))
    cands = np.sort(rng.uniform(1, 3, (6, 7, 5)), axis=-1)
    vol = build_cost_volume(_samples(vals), _samples(vals.copy()), cands)
    assert np.all(vol.cost == 0) and np.allclose(vol.weights, 0.2, atol=1e-15)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_single_zero_cost_candidate_dominates(n):
    cost = np.ones((1, 1, n))
    cost[0, 0, n // 2] = 0.0
    assert softmax_weights(cost, 0.1)[0, 0, n // 2] >= 0.999


def test_cost_symmetric_in_sources():
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 8, 9, 6, 3))
    va, vb = rng.random((2, 8, 9, 6)) > 0.1
    cands = np.sort(rng.uniform(1, 3, (8, 9, 6)), axis=-1)
    v1 = build_cost_volume(_samples(a, va), _samples(b, vb), cands)
    v2 = build_cost_volume(_samples(b, vb), _samples(a, va), cands)
    assert np.abs(v1.cost - v2.cost).max() <= 1e-12
    assert np.abs(v1.weights - v2.weights).max() <= 1e-12
    assert np.abs(regress_depth(v1).depth - regress_depth(v2).depth).max() <= 1e-12
    assert np.abs(v1.weights.sum(-1) - 1).max() <= 1e-6 and v1.weights.min() >= 0


def test_regress_depth_examples():
    cands = np.array([[[1.0, 2.0, 3.0]]])
    uniform = CostVolume(cands, np.zeros_like(cands), np.full_like(cands, 1 / 3), np.ones((1, 1), bool))
    assert regress_depth(uniform).depth[0, 0] == pytest.approx(2.0)
    onehot = CostVolume(cands, np.zeros_like(cands), np.array([[[0.0, 1.0, 0.0]]]), np.ones((1, 1), bool))
    assert regress_depth(onehot).depth[0, 0] == 2.0


@pytest.mark.parametrize("depth", [2.5, 3.0, 4.0])
def test_plane_sweep_on_textured_planes(wall_rig, depth):
    # a sharp temperature so the expectation follows the cost minimum
    cfg = RefineConfig(softmax_temperature=3e-5)
    vl, vr, vt = render_wall(wall_rig, depth, seed=int(depth * 10))
    gt = vt.depth.depth
    offsets = cfg.search_halfwidth * np.linspace(-1, 1, cfg.n_candidates)
    for k in range(cfg.n_candidates):
        # initial depth placed so that the true depth is candidate k
        cands = sample_depth_candidates(DepthMap(gt / (1 + offsets[k]), vt.depth.valid), cfg)
        wl = warp_source_to_target(vl.image, cands, wall_rig[2], wall_rig[0])
        wr = warp_source_to_target(vr.image, cands, wall_rig[2], wall_rig[1])
        wl, wr = require_joint_support(wl, wr)
        vol = build_cost_volume(wl, wr, cands, cfg)
        assert np.abs(vol.weights.sum(-1) - 1).max() <= 1e-6
        # pixels whose whole cost patch is seen by both sources
        ok = binary_erosion(wl.valid.all(-1), np.ones((3, 3)), border_value=1)
        assert ok.mean() > 0.6
        nearest = np.argmin(np.abs(cands - gt[..., None]), axis=-1)
        assert (np.argmin(vol.cost, axis=-1) == nearest)[ok].mean() >= 0.99
        spacing = cands[..., 1] - cands[..., 0]
        assert np.abs(regress_depth(vol).depth - gt)[ok].mean() <= 0.5 * spacing[ok].mean()


# --- colour --------------------------------------------------------------------------------


def test_init_color_equal_warps():
    vals = np.random.default_rng(4).random((5, 6, 1, 3))
    out = init_color(_samples(vals), _samples(vals.copy()))
    assert np.array_equal(out.color, vals[..., 0, :]) and out.valid.all()


def test_init_color_falls_back_to_right():
    rng = np.random.default_rng(5)
    a, b = rng.random((2, 5, 6, 1, 3))
    out = init_color(_samples(a, np.zeros((5, 6, 1), bool)), _samples(b))
    assert np.allclose(out.color, b[..., 0, :], atol=1e-15)
    none = init_color(_samples(a, np.zeros((5, 6, 1), bool)), _samples(b, np.zeros((5, 6, 1), bool)))
    assert not none.valid.any()


def test_init_color_on_lambertian_plane(wall_rig):
    vl, vr, vt = render_wall(wall_rig, 3.0, cell=0.1)
    d = vt.depth.depth[..., None]
    wl = warp_source_to_target(vl.image, d, wall_rig[2], wall_rig[0])
    wr = warp_source_to_target(vr.image, d, wall_rig[2], wall_rig[1])
    out = init_color(wl, wr)
    assert psnr(out.color[out.valid], vt.image[out.valid]) >= 25.0


# --- depth initialisation ----------------------------------------------------------------------


def _single_point_map(cam, point):
    pts = np.zeros((cam.height, cam.width, 3))
    valid = np.zeros((cam.height, cam.width), bool)
    v, u = int(round(cam.cy)), int(round(cam.cx))
    pts[v, u] = point
    valid[v, u] = True
    return PointMap(pts, valid, Space.METRIC), (v, u)


def test_init_depth_single_gaussian():
    cam = fronto_camera(width=31, height=21)
    pmap, (v, u) = _single_point_map(cam, unproject(np.array([cam.cx, cam.cy]), 2.0, cam))
    empty = PointMap(np.zeros_like(pmap.points), np.zeros_like(pmap.valid), Space.METRIC)
    img = np.full((21, 31, 3), 0.5)
    depth = init_target_depth(pmap, empty, img, img, cam, cam, cam)
    assert depth.valid[v, u] and abs(depth.depth[v, u] - 2.0) <= 1e-3


def test_init_depth_fronto_plane(wall_rig):
    vl, vr, _ = render_wall(wall_rig, 3.0)
    depth = init_target_depth(vl.points, vr.points, vl.image, vr.image, wall_rig[0], wall_rig[1], wall_rig[2])
    assert depth.valid.mean() > 0.8
    assert np.median(np.abs(depth.depth[depth.valid] - 3.0)) <= 0.03


def test_init_depth_empty_maps():
    cam = fronto_camera(width=20, height=10)
    empty = PointMap(np.zeros((10, 20, 3)), np.zeros((10, 20), bool), Space.METRIC)
    img = np.zeros((10, 20, 3))
    with pytest.raises(EmptyGeometry):
        init_target_depth(empty, empty, img, img, cam, cam, cam)


def test_init_depth_needs_metric_maps():
    cam = fronto_camera(width=20, height=10)
    canon = PointMap(np.zeros((10, 20, 3)), np.zeros((10, 20), bool), Space.CANONICAL)
    with pytest.raises(ValueError):
        init_target_depth(canon, canon, np.zeros((10, 20, 3)), np.zeros((10, 20, 3)), cam, cam, cam)


def test_fill_depth_holes():
    d = DepthMap(np.array([[1.0, 0.0, 0.0, 4.0]]), np.array([[True, False, False, True]]))
    filled = fill_depth_holes(d)
    assert filled.valid.all() and list(filled.depth[0]) == [1.0, 1.0, 4.0, 4.0]
    limited = fill_depth_holes(DepthMap(np.array([[1.0, 0, 0, 0]]), np.array([[True, False, False, False]])), 1.0)
    assert list(limited.valid[0]) == [True, True, False, False]
