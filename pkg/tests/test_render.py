"""Forward rasterizer: hand-computed compositing oracles, agreement between
the tiled path and the brute-force reference, and the cutoff/termination
contract."""

import numpy as np
import pytest

from splatsim.core_math import SH_C0, Camera
from splatsim.render import QMAX, T_MIN, rasterize, rasterize_reference
from splatsim.render.common import Overrides
from splatsim.scene import TIME_FLAT_LOG_SCALE, SceneModel
from splatsim.synth import editing_scene, random_scene

CHANNELS = ("color", "feature", "alpha")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def facing_camera(width=32, height=32, fx=100.0):
    return Camera(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
                  width=width, height=height)  # at origin, looking +z


def single_gaussian_scene(z=2.0, opacity_logit=1.0, dc=0.3, scale=0.05,
                          identity_dim=4):
    scene = SceneModel.empty(sh_degree=0, identity_dim=identity_dim)
    block = {
        "mu4": np.array([[0.0, 0.0, z, 0.5]], dtype=np.float32),
        "q_left": np.array([[1.0, 0, 0, 0]], dtype=np.float32),
        "q_right": np.array([[1.0, 0, 0, 0]], dtype=np.float32),
        "log_scales": np.array([[np.log(scale)] * 3 + [TIME_FLAT_LOG_SCALE]],
                               dtype=np.float32),
        "opacity_logit": np.array([opacity_logit], dtype=np.float32),
        "sh": np.full((1, 1, 3), dc, dtype=np.float32),
        "identity": np.arange(identity_dim, dtype=np.float32)[None] + 1.0,
    }
    scene.insert_gaussians(block, "dot")
    scene.background = np.zeros(3, dtype=np.float32)
    return scene


def stack_scene(zs, opacity_logits, dcs):
    """Gaussians stacked along the optical axis, one per entry."""
    n = len(zs)
    scene = SceneModel.empty(sh_degree=0, identity_dim=4)
    block = {
        "mu4": np.array([[0.0, 0.0, z, 0.5] for z in zs], dtype=np.float32),
        "q_left": np.tile(np.float32([1, 0, 0, 0]), (n, 1)),
        "q_right": np.tile(np.float32([1, 0, 0, 0]), (n, 1)),
        "log_scales": np.tile(
            np.float32([np.log(0.05)] * 3 + [TIME_FLAT_LOG_SCALE]), (n, 1)),
        "opacity_logit": np.asarray(opacity_logits, dtype=np.float32),
        "sh": np.asarray(dcs, dtype=np.float32).reshape(n, 1, 3),
        "identity": np.eye(4, dtype=np.float32)[:n % 5] if n < 5 else
        np.ones((n, 4), dtype=np.float32),
    }
    block["identity"] = np.ones((n, 4), dtype=np.float32)
    scene.insert_gaussians(block, "stack")
    scene.background = np.zeros(3, dtype=np.float32)
    return scene


# -- analytic single-contributor oracle -------------------------------------------


def test_center_pixel_weight_is_sigmoid_opacity():
    # on the central pixel the Mahalanobis term is 0, the scene is
    # time-flat, so the composited weight is exactly sigmoid(logit)
    cam = facing_camera(33, 33)  # odd size: integer center pixel
    logit = 0.7
    scene = single_gaussian_scene(opacity_logit=logit, dc=0.3)
    out = rasterize(scene, cam, channels=CHANNELS)
    w = sigmoid(np.float64(np.float32(logit)))  # parameters live in float32
    cy, cx = 16, 16
    assert out.alpha[cy, cx] == pytest.approx(w, abs=1e-12)
    color = np.clip(SH_C0 * np.float64(np.float32(0.3)) + 0.5, 0.0, 1.0)
    assert np.abs(out.color[cy, cx] - color * w).max() < 1e-12
    assert np.abs(out.feature[cy, cx] - scene.identity[0] * w).max() < 1e-9


def test_background_fills_unclaimed_transmittance():
    cam = facing_camera(33, 33)
    scene = single_gaussian_scene(opacity_logit=0.0, dc=0.3)
    bg = np.array([0.2, 0.4, 0.6])
    out = rasterize(scene, cam, channels=("color", "alpha"), bg=bg)
    cy, cx = 16, 16
    w = 0.5
    color = np.clip(SH_C0 * np.float64(np.float32(0.3)) + 0.5, 0.0, 1.0)
    expect = color * w + bg * (1.0 - w)
    assert np.abs(out.color[cy, cx] - expect).max() < 1e-12
    # far corner: no contributor, pure background
    assert np.abs(out.color[0, 0] - bg).max() == 0.0
    assert out.alpha[0, 0] == 0.0


def test_two_gaussian_compositing_front_to_back():
    # front weight 0.6, back weight 0.4: textbook over-compositing
    l_front = np.log(0.6 / 0.4)   # sigmoid -> 0.6
    l_back = np.log(0.4 / 0.6)    # sigmoid -> 0.4
    scene = stack_scene([1.5, 3.0], [l_front, l_back],
                        [[0.4, 0.0, 0.0], [0.0, 0.4, 0.0]])
    cam = facing_camera(33, 33)
    out = rasterize(scene, cam, channels=("color", "alpha"))
    cy, cx = 16, 16
    c1 = np.clip(SH_C0 * np.array([0.4, 0, 0]) + 0.5, 0, 1)
    c2 = np.clip(SH_C0 * np.array([0, 0.4, 0]) + 0.5, 0, 1)
    expect = c1 * 0.6 + c2 * 0.4 * (1.0 - 0.6)
    assert out.alpha[cy, cx] == pytest.approx(1 - 0.4 * 0.6, abs=1e-9)
    assert np.abs(out.color[cy, cx] - expect).max() < 1e-9


def test_depth_order_not_insertion_order():
    # same scene with rows swapped renders identically
    a = stack_scene([1.5, 3.0], [1.0, 1.0], [[0.4, 0, 0], [0, 0.4, 0]])
    b = stack_scene([3.0, 1.5], [1.0, 1.0], [[0, 0.4, 0], [0.4, 0, 0]])
    cam = facing_camera()
    oa = rasterize(a, cam, channels=("color",))
    ob = rasterize(b, cam, channels=("color",))
    assert np.abs(oa.color - ob.color).max() == 0.0


def test_footprint_cutoff_is_hard_zero():
    cam = facing_camera(64, 64)
    scene = single_gaussian_scene(z=2.0, scale=0.02, opacity_logit=4.0)
    out = rasterize(scene, cam, channels=("alpha",))
    # projected variance: (fx s / z)^2 plus the pixel floor
    from splatsim.core_math import COV2_FLOOR
    sigma_px = np.hypot(100.0 * 0.02 / 2.0, np.sqrt(COV2_FLOOR))
    ys, xs = np.nonzero(out.alpha)
    assert len(xs) > 0
    r = np.hypot(xs - 31.5, ys - 31.5) / sigma_px
    assert r.max() <= np.sqrt(QMAX) * 1.01
    # pixels just inside the cutoff are nonzero
    assert out.alpha[32, 32] > 0


def test_transmittance_termination_add_then_stop():
    # many near-opaque layers: once transmittance before a contributor
    # drops under T_MIN it no longer contributes
    n = 12
    zs = np.linspace(1.0, 4.0, n)
    scene = stack_scene(list(zs), [6.0] * n, [[0.4, 0, 0]] * n)
    cam = facing_camera(33, 33)
    out = rasterize(scene, cam, channels=("alpha",))
    a = out.alpha[16, 16]
    w = sigmoid(6.0)
    # transmittance after k layers: (1-w)^k; contributors stop once < T_MIN
    k_stop = int(np.ceil(np.log(T_MIN) / np.log(1 - w)))
    expect = 1.0 - (1.0 - w) ** k_stop
    assert a == pytest.approx(expect, abs=1e-12)
    assert a < 1.0  # never exactly saturates


def test_time_conditioning_scales_weight():
    scene = single_gaussian_scene(opacity_logit=2.0)
    scene.log_scales[0, 3] = np.float32(np.log(0.25))  # sigma_t = 0.25
    scene.mu4[0, 3] = 0.5
    cam = facing_camera(33, 33)
    w0 = rasterize(scene, cam, channels=("alpha",), t=0.5).alpha[16, 16]
    w1 = rasterize(scene, cam, channels=("alpha",), t=0.75).alpha[16, 16]
    # one temporal sigma away: density exp(-1/2)
    assert w1 / w0 == pytest.approx(np.exp(-0.5), rel=1e-6)


def test_default_time_is_camera_timestamp():
    scene = single_gaussian_scene()
    scene.log_scales[0, 3] = np.float32(np.log(0.25))
    cam = facing_camera(33, 33)
    cam.time = 0.75
    a = rasterize(scene, cam, channels=("alpha",)).alpha
    b = rasterize(scene, cam, channels=("alpha",), t=0.75).alpha
    assert np.array_equal(a, b)


# -- masks -------------------------------------------------------------------------


def test_masks_partition_alpha():
    scene, _ = editing_scene(n_views=2)
    cam = scene.cameras[0] if scene.cameras else None
    from splatsim.synth import ring_cameras
    cam = ring_cameras((0, 0, 0), 1.45, 3)[1]
    gids = sorted(scene.groups)
    out = rasterize(scene, cam, channels=("alpha",), mask_groups=gids)
    total = sum(out.masks[g] for g in gids)
    assert np.abs(total - out.alpha).max() < 1e-9
    for g in gids:
        assert out.masks[g].min() >= 0.0


def test_mask_of_single_group_matches_its_contribution():
    scene = stack_scene([1.5, 3.0], [1.0, 1.0], [[0.4, 0, 0], [0, 0.4, 0]])
    # split rows into two groups
    g0 = scene.groups[0]
    g0.indices = np.array([0])
    from splatsim.scene import Group
    scene.groups[1] = Group(1, "back", g0.class_id, {}, np.array([1]))
    scene.next_group_id = 2
    cam = facing_camera(33, 33)
    out = rasterize(scene, cam, channels=("alpha",), mask_groups=[0, 1])
    w = sigmoid(1.0)
    assert out.masks[0][16, 16] == pytest.approx(w, abs=1e-12)
    assert out.masks[1][16, 16] == pytest.approx(w * (1 - w), abs=1e-12)


# -- overrides ----------------------------------------------------------------------


def test_overrides_match_explicitly_moved_scene():
    scene = single_gaussian_scene(z=2.0)
    cam = facing_camera()
    mu3, cov3, _ = scene.condition(0.5)
    shift = np.array([0.08, -0.03, 0.1])
    over = Overrides(indices=np.array([0]), mu3=mu3 + shift, cov3=cov3)
    a = rasterize(scene, cam, channels=("color",), overrides=over)

    moved = scene.copy()
    moved.mu4[0, :3] += shift.astype(np.float32)
    b = rasterize(moved, cam, channels=("color",))
    assert np.abs(a.color - b.color).max() < 1e-7


# -- tiled vs reference ----------------------------------------------------------


@pytest.mark.parametrize("seed", range(8))
def test_tiled_matches_reference(seed):
    scene, cam = random_scene(seed, n=200)
    gids = sorted(scene.groups)
    a = rasterize(scene, cam, channels=CHANNELS, mask_groups=gids)
    b = rasterize_reference(scene, cam, channels=CHANNELS, mask_groups=gids)
    assert np.abs(a.color - b.color).max() <= 1e-5
    assert np.abs(a.alpha - b.alpha).max() <= 1e-5
    assert np.abs(a.feature - b.feature).max() <= 1e-5
    for g in gids:
        assert np.abs(a.masks[g] - b.masks[g]).max() <= 1e-5


def test_render_deterministic():
    scene, cam = random_scene(31, n=150)
    a = rasterize(scene, cam, channels=CHANNELS)
    b = rasterize(scene, cam, channels=CHANNELS)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.feature, b.feature)


def test_empty_scene_renders_background():
    scene = SceneModel.empty()
    scene.background = np.array([0.3, 0.2, 0.1], dtype=np.float32)
    cam = facing_camera()
    out = rasterize(scene, cam, channels=("color", "alpha"))
    assert np.abs(out.color - np.float64(scene.background)).max() == 0.0
    assert out.alpha.max() == 0.0


def test_unknown_channel_rejected():
    scene = SceneModel.empty()
    with pytest.raises(ValueError):
        rasterize(scene, facing_camera(), channels=("depth",))
