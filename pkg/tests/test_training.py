"""Losses (with finite-difference gradient checks and hand oracles), the
Adam optimizer against an independent reference, KNN, the patch feature
extractor's exact VJP, and the fitting loop's contracts."""

import numpy as np
import pytest

from splatsim.errors import DegenerateSceneError, GradientError, ShapeError
from splatsim.scene import SceneModel
from splatsim.synth import editing_scene, fit_benchmark, perturb_scene
from splatsim.training import (
    AdamState,
    FitConfig,
    LossWeights,
    PatchPyramidExtractor,
    adam_step,
    default_lr_table,
    fit,
    kl_consistency_loss,
    knn,
    migrate_state,
    mse_loss,
    nnfm_loss,
    psnr,
    semantic_ce_loss,
    write_trace_csv,
)
from splatsim.training.fit import TRACE_FIELDS


# -- MSE and PSNR -------------------------------------------------------------------


def test_mse_loss_value_and_gradient():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (6, 7, 3))
    b = rng.uniform(0, 1, (6, 7, 3))
    loss, grad = mse_loss(a, b)
    assert loss == pytest.approx(np.mean((a - b) ** 2))
    # analytic grad: 2 (a - b) / count
    assert np.abs(grad - 2.0 * (a - b) / a.size).max() < 1e-15


def test_mse_loss_respects_pixel_mask():
    a = np.zeros((4, 4, 3))
    b = np.ones((4, 4, 3))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    loss, grad = mse_loss(a, b, pixel_mask=mask)
    assert loss == pytest.approx(1.0)  # only the masked pixel counts
    assert np.abs(grad[~mask]).max() == 0.0


def test_psnr_known_values():
    a = np.zeros((2, 2, 3))
    assert psnr(a, a) == np.inf
    b = np.full_like(a, 0.1)  # mse = 0.01 -> 20 dB
    assert psnr(a, b) == pytest.approx(20.0)


# -- semantic cross entropy ------------------------------------------------------


def make_head(classes, dim, seed=0):
    from splatsim.scene import SemanticHead
    rng = np.random.default_rng(seed)
    return SemanticHead(rng.normal(0, 0.5, (classes, dim)).astype(np.float32),
                        rng.normal(0, 0.1, classes).astype(np.float32))


def test_semantic_ce_ignores_unlabeled():
    head = make_head(3, 4)
    feats = np.random.default_rng(1).normal(size=(5, 5, 4))
    labels = np.full((5, 5), -1, dtype=np.int32)
    loss, d_feat, d_w, d_b = semantic_ce_loss(feats, head, labels)
    assert loss == 0.0
    assert np.abs(d_feat).max() == 0.0 and np.abs(d_w).max() == 0.0


def test_semantic_ce_gradients_match_fd():
    rng = np.random.default_rng(2)
    head = make_head(3, 4)
    feats = rng.normal(size=(4, 4, 4))
    labels = rng.integers(-1, 3, size=(4, 4)).astype(np.int32)
    loss, d_feat, d_w, d_b = semantic_ce_loss(feats, head, labels)
    h = 1e-6
    for i in range(3):  # a few feature coordinates
        f2 = feats.copy()
        f2[1, i, 2] += h
        lp, *_ = semantic_ce_loss(f2, head, labels)
        f2[1, i, 2] -= 2 * h
        lm, *_ = semantic_ce_loss(f2, head, labels)
        assert (lp - lm) / (2 * h) == pytest.approx(d_feat[1, i, 2], abs=1e-6)
    wp = make_head(3, 4)
    wp.weight = head.weight.copy()
    wp.bias = head.bias.copy()
    wp.weight = wp.weight.astype(np.float64)
    wp.weight[1, 2] += h
    lp, *_ = semantic_ce_loss(feats, wp, labels)
    wp.weight[1, 2] -= 2 * h
    lm, *_ = semantic_ce_loss(feats, wp, labels)
    assert (lp - lm) / (2 * h) == pytest.approx(d_w[1, 2], abs=1e-6)


def test_semantic_ce_perfect_prediction_small_loss():
    from splatsim.scene import SemanticHead
    head = SemanticHead((np.eye(3) * 50.0).astype(np.float32),
                        np.zeros(3, dtype=np.float32))
    feats = np.zeros((2, 3, 3))
    feats[:, :, 0] = 1.0
    labels = np.zeros((2, 3), dtype=np.int32)
    loss, *_ = semantic_ce_loss(feats, head, labels)
    assert loss < 1e-8


# -- 3D consistency ---------------------------------------------------------------


def consistency_scene(n=40, dim=6, seed=3):
    rng = np.random.default_rng(seed)
    scene = SceneModel.empty(sh_degree=0, identity_dim=dim)
    block = scene.spawn_near(((-1, -1, -1), (1, 1, 1)), n, seed=seed)
    block["identity"] = rng.normal(0, 1.0, (n, dim)).astype(np.float32)
    scene.insert_gaussians(block, "blob")
    return scene


def test_kl_consistency_zero_for_equal_encodings():
    scene = consistency_scene()
    scene.identity[:] = scene.identity[0]
    loss, grad = kl_consistency_loss(scene, anchors=20, k=4,
                                     rng=np.random.default_rng(0))
    assert loss == 0.0
    assert np.abs(grad).max() == 0.0


def test_kl_consistency_gradient_matches_fd():
    scene = consistency_scene(n=25, dim=4)
    rng_seed = 7
    loss, grad = kl_consistency_loss(scene, anchors=10, k=3,
                                     rng=np.random.default_rng(rng_seed))
    assert loss > 0.0
    h = 1e-5
    for row, col in [(0, 0), (5, 2), (12, 3)]:
        orig = scene.identity[row, col]
        scene.identity[row, col] = orig + h
        lp, _ = kl_consistency_loss(scene, anchors=10, k=3,
                                    rng=np.random.default_rng(rng_seed))
        scene.identity[row, col] = orig - h
        lm, _ = kl_consistency_loss(scene, anchors=10, k=3,
                                    rng=np.random.default_rng(rng_seed))
        scene.identity[row, col] = orig
        # divide by the realized float32 step, not the nominal 2h
        hi = np.float64(np.float32(orig + h))
        lo = np.float64(np.float32(orig - h))
        fd = (lp - lm) / (hi - lo)
        assert fd == pytest.approx(grad[row, col], rel=1e-3, abs=1e-7)


def test_kl_consistency_needs_enough_points():
    scene = consistency_scene(n=4)
    with pytest.raises(DegenerateSceneError):
        kl_consistency_loss(scene, anchors=4, k=5)


# -- KNN ------------------------------------------------------------------------


def test_knn_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-2, 2, (80, 3))
    k = 6
    got = knn(pts, k)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    for i in range(len(pts)):
        order = np.lexsort((np.arange(len(pts)), d2[i]))[:k]
        assert np.array_equal(np.sort(got[i]), np.sort(order))


def test_knn_subset_queries_and_self_exclusion():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3.5, 0, 0]], dtype=float)
    got = knn(pts, 2, queries=np.array([0]))
    assert got.shape == (1, 2)
    assert 0 not in got[0]
    assert np.array_equal(got[0], [1, 2])


def test_knn_duplicate_points_tie_by_index():
    pts = np.zeros((5, 3))
    got = knn(pts, 3, queries=np.array([2]))
    assert np.array_equal(got[0], [0, 1, 3])


# -- NNFM ----------------------------------------------------------------------


def test_nnfm_identical_features_zero():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(3, 4, 8))
    loss, grad = nnfm_loss(feats, feats.reshape(-1, 8))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_nnfm_orthogonal_features_distance_one():
    feats = np.zeros((1, 2, 4))
    feats[0, 0, 0] = 1.0
    feats[0, 1, 1] = 1.0
    bank = np.zeros((1, 4))
    bank[0, 2] = 1.0
    loss, grad = nnfm_loss(feats, bank)
    assert loss == pytest.approx(1.0)


def test_nnfm_zero_norm_rows_pinned():
    feats = np.zeros((1, 2, 3))
    feats[0, 1] = [1.0, 0.0, 0.0]
    bank = np.array([[1.0, 0.0, 0.0]])
    loss, grad = nnfm_loss(feats, bank)
    # cell 0 has zero norm: distance pinned at 1, gradient exactly 0
    assert loss == pytest.approx(0.5)
    assert np.abs(grad[0, 0]).max() == 0.0


def test_nnfm_gradient_matches_fd():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(2, 3, 5))
    bank = rng.normal(size=(7, 5))
    loss, grad = nnfm_loss(feats, bank)
    h = 1e-7
    for idx in [(0, 0, 0), (1, 2, 3), (0, 2, 4)]:
        f2 = feats.copy()
        f2[idx] += h
        lp, _ = nnfm_loss(f2, bank)
        f2[idx] -= 2 * h
        lm, _ = nnfm_loss(f2, bank)
        assert (lp - lm) / (2 * h) == pytest.approx(grad[idx], rel=1e-4, abs=1e-9)


def test_nnfm_grid_mask_restricts():
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(2, 2, 4))
    bank = rng.normal(size=(3, 4))
    mask = np.array([[True, False], [False, False]])
    loss, grad = nnfm_loss(feats, bank, grid_mask=mask)
    assert np.abs(grad[~mask]).max() == 0.0


def test_nnfm_shape_errors():
    with pytest.raises(ShapeError):
        nnfm_loss(np.zeros((2, 2)), np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        nnfm_loss(np.zeros((2, 2, 4)), np.zeros((0, 4)))


# -- patch feature extractor -------------------------------------------------------


def test_extractor_vjp_is_exact_adjoint():
    rng = np.random.default_rng(8)
    ex = PatchPyramidExtractor()
    img = rng.uniform(0, 1, (20, 24, 3))
    fmap, ctx = ex.extract(img)
    d_feats = rng.normal(size=fmap.values.shape)
    d_img = ex.vjp(ctx, d_feats)
    dx = rng.normal(size=img.shape)
    h = 1e-6
    f_plus, _ = ex.extract(img + h * dx)
    f_minus, _ = ex.extract(img - h * dx)
    jvp = (f_plus.values - f_minus.values) / (2 * h)
    lhs = float((jvp * d_feats).sum())     # cot . (J dx)
    rhs = float((d_img * dx).sum())        # (J^T cot) . dx
    assert lhs == pytest.approx(rhs, rel=1e-5)


def test_extractor_grid_mask_center_block_rule():
    ex = PatchPyramidExtractor()
    mask = np.zeros((20, 24), dtype=bool)
    mask[:, :] = True
    g = ex.grid_mask(mask)
    ii, jj = ex.grid_centers((20, 24))
    assert g.shape == (len(ii), len(jj))
    assert g.all()
    mask[8, 8] = False  # break one full-res pixel under a grid center
    g2 = ex.grid_mask(mask)
    assert g2.sum() == g.sum() - 1


def test_extractor_rejects_bad_shapes():
    ex = PatchPyramidExtractor()
    with pytest.raises(ShapeError):
        ex.extract(np.zeros((19, 24, 3)))
    with pytest.raises(ShapeError):
        ex.extract(np.zeros((16, 16, 3)))


# -- Adam ----------------------------------------------------------------------


def reference_adam(p0, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """Textbook Adam with bias correction, float64 throughout."""
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        mhat = m / (1 - betas[0] ** t)
        vhat = v / (1 - betas[1] ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adam_matches_reference_implementation():
    rng = np.random.default_rng(9)
    p0 = rng.normal(size=(6, 3)).astype(np.float64)
    grads = [rng.normal(size=(6, 3)) for _ in range(7)]
    params = {"w": p0.copy()}
    state = AdamState()
    for g in grads:
        adam_step(params, {"w": g}, state, {"w": 0.01})
    expect = reference_adam(p0, grads, 0.01)
    assert np.abs(params["w"] - expect).max() < 1e-12


def test_adam_row_mask_and_skip():
    rng = np.random.default_rng(10)
    p0 = rng.normal(size=(4, 2))
    params = {"a": p0.copy(), "b": p0.copy()}
    state = AdamState()
    rows = np.array([True, False, True, False])
    g = rng.normal(size=(4, 2))
    adam_step(params, {"a": g, "b": g}, state,
              {"a": 0.1, "b": 0.1}, row_masks={"a": rows, "b": False})
    assert np.array_equal(params["b"], p0)           # skipped block untouched
    assert np.array_equal(params["a"][~rows], p0[~rows])
    assert np.abs(params["a"][rows] - p0[rows]).max() > 0


def test_adam_rejects_nonfinite_gradient():
    params = {"w": np.zeros(3)}
    with pytest.raises(GradientError):
        adam_step(params, {"w": np.array([1.0, np.nan, 0.0])}, AdamState(),
                  {"w": 0.1})


def test_adam_missing_grad_skips_block():
    params = {"w": np.ones(3)}
    state = AdamState()
    adam_step(params, {}, state, {"w": 0.1})
    assert np.array_equal(params["w"], np.ones(3))


def test_migrate_state_carries_moments():
    state = AdamState()
    params = {"mu4": np.zeros((4, 4))}
    g = np.arange(16, dtype=np.float64).reshape(4, 4)
    adam_step(params, {"mu4": g}, state, {"mu4": 0.01})
    carry = np.array([2, 0, 1, 1])  # two survivors then clones of row 1
    migrate_state(state, carry, kept=2)
    assert state.m["mu4"].shape == (4, 4)
    assert np.array_equal(state.m["mu4"][0], (1 - 0.9) * g[2])
    assert np.abs(state.m["mu4"][2:]).max() == 0.0  # fresh rows reset


# -- fit loop -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_fit_problem():
    gt, views = fit_benchmark(seed=6, n_gaussians=12, n_views=4,
                              image_size=(32, 32))
    return gt, views


def test_fit_deterministic(small_fit_problem):
    gt, views = small_fit_problem
    cfg = FitConfig(iterations=40, seed=5, probe_view=None)
    w = LossWeights(render=1.0, semantic=0.0, consistency=0.0)
    a = perturb_scene(gt, seed=1)
    b = perturb_scene(gt, seed=1)
    ra = fit(a, views[:-1], cfg, w)
    rb = fit(b, views[:-1], cfg, w)
    assert a.equal_blocks(b)
    assert [r["loss_total"] for r in ra.trace] == [r["loss_total"] for r in rb.trace]


def test_fit_pure_mse_monotone_over_windows(small_fit_problem):
    gt, views = small_fit_problem
    scene = perturb_scene(gt, seed=2)
    cfg = FitConfig(iterations=300, seed=5, probe_view=None)
    res = fit(scene, views[:-1], cfg,
              LossWeights(render=1.0, semantic=0.0, consistency=0.0))
    losses = np.array([r["loss_total"] for r in res.trace])
    win = losses[: len(losses) // 100 * 100].reshape(-1, 100).mean(axis=1)
    assert np.all(np.diff(win) < 0)
    assert len(res.trace) == 300  # one row per iteration


def test_fit_identity_only_leaves_other_blocks_bit_identical(small_fit_problem):
    gt, views = small_fit_problem
    scene = gt.copy()
    before = {k: v.copy() for k, v in scene.blocks().items()}
    cfg = FitConfig(iterations=25, seed=5, param_blocks=("identity",),
                    probe_view=None)
    fit(scene, views[:-1], cfg, LossWeights(render=0.0, semantic=1.0,
                                            consistency=1.0))
    for name, arr in scene.blocks().items():
        if name == "identity":
            continue
        assert np.array_equal(arr, before[name]), name


def test_fit_row_mask_freezes_rows(small_fit_problem):
    gt, views = small_fit_problem
    scene = perturb_scene(gt, seed=3)
    frozen = np.zeros(scene.n, dtype=bool)
    frozen[: scene.n // 2] = True
    before = scene.mu4.copy()
    cfg = FitConfig(iterations=20, seed=5, row_mask=~frozen, probe_view=None)
    fit(scene, views[:-1], cfg,
        LossWeights(render=1.0, semantic=0.0, consistency=0.0))
    assert np.array_equal(scene.mu4[frozen], before[frozen])
    assert not np.array_equal(scene.mu4[~frozen], before[~frozen])


def test_trace_csv_round_trip(tmp_path, small_fit_problem):
    gt, views = small_fit_problem
    scene = perturb_scene(gt, seed=4)
    cfg = FitConfig(iterations=10, seed=5, probe_view=0, probe_every=5)
    res = fit(scene, views[:-1], cfg,
              LossWeights(render=1.0, semantic=0.0, consistency=0.0))
    path = tmp_path / "trace.csv"
    write_trace_csv(res.trace, path)
    import csv
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert list(rows[0].keys()) == list(TRACE_FIELDS)
    assert float(rows[0]["loss_total"]) == pytest.approx(res.trace[0]["loss_total"])
