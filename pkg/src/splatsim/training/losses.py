"""Differentiable losses used by the fitting loop.

Every loss returns its scalar value together with analytic cotangents for
the inputs it touches; nothing here relies on an autodiff framework.  All
reductions are means over the participating elements so that loss weights
stay comparable across image sizes.
"""

import numpy as np

from ..errors import DegenerateSceneError, LabelError, ShapeError
from .neighbors import knn

__all__ = [
    "mse_loss",
    "psnr",
    "semantic_ce_loss",
    "kl_consistency_loss",
    "nnfm_loss",
    "nnfm_3d_loss",
]


def mse_loss(rendered, target, pixel_mask=None):
    """Mean squared error over (optionally masked) pixels.

    rendered, target : (H, W, C) float arrays.
    pixel_mask : optional (H, W) bool; True pixels participate.

    Returns (loss, d_rendered) with d_rendered shaped like ``rendered``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    if pixel_mask is not None:
        mask = np.asarray(pixel_mask, dtype=bool)
        if mask.shape != rendered.shape[:2]:
            raise ShapeError(f"pixel_mask shape {mask.shape} != {rendered.shape[:2]}")
        diff = diff * mask[..., None]
        count = int(mask.sum()) * rendered.shape[-1]
    else:
        count = diff.size
    if count == 0:
        return 0.0, np.zeros_like(rendered)
    loss = float(np.sum(diff * diff) / count)
    return loss, (2.0 / count) * diff


def psnr(rendered, target, peak=1.0):
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    mse, _ = mse_loss(rendered, target)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def semantic_ce_loss(feature_plane, head, label_plane, pixel_mask=None):
    """Cross entropy between head logits on rendered features and pixel labels.

    feature_plane : (H, W, D) rendered identity-feature image.
    head : SemanticHead mapping D-dim features to class logits.
    label_plane : (H, W) int; -1 marks unlabeled pixels (skipped).
    pixel_mask : optional (H, W) bool restricting the labeled set further.

    Returns (loss, d_feature, d_weight, d_bias).  Gradients are zero when no
    labeled pixel participates.
    """
    feats = np.asarray(feature_plane, dtype=np.float64)
    labels = np.asarray(label_plane)
    if feats.ndim != 3:
        raise ShapeError(f"feature plane must be (H, W, D), got {feats.shape}")
    if labels.shape != feats.shape[:2]:
        raise ShapeError(f"label plane {labels.shape} != image {feats.shape[:2]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"label plane must be integer, got {labels.dtype}")
    n_classes = head.n_classes
    if n_classes == 0:
        raise LabelError("semantic head has no classes")
    if labels.max(initial=-1) >= n_classes or labels.min(initial=-1) < -1:
        raise LabelError(
            f"labels must lie in [-1, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )

    live = labels >= 0
    if pixel_mask is not None:
        live = live & np.asarray(pixel_mask, dtype=bool)
    d_feats = np.zeros_like(feats)
    weight = np.asarray(head.weight, dtype=np.float64)
    bias = np.asarray(head.bias, dtype=np.float64)
    d_weight = np.zeros_like(weight)
    d_bias = np.zeros_like(bias)
    m = int(live.sum())
    if m == 0:
        return 0.0, d_feats, d_weight, d_bias

    x = feats[live]  # (M, D)
    y = labels[live]  # (M,)
    logits = x @ weight.T + bias  # (M, C)
    logits -= logits.max(axis=1, keepdims=True)
    expz = np.exp(logits)
    probs = expz / expz.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(probs[np.arange(m), y] + 1e-300)))

    d_logits = probs.copy()
    d_logits[np.arange(m), y] -= 1.0
    d_logits /= m
    d_feats[live] = d_logits @ weight
    d_weight[...] = d_logits.T @ x
    d_bias[...] = d_logits.sum(axis=0)
    return loss, d_feats, d_weight, d_bias


def kl_consistency_loss(scene, anchors=100, k=5, rng=None):
    """Mean KL divergence from anchor class distributions to their neighbors'.

    Encourages spatially adjacent Gaussians to carry consistent semantic
    encodings.  Distributions come from a softmax over identity encodings;
    neighbors are exact k-nearest in the spatial means at the scene's
    canonical positions.  Identical encodings give exactly zero loss and
    gradient.

    Returns (loss, d_identity) with d_identity shaped (N, D) float64.
    """
    ident = np.asarray(scene.identity, dtype=np.float64)
    n, d = ident.shape
    if n <= k:
        raise DegenerateSceneError(f"KL consistency needs N > k={k}, have N={n}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n_anchor = min(anchors, n)
    anchor_idx = rng.choice(n, size=n_anchor, replace=False)
    anchor_idx.sort()

    points = np.asarray(scene.mu4[:, :3], dtype=np.float64)
    nbrs = knn(points, k, queries=anchor_idx)  # (A, k)

    z = ident - ident.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)  # (N, D)
    logp = np.log(probs + 1e-300)

    d_ident = np.zeros((n, d), dtype=np.float64)
    pi = probs[anchor_idx][:, None, :]  # (A, 1, D)
    li = logp[anchor_idx][:, None, :]
    pj = probs[nbrs]  # (A, k, D)
    lj = logp[nbrs]
    v = li - lj  # (A, k, D)
    pairs = n_anchor * k
    loss = float(np.sum(pi * v) / pairs)

    # d/dz_i sum_d p_i (logp_i - logp_j) = p_i * (v + 1) - p_i * sum(p_i (v + 1))
    # with the softmax Jacobian diag(p) - p p^T folded in; the +1 from the
    # logp_i term cancels inside the Jacobian projection.
    gi = pi * v - pi * np.sum(pi * v, axis=-1, keepdims=True)  # (A, k, D)
    gj = pj - pi  # derivative of -p_i . logp_j through softmax of z_j
    np.add.at(d_ident, np.repeat(anchor_idx, k), gi.reshape(-1, d) / pairs)
    np.add.at(d_ident, nbrs.reshape(-1), gj.reshape(-1, d) / pairs)
    return loss, d_ident


def _unit_rows(flat, eps=1e-12):
    norms = np.sqrt(np.sum(flat * flat, axis=-1))
    ok = norms > eps
    unit = np.zeros_like(flat)
    unit[ok] = flat[ok] / norms[ok, None]
    return unit, norms, ok


def nnfm_loss(rendered_features, target_features, grid_mask=None):
    """Nearest-neighbor feature matching loss (mean min cosine distance).

    rendered_features : (Gh, Gw, C) feature grid from the extractor.
    target_features : (M, C) or (Th, Tw, C) reference feature bank.
    grid_mask : optional (Gh, Gw) bool; True cells participate.

    For each participating rendered feature the loss takes the minimum
    cosine distance (1 - cosine similarity) to any target feature, then
    averages.  Zero-norm vectors on either side contribute distance 1 and
    zero gradient.  Returns (loss, d_rendered_features).
    """
    feats = np.asarray(rendered_features, dtype=np.float64)
    targets = np.asarray(target_features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"rendered features must be (Gh, Gw, C), got {feats.shape}")
    tflat = targets.reshape(-1, targets.shape[-1])
    if tflat.shape[-1] != feats.shape[-1]:
        raise ShapeError(
            f"channel mismatch: rendered {feats.shape[-1]} vs target {tflat.shape[-1]}"
        )
    if len(tflat) == 0:
        raise ShapeError("target feature bank is empty")

    gh, gw, c = feats.shape
    flat = feats.reshape(-1, c)
    if grid_mask is not None:
        mask = np.asarray(grid_mask, dtype=bool)
        if mask.shape != (gh, gw):
            raise ShapeError(f"grid_mask shape {mask.shape} != {(gh, gw)}")
        sel = np.flatnonzero(mask.reshape(-1))
    else:
        sel = np.arange(gh * gw)
    d_feats = np.zeros_like(feats)
    if len(sel) == 0:
        return 0.0, d_feats

    u, unorm, uok = _unit_rows(flat[sel])
    v, _, _ = _unit_rows(tflat)  # zero-norm targets contribute similarity 0
    sims = u @ v.T  # (S, M)
    best = np.argmax(sims, axis=1)
    best_sim = sims[np.arange(len(sel)), best]
    loss = float(np.mean(1.0 - best_sim))

    # d(1 - u.v)/df = -(v - (u.v) u) / |f|, zero for zero-norm rendered rows.
    vb = v[best]
    grad = -(vb - best_sim[:, None] * u)
    grad[uok] /= unorm[uok, None]
    grad[~uok] = 0.0
    grad /= len(sel)
    d_flat = d_feats.reshape(-1, c)
    d_flat[sel] = grad
    return loss, d_feats


def nnfm_3d_loss(scene, cam, group_id, target_bank, gt_image, extractor,
                 weights=(1.0, 1.0), mask_threshold=0.5):
    """Object-masked NNFM on a rendered view plus MSE outside the mask.

    Renders the scene from `cam`, matches extractor features of grid cells
    inside the object's rendered mask against `target_bank` (flat or
    gridded reference features), and regularizes pixels outside the mask
    toward `gt_image`.  The pullback is restricted to the SH block.

    Returns (total, parts, bundle) where parts carries the individual
    terms and the pixel mask, and bundle holds SH gradients for the whole
    scene (caller masks rows as needed).
    """
    from ..render import Cotangents, backward, rasterize

    gid = int(group_id)
    out = rasterize(scene, cam, channels=("color",), mask_groups=(gid,),
                    retain_state=True)
    mask = out.masks[gid] > mask_threshold
    fmap, ctx = extractor.extract(out.color)
    grid_mask = extractor.grid_mask(mask)
    l_in, d_feats = nnfm_loss(fmap.values, target_bank, grid_mask)
    d_img_in = extractor.vjp(ctx, d_feats)
    l_out, d_img_out = mse_loss(out.color, gt_image, pixel_mask=~mask)
    w_in, w_out = weights
    cot = Cotangents(d_color=w_in * d_img_in + w_out * d_img_out)
    bundle = backward(scene, cam, cot, param_mask=("sh",), state=out.state)
    total = w_in * l_in + w_out * l_out
    return total, {"nnfm": l_in, "mse_out": l_out, "mask": mask}, bundle
