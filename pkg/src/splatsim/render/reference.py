"""Brute-force reference renderer: per-Gaussian scalar projection, exact
depth sort, per-pixel loop over every Gaussian, no tiling, no binning.

Shares only the contracted weight function with the tiled path: the
3-sigma footprint cutoff and the 1e-4 transmittance termination (part of
the rendering contract, not a shortcut)."""

from __future__ import annotations

import numpy as np

from .. import core_math
from .common import QMAX, T_MIN
from .forward import RenderOutput


def rasterize_reference(scene, cam, channels=("color",), mask_groups=(),
                        t=None, overrides=None, bg=None):
    if t is None:
        t = cam.time
    width, height = cam.width, cam.height
    bg = scene.background.astype(np.float64) if bg is None else np.asarray(bg, dtype=np.float64)
    want_color = "color" in channels
    want_feature = "feature" in channels
    dim = scene.identity_dim

    # per-Gaussian scalar preprocessing
    mu2s, conics, depths, colors, densities, opacities, keep = [], [], [], [], [], [], []
    over = {}
    if overrides is not None:
        for j, gi in enumerate(np.asarray(overrides.indices, dtype=np.int64)):
            over[int(gi)] = (overrides.mu3[j], overrides.cov3[j])
    cam_center = cam.cam_center()
    for i in range(scene.n):
        cov4 = core_math.build_cov4(
            core_math.rot4d_from_pair(
                core_math.normalize_quat(scene.q_left[i].astype(np.float64)),
                core_math.normalize_quat(scene.q_right[i].astype(np.float64))),
            scene.log_scales[i].astype(np.float64))
        mu3, cov3, density = core_math.condition_on_time(
            scene.mu4[i].astype(np.float64), cov4, float(t))
        if i in over:
            mu3, cov3 = over[i]
            density = 1.0
        mu2, cov2, depth = core_math.project_gaussian(mu3, cov3, cam)
        if depth <= core_math.NEAR_PLANE:
            continue
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[1, 0]
        conic = np.array([[cov2[1, 1], -cov2[0, 1]], [-cov2[1, 0], cov2[0, 0]]]) / det
        vec = mu3 - cam_center
        d = vec / max(np.linalg.norm(vec), 1e-12)
        color = core_math.sh_eval(scene.sh[i].astype(np.float64), d, scene.sh_degree)
        keep.append(i)
        mu2s.append(mu2)
        conics.append(conic)
        depths.append(depth)
        colors.append(color)
        densities.append(float(density))
        opacities.append(1.0 / (1.0 + np.exp(-float(scene.opacity_logit[i]))))

    color_plane = np.tile(bg, (height, width, 1)) if want_color else None
    feature_plane = np.zeros((height, width, dim)) if want_feature else None
    alpha_plane = np.zeros((height, width))
    member = {}
    for gid in mask_groups:
        idx = scene.select_group(int(gid))
        flags = np.zeros(scene.n, dtype=bool)
        flags[idx] = True
        member[int(gid)] = flags
    masks = {gid: np.zeros((height, width)) for gid in member}
    if not keep:
        return RenderOutput(color=color_plane, feature=feature_plane,
                            alpha=alpha_plane, masks=masks)

    keep = np.array(keep)
    order = np.lexsort((keep, np.array(depths)))  # depth, ties by index
    keep = keep[order]
    mu2s = np.array(mu2s)[order]
    conics = np.array(conics)[order]
    colors = np.array(colors)[order]
    dens_op = (np.array(densities) * np.array(opacities))[order]
    ident = scene.identity.astype(np.float64)[keep]

    for row in range(height):
        for col in range(width):
            d0 = col - mu2s[:, 0]
            d1 = row - mu2s[:, 1]
            q = conics[:, 0, 0] * d0 * d0 + 2.0 * conics[:, 0, 1] * d0 * d1 \
                + conics[:, 1, 1] * d1 * d1
            w = np.where(q <= QMAX, np.exp(-0.5 * q), 0.0) * dens_op
            t_incl = np.cumprod(1.0 - w)
            t_excl = np.concatenate([[1.0], t_incl[:-1]])
            include = t_excl >= T_MIN
            w_eff = w * include
            weights = w_eff * t_excl
            t_final = np.prod(1.0 - w_eff)
            alpha_plane[row, col] = 1.0 - t_final
            if want_color:
                color_plane[row, col] = weights @ colors + t_final * bg
            if want_feature:
                feature_plane[row, col] = weights @ ident
            for gid, flags in member.items():
                sel = flags[keep]
                if sel.any():
                    masks[gid][row, col] = weights[sel].sum()

    return RenderOutput(color=color_plane, feature=feature_plane,
                        alpha=alpha_plane, masks=masks)
