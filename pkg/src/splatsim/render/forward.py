"""Tiled forward rasterizer: color, identity-feature, alpha and per-group
mask planes for one view/time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .common import Overrides, Prep, TileBins, bin_tiles, preprocess, tile_pixels, tile_weights

CHANNELS = ("color", "feature", "alpha", "masks")


@dataclass
class ForwardState:
    """Retained contributor state for the backward pass."""

    prep: Prep
    bins: TileBins
    width: int
    height: int
    bg: np.ndarray
    t: float
    overrides: Overrides | None


@dataclass
class RenderOutput:
    color: np.ndarray | None = None     # (H,W,3) in [0,1]
    feature: np.ndarray | None = None   # (H,W,D)
    alpha: np.ndarray | None = None     # (H,W)
    masks: dict = field(default_factory=dict)  # group_id -> (H,W)
    state: ForwardState | None = None


def rasterize(scene, cam, channels=("color",), mask_groups=(), retain_state=False,
              t=None, overrides=None, bg=None):
    """Rasterize one view at time t (default: the camera timestamp).

    channels: subset of {"color", "feature", "alpha", "masks"}; the alpha
    plane is always computed. mask_groups: group ids whose composited
    contribution-share planes are returned. retain_state keeps the
    contributor lists needed by the backward pass.
    """
    unknown = set(channels) - set(CHANNELS)
    if unknown:
        raise ValueError("unknown channels %r" % sorted(unknown))
    width, height = cam.width, cam.height
    bg = scene.background.astype(np.float64) if bg is None else np.asarray(bg, dtype=np.float64)
    want_color = "color" in channels
    want_feature = "feature" in channels
    mask_groups = list(mask_groups)
    member = {}
    for gid in mask_groups:
        idx = scene.select_group(int(gid))
        flags = np.zeros(scene.n, dtype=bool)
        flags[idx] = True
        member[int(gid)] = flags

    prep = preprocess(scene, cam, t=t, overrides=overrides)
    bins = bin_tiles(prep, width, height)

    color = np.tile(bg, (height, width, 1)) if want_color else None
    feature = np.zeros((height, width, scene.identity_dim)) if want_feature else None
    alpha = np.zeros((height, width))
    masks = {gid: np.zeros((height, width)) for gid in member}

    ident = scene.identity.astype(np.float64) if want_feature else None
    for ty in range(bins.tiles_y):
        for tx in range(bins.tiles_x):
            tid = ty * bins.tiles_x + tx
            cnt = bins.counts[tid]
            if cnt == 0:
                continue
            s = bins.starts[tid]
            ids = bins.gauss[s:s + cnt]
            px, ys, xs = tile_pixels(tx, ty, width, height)
            w_eff, _, weights = tile_weights(prep, ids, px)
            t_final = np.prod(1.0 - w_eff, axis=1)
            shape = (len(ys), len(xs))
            a_tile = 1.0 - t_final
            alpha[np.ix_(ys, xs)] = a_tile.reshape(shape)
            if want_color:
                c = weights @ prep.color[ids] + t_final[:, None] * bg[None, :]
                color[np.ix_(ys, xs)] = c.reshape(shape + (3,))
            if want_feature:
                f = weights @ ident[ids]
                feature[np.ix_(ys, xs)] = f.reshape(shape + (ident.shape[1],))
            for gid, flags in member.items():
                sel = flags[ids]
                if sel.any():
                    masks[gid][np.ix_(ys, xs)] = (weights[:, sel].sum(axis=1)).reshape(shape)

    state = None
    if retain_state:
        state = ForwardState(prep=prep, bins=bins, width=width, height=height,
                             bg=bg, t=prep.t, overrides=overrides)
    return RenderOutput(color=color, feature=feature, alpha=alpha, masks=masks, state=state)


def render_object_mask(scene, group_id, cam, t=None, overrides=None):
    """Composited contribution share of one group per pixel, in [0,1]."""
    scene.select_group(int(group_id))  # raises UnknownGroupError if absent
    out = rasterize(scene, cam, channels=("alpha",), mask_groups=(int(group_id),),
                    t=t, overrides=overrides)
    return out.masks[int(group_id)]
