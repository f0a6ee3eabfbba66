"""Patch-pyramid feature extractor for appearance matching.

Features are raw 5x5 RGB patches taken at two pyramid levels (full
resolution and one 2x average-pooled level), each mean-centered and
L2-normalized, concatenated to a 150-channel descriptor.  Descriptors sit
on a stride-2 grid in pooled coordinates so both levels share centers.
The extractor is deliberately training-free: it only has to expose local
texture statistics, and it ships an exact manual VJP so rendered images
can be optimized through it.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

__all__ = ["PatchPyramidExtractor", "FeatureMap"]

PATCH = 5
HALF = PATCH // 2
CHANNELS_PER_LEVEL = PATCH * PATCH * 3
EPS_NORM = 1e-12


class FeatureMap:
    """A (Gh, Gw, C) feature grid plus the image geometry it came from."""

    def __init__(self, values, image_shape):
        self.values = np.asarray(values, dtype=np.float64)
        self.image_shape = tuple(image_shape)

    @property
    def channels(self):
        return self.values.shape[-1]

    @property
    def grid_shape(self):
        return self.values.shape[:2]


def _center_normalize(patches):
    """Mean-center and unit-normalize flattened patches; returns vjp context."""
    means = patches.mean(axis=-1, keepdims=True)
    centered = patches - means
    norms = np.sqrt(np.sum(centered * centered, axis=-1, keepdims=True))
    ok = norms[..., 0] > EPS_NORM
    unit = np.zeros_like(centered)
    unit[ok] = centered[ok] / norms[ok]
    return unit, (unit, norms, ok)


def _center_normalize_vjp(ctx, d_unit):
    unit, norms, ok = ctx
    d_centered = np.zeros_like(d_unit)
    dot = np.sum(unit * d_unit, axis=-1, keepdims=True)
    d_centered[ok] = (d_unit[ok] - dot[ok] * unit[ok]) / norms[ok]
    return d_centered - d_centered.mean(axis=-1, keepdims=True)


class PatchPyramidExtractor:
    """Two-level 5x5 patch descriptor bank with an exact VJP.

    extract() maps an (H, W, 3) image to a FeatureMap on the shared coarse
    grid; vjp() pulls a cotangent on the features back to the image.  H and
    W must be even and at least 18 so both levels fit at least one patch.
    """

    channels = 2 * CHANNELS_PER_LEVEL

    def _check(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
        h, w = image.shape[:2]
        if h % 2 or w % 2:
            raise ShapeError(f"image sides must be even, got {h}x{w}")
        if h < 18 or w < 18:
            raise ShapeError(f"image must be at least 18x18, got {h}x{w}")
        return image

    def grid_centers(self, image_shape):
        """Pooled-level center coordinates (i, j) of each grid cell."""
        h2, w2 = image_shape[0] // 2, image_shape[1] // 2
        ii = np.arange(HALF, h2 - HALF)
        jj = np.arange(HALF, w2 - HALF)
        return ii, jj

    def grid_mask(self, pixel_mask):
        """Downsample an (H, W) bool mask to the feature grid.

        A grid cell is inside the mask iff its center pixel block (the 2x2
        full-resolution block under the pooled center) is fully masked.
        """
        mask = np.asarray(pixel_mask, dtype=bool)
        ii, jj = self.grid_centers(mask.shape)
        blocks = mask[::2, ::2] & mask[1::2, ::2] & mask[::2, 1::2] & mask[1::2, 1::2]
        return blocks[np.ix_(ii, jj)]

    def extract(self, image):
        """Returns (FeatureMap, ctx); pass ctx back to vjp()."""
        image = self._check(image)
        h, w = image.shape[:2]
        pooled = 0.25 * (
            image[::2, ::2] + image[1::2, ::2] + image[::2, 1::2] + image[1::2, 1::2]
        )
        ii, jj = self.grid_centers(image.shape)

        # Level 1: 5x5 patches on the pooled image, centers (i, j).
        win1 = sliding_window_view(pooled, (PATCH, PATCH), axis=(0, 1))
        p1 = win1[np.ix_(ii - HALF, jj - HALF)].reshape(len(ii), len(jj), -1)

        # Level 0: 5x5 patches on the full image at centers (2i, 2j).
        win0 = sliding_window_view(image, (PATCH, PATCH), axis=(0, 1))
        p0 = win0[np.ix_(2 * ii - HALF, 2 * jj - HALF)].reshape(len(ii), len(jj), -1)

        u0, ctx0 = _center_normalize(p0)
        u1, ctx1 = _center_normalize(p1)
        feats = np.concatenate([u0, u1], axis=-1)
        ctx = ((h, w), ii, jj, ctx0, ctx1)
        return FeatureMap(feats, (h, w)), ctx

    def vjp(self, ctx, d_features):
        """Pulls a (Gh, Gw, 150) cotangent back to a (H, W, 3) image cotangent."""
        (h, w), ii, jj, ctx0, ctx1 = ctx
        d_features = np.asarray(d_features, dtype=np.float64)
        if d_features.shape != (len(ii), len(jj), self.channels):
            raise ShapeError(
                f"cotangent shape {d_features.shape} != "
                f"{(len(ii), len(jj), self.channels)}"
            )
        d_p0 = _center_normalize_vjp(ctx0, d_features[..., :CHANNELS_PER_LEVEL])
        d_p1 = _center_normalize_vjp(ctx1, d_features[..., CHANNELS_PER_LEVEL:])
        d_p0 = d_p0.reshape(len(ii), len(jj), 3, PATCH, PATCH)
        d_p1 = d_p1.reshape(len(ii), len(jj), 3, PATCH, PATCH)

        d_image = np.zeros((h, w, 3), dtype=np.float64)
        d_pooled = np.zeros((h // 2, w // 2, 3), dtype=np.float64)
        # Scatter per patch offset: 25 shifted dense adds per level.  Within
        # one offset the target indices are unique (centers are strictly
        # increasing), so plain fancy += accumulates correctly.
        for a in range(PATCH):
            for b in range(PATCH):
                rows0 = 2 * ii - HALF + a
                cols0 = 2 * jj - HALF + b
                d_image[np.ix_(rows0, cols0)] += d_p0[:, :, :, a, b]
                rows1 = ii - HALF + a
                cols1 = jj - HALF + b
                d_pooled[np.ix_(rows1, cols1)] += d_p1[:, :, :, a, b]
        d_image[::2, ::2] += 0.25 * d_pooled
        d_image[1::2, ::2] += 0.25 * d_pooled
        d_image[::2, 1::2] += 0.25 * d_pooled
        d_image[1::2, 1::2] += 0.25 * d_pooled
        return d_image
