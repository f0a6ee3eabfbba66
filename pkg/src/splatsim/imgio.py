"""Image-plane I/O and small raster utilities.

Color images travel as float64 (H, W, 3) in [0, 1] in memory and 8-bit RGB
PNG on disk.  Label planes are int arrays with -1 for unlabeled pixels; on
disk they are 16-bit grayscale PNGs storing class + 1 so that 0 means
unlabeled.  Everything round-trips deterministically.
"""

import numpy as np
from PIL import Image

from .errors import LabelError, ShapeError

__all__ = [
    "save_image", "load_image", "save_labels", "load_labels",
    "dilate_mask", "pca_features", "feature_pca_image",
]


def save_image(path, image):
    """Write a float [0,1] (H, W, 3) or (H, W) image as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"image must be (H, W[, 3]), got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_image(path):
    """Read a PNG as float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_labels(path, labels):
    """Write an int label plane (-1 = unlabeled) as 16-bit grayscale PNG."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label plane must be 2D, got {labels.shape}")
    if labels.min(initial=0) < -1 or labels.max(initial=0) >= 65535:
        raise LabelError("labels must lie in [-1, 65534] for 16-bit storage")
    data = (labels.astype(np.int64) + 1).astype(np.uint16)
    Image.fromarray(data, mode="I;16").save(path)


def load_labels(path):
    """Read a 16-bit label PNG back to int32 with -1 for unlabeled."""
    with Image.open(path) as im:
        data = np.asarray(im, dtype=np.int64)
    if data.ndim != 2:
        raise LabelError(f"label png must be single-channel, got shape {data.shape}")
    return (data - 1).astype(np.int32)


def dilate_mask(mask, radius):
    """Binary dilation with a Chebyshev (square) structuring element."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2D, got {mask.shape}")
    out = mask.copy()
    for _ in range(int(radius)):
        padded = np.pad(out, 1, mode="constant")
        acc = np.zeros_like(out)
        for di in range(3):
            for dj in range(3):
                acc |= padded[di:di + out.shape[0], dj:dj + out.shape[1]]
        out = acc
    return out


def pca_features(flat, n_components=3):
    """PCA projection of (M, D) rows; returns (proj (M, C), mean, basis)."""
    flat = np.asarray(flat, dtype=np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    # SVD of the centered data: rows project onto the top right-singular vectors
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:n_components]
    return centered @ basis.T, mean, basis


def feature_pca_image(feature_plane):
    """Map an (H, W, D) feature plane to an RGB visualization via PCA.

    Components are min-max normalized to [0, 1] per channel; constant
    components map to 0.5.  Returns (rgb, projected) where projected keeps
    the unnormalized PCA coordinates for downstream measurements.
    """
    feats = np.asarray(feature_plane, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"feature plane must be (H, W, D), got {feats.shape}")
    h, w, d = feats.shape
    proj, _, _ = pca_features(feats.reshape(-1, d), n_components=min(3, d))
    full = np.zeros((h * w, 3), dtype=np.float64)
    full[:, : proj.shape[1]] = proj
    lo = full.min(axis=0)
    hi = full.max(axis=0)
    span = hi - lo
    rgb = np.full_like(full, 0.5)
    ok = span > 1e-12
    rgb[:, ok] = (full[:, ok] - lo[ok]) / span[ok]
    return rgb.reshape(h, w, 3), full.reshape(h, w, 3)
