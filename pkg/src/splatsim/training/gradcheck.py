"""Finite-difference verification of the analytic rasterizer gradients.

Central differences on float32 parameters need the *realized* step: after
x +/- h rounds to float32, the effective denominator is fp64(fp32(x+h)) -
fp64(fp32(x-h)), not 2h.  All comparisons here use that correction.
"""

from __future__ import annotations

import numpy as np

from ..render import Cotangents, backward, rasterize
from .losses import mse_loss

__all__ = ["GRAD_BLOCKS", "analytic_gradient", "fd_gradient", "gradcheck"]

# Parameter blocks with color-rendering gradients (identity feeds the
# feature channel only and is checked through the semantic loss instead).
GRAD_BLOCKS = ("mu4", "q_left", "q_right", "log_scales", "opacity_logit", "sh")


def _render_loss(scene, cam, target):
    out = rasterize(scene, cam, channels=("color",))
    return mse_loss(out.color, target)[0]


def analytic_gradient(scene, cam, target):
    """Backward-pass gradients of the render MSE for every block."""
    out = rasterize(scene, cam, channels=("color",), retain_state=True)
    _, d_color = mse_loss(out.color, target)
    return backward(scene, cam, Cotangents(d_color=d_color), state=out.state)


def fd_gradient(scene, cam, target, block, index, h=1e-4):
    """Central-difference derivative of the render MSE for one entry.

    `index` is a flat index into the block array.  The scene is restored
    exactly afterwards.
    """
    arr = getattr(scene, block)
    flat = arr.reshape(-1)
    x0 = flat[index].item()
    try:
        flat[index] = np.float32(x0 + h)
        x_hi = float(flat[index])
        hi = _render_loss(scene, cam, target)
        flat[index] = np.float32(x0 - h)
        x_lo = float(flat[index])
        lo = _render_loss(scene, cam, target)
    finally:
        flat[index] = x0
    dx = x_hi - x_lo
    if dx == 0.0:
        return 0.0
    return (hi - lo) / dx

def gradcheck(scene, cam, target, per_block=40, h=1e-4, rel_tol=1e-3,
              atol=1e-9, seed=0, blocks=GRAD_BLOCKS):
    """Compare analytic and FD gradients on sampled entries per block.

    An entry passes when |fd - analytic| <= rel_tol * max(|fd|, |analytic|)
    + atol.  Returns (fraction_passed, records); each record is
    (block, index, analytic, fd, passed).
    """
    rng = np.random.default_rng(seed)
    grads = analytic_gradient(scene, cam, target).blocks()
    records = []
    for block in blocks:
        size = getattr(scene, block).size
        take = min(per_block, size)
        for index in rng.choice(size, size=take, replace=False):
            index = int(index)
            an = float(grads[block].reshape(-1)[index])
            fd = fd_gradient(scene, cam, target, block, index, h=h)
            ok = abs(fd - an) <= rel_tol * max(abs(fd), abs(an)) + atol
            records.append((block, index, an, fd, bool(ok)))
    frac = float(np.mean([r[4] for r in records])) if records else 1.0
    return frac, records
