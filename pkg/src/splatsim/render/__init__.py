"""Rasterization: tiled forward, brute-force reference, analytic backward."""

from .backward import Cotangents, GradientBundle, backward
from .common import Overrides, QMAX, T_MIN, TILE
from .forward import RenderOutput, rasterize, render_object_mask
from .reference import rasterize_reference

__all__ = [
    "Cotangents", "GradientBundle", "Overrides", "QMAX", "RenderOutput",
    "T_MIN", "TILE", "backward", "rasterize", "rasterize_reference",
    "render_object_mask",
]
