"""Relative camera specs: "orbit 30 left tilt 10 up dolly 0.5".

A spec string is a left-to-right sequence of rigid moves applied to a base
camera.  Orbit and tilt revolve the camera about the scene centroid around
the camera's own up and right axes; dolly translates along the viewing
direction.  Zero-angle moves are exact no-ops, and every move composes
with its inverse to machine precision.
"""

from __future__ import annotations

import math

import numpy as np

from ..core_math import Camera
from ..errors import LangError

__all__ = ["parse_camera_spec", "camera_from_spec"]

_MOVES = ("orbit", "tilt", "dolly")
_SIDES = {"orbit": ("left", "right"), "tilt": ("up", "down")}


def parse_camera_spec(spec):
    """Parse a spec string into ((move, amount, side|None), ...).

    Raises LangError on malformed specs; amounts are degrees for orbit and
    tilt, world units for dolly.
    """
    words = str(spec).split()
    moves = []
    i = 0
    while i < len(words):
        move = words[i]
        if move not in _MOVES:
            raise LangError(
                f"bad camera spec: expected one of {_MOVES}, got {move!r}")
        if i + 1 >= len(words):
            raise LangError(f"bad camera spec: {move!r} needs an amount")
        try:
            amount = float(words[i + 1])
        except ValueError:
            raise LangError(
                f"bad camera spec: {move!r} amount {words[i + 1]!r} is not a number")
        i += 2
        side = None
        if move in _SIDES:
            if i >= len(words) or words[i] not in _SIDES[move]:
                raise LangError(
                    f"bad camera spec: {move!r} needs a direction "
                    f"{_SIDES[move]}")
            side = words[i]
            i += 1
        moves.append((move, amount, side))
    return tuple(moves)


def _axis_angle(axis, angle):
    """Rodrigues rotation matrix; exact identity at angle == 0."""
    u = np.asarray(axis, dtype=np.float64)
    u = u / np.linalg.norm(u)
    c, s = math.cos(angle), math.sin(angle)
    K = np.array([[0.0, -u[2], u[1]],
                  [u[2], 0.0, -u[0]],
                  [-u[1], u[0], 0.0]])
    return c * np.eye(3) + s * K + (1.0 - c) * np.outer(u, u)


def _revolve(cam, center, axis, angle):
    A = _axis_angle(axis, angle)
    eye = center + A @ (cam.cam_center() - center)
    R = cam.R @ A.T
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  width=cam.width, height=cam.height,
                  R=R, t=-R @ eye, time=cam.time)


def _dolly(cam, dist):
    eye = cam.cam_center() + float(dist) * cam.forward_axis()
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                  width=cam.width, height=cam.height,
                  R=cam.R.copy(), t=-cam.R @ eye, time=cam.time)


def camera_from_spec(spec, base, centroid=(0.0, 0.0, 0.0)):
    """Apply a relative camera spec to a base camera.

    Moves compose left to right.  "orbit d left" revolves the eye by d
    degrees about the camera's up axis through `centroid` (the scene
    centroid), "tilt d up" about the right axis, "dolly x" advances along
    the viewing direction.  A zero amount returns the pose unchanged.
    """
    centroid = np.asarray(centroid, dtype=np.float64).reshape(3)
    cam = base
    for move, amount, side in parse_camera_spec(spec):
        if amount == 0.0:
            continue
        if move == "orbit":
            angle = math.radians(amount) * (1.0 if side == "left" else -1.0)
            cam = _revolve(cam, centroid, -cam.down_axis(), angle)
        elif move == "tilt":
            angle = math.radians(amount) * (1.0 if side == "up" else -1.0)
            cam = _revolve(cam, centroid, cam.right_axis(), angle)
        else:
            cam = _dolly(cam, amount)
    return cam
