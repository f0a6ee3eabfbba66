"""Pipeline planner: orders parsed statements into executable stages.

Stage order is Ground -> Asset -> SceneOp/Physics -> Refine -> Render.
Grounding and asset resolution are hoisted to the front (they are
read-only), scene edits and physics keep their program order, a single
refinement pass runs after the last edit unless disabled, and renders
come last.  An edit round with at least one scene edit gets an automatic
default Refine stage when the program names none; `refine off` suppresses
it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import PlanError
from .cameras import parse_camera_spec
from .lang import (
    Insert,
    Locate,
    Recolor,
    Refine,
    Remove,
    Render,
    Resize,
    Retexture,
    Simulate,
    Move,
)

__all__ = ["Stage", "plan_program"]

GROUND, ASSET, SCENE_OP, PHYSICS, REFINE, RENDER = (
    "ground", "asset", "scene-op", "physics", "refine", "render")

_SCENE_OPS = (Remove, Insert, Recolor, Retexture, Move, Resize)


@dataclass(frozen=True)
class Stage:
    kind: str        # ground | asset | scene-op | physics | refine | render
    stmt: object
    index: int       # statement position in the program; -1 for implicit


def _check_int(value, what, minimum=None):
    if not math.isfinite(value) or value != math.floor(value):
        raise PlanError(f"{what} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise PlanError(f"{what} must be >= {minimum}, got {value!r}")
    return int(value)


def plan_program(stmts, bound=(), asset_types=None):
    """Build the ordered stage list for one edit round.

    `bound` holds identifiers already bound by earlier rounds; `asset_types`
    (when given) is the set of insertable asset type names.  Raises
    PlanError for unbound identifiers, invalid numeric ranges, unknown
    asset types, or repeated refine statements.
    """
    grounds, assets, ops, renders = [], [], [], []
    refine = None
    names = set(bound)

    for i, stmt in enumerate(stmts):
        if isinstance(stmt, Locate):
            grounds.append(Stage(GROUND, stmt, i))
            names.add(stmt.binding)
            continue
        if isinstance(stmt, Refine):
            if refine is not None:
                raise PlanError(f"statement {i + 1}: more than one refine statement")
            if stmt.iters is not None:
                _check_int(stmt.iters, "refine iters", minimum=1)
            refine = Stage(REFINE, stmt, i)
            continue
        if isinstance(stmt, Render):
            if stmt.frames is not None:
                first = _check_int(stmt.frames[0], "frame range start", minimum=0)
                last = _check_int(stmt.frames[1], "frame range end", minimum=0)
                if last < first:
                    raise PlanError(
                        f"invalid frame range {first} .. {last} (end before start)")
            if stmt.camera is not None:
                try:
                    parse_camera_spec(stmt.camera)
                except Exception as exc:
                    raise PlanError(f"bad camera spec {stmt.camera!r}: {exc}") from exc
            renders.append(Stage(RENDER, stmt, i))
            continue

        if isinstance(stmt, Insert):
            if asset_types is not None and stmt.asset_type not in asset_types:
                raise PlanError(
                    f"unknown asset type {stmt.asset_type!r}; "
                    f"available: {sorted(asset_types)}")
            if stmt.scale is not None and not stmt.scale > 0:
                raise PlanError(f"insert scale must be positive, got {stmt.scale!r}")
            assets.append(Stage(ASSET, stmt, i))
            ops.append(Stage(SCENE_OP, stmt, i))
            if stmt.binding is not None:
                names.add(stmt.binding)
            continue

        # remaining statements reference a bound identifier
        if stmt.target not in names:
            raise PlanError(f"statement {i + 1}: unbound identifier {stmt.target!r}")
        if isinstance(stmt, Resize):
            if not stmt.factor > 0:
                raise PlanError(f"resize factor must be positive, got {stmt.factor!r}")
            ops.append(Stage(SCENE_OP, stmt, i))
        elif isinstance(stmt, Simulate):
            if not stmt.density > 0:
                raise PlanError(f"density must be positive, got {stmt.density!r}")
            if not stmt.youngs > 0:
                raise PlanError(f"youngs must be positive, got {stmt.youngs!r}")
            if not -1.0 < stmt.poisson < 0.5:
                raise PlanError(
                    f"poisson must lie in (-1, 0.5), got {stmt.poisson!r}")
            if not stmt.duration > 0:
                raise PlanError(f"duration must be positive, got {stmt.duration!r}")
            ops.append(Stage(PHYSICS, stmt, i))
        elif isinstance(stmt, _SCENE_OPS):
            ops.append(Stage(SCENE_OP, stmt, i))
        else:
            raise PlanError(f"statement {i + 1}: cannot plan {type(stmt).__name__}")

    stages = grounds + assets + ops
    edited = any(s.kind == SCENE_OP for s in ops)
    if refine is not None:
        if not refine.stmt.off:
            stages.append(refine)
    elif edited:
        stages.append(Stage(REFINE, Refine(), -1))
    return tuple(stages + renders)
