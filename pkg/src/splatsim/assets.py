"""Asset library: reusable Gaussian blocks in canonical pose.

An asset is a self-contained static Gaussian block normalized so its
spatial centroid sits at the origin and its bounding box has max extent
1.0 scene unit; insertion scales and translates from there.  The database
is a plain directory of scene-format files plus one JSON index, looked up
by attribute matching (exact on type, best-effort on the rest).  Assets
the library cannot provide are generated on the fly from parametric
primitives (box, sphere, cylinder surface splats).
"""

import json
import os
import string
from dataclasses import dataclass, field

import numpy as np

from . import sceneio
from .errors import SceneFormatError, ShapeError
from .scene import (DEFAULT_SH_DEGREE, IDENTITY_DIM, IDENTITY_INIT_STD,
                    PARAM_BLOCKS, SceneModel, TIME_FLAT_LOG_SCALE)
from .core_math import SH_C0, sh_coeff_count

__all__ = [
    "Asset", "AssetDatabase", "asset_add", "asset_lookup",
    "canonicalize_block", "primitive_asset", "PRIMITIVE_TYPES",
]

INDEX_FILE = "index.json"
PRIMITIVE_TYPES = ("box", "sphere", "cylinder")


@dataclass
class Asset:
    """A label + attributes + canonical Gaussian block."""

    asset_id: str
    label: str
    attributes: dict
    block: dict  # name -> array, scene block layout
    provenance: str = "library"  # "library" | "generated"
    sh_degree: int = DEFAULT_SH_DEGREE

    @property
    def count(self):
        return np.asarray(self.block["mu4"]).reshape(-1, 4).shape[0]

    def copy_block(self):
        return {k: np.array(v, dtype=np.float32) for k, v in self.block.items()}


def canonicalize_block(block):
    """Normalize a Gaussian block to canonical pose, in place semantics.

    Spatial centroid moves to the origin and positions/scales shrink so the
    spatial bounding box max extent is exactly 1.0 (degenerate single-point
    blocks keep their scale).  Time means collapse to 0 and temporal scales
    go time-flat: assets are static by construction.
    """
    out = {k: np.array(v, dtype=np.float32) for k, v in block.items()}
    mu4 = out["mu4"].reshape(-1, 4)
    if mu4.shape[0] == 0:
        raise ShapeError("cannot canonicalize an empty block")
    xyz = mu4[:, :3].astype(np.float64)
    xyz = xyz - xyz.mean(axis=0)
    extent = float((xyz.max(axis=0) - xyz.min(axis=0)).max()) if len(xyz) > 1 else 0.0
    if extent > 0:
        factor = 1.0 / extent
        xyz *= factor
        out["log_scales"][:, :3] += np.float32(np.log(factor))
    mu4[:, :3] = xyz.astype(np.float32)
    mu4[:, 3] = 0.0
    out["log_scales"][:, 3] = TIME_FLAT_LOG_SCALE
    out["mu4"] = mu4
    return out


def _surface_points(kind, count, rng):
    """Points on the unit-ish surface of a primitive, max extent 1 pre-normalization."""
    if kind == "box":
        face = rng.integers(0, 6, count)
        uv = rng.random((count, 2)) - 0.5
        pts = np.empty((count, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        for i in range(count):
            a = axis[i]
            rest = [j for j in range(3) if j != a]
            pts[i, a] = sign[i]
            pts[i, rest[0]] = uv[i, 0]
            pts[i, rest[1]] = uv[i, 1]
        return pts
    if kind == "sphere":
        v = rng.normal(0, 1, (count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return 0.5 * v
    if kind == "cylinder":
        # lateral surface plus caps, area-weighted for radius 0.5, height 1
        theta = rng.random(count) * 2 * np.pi
        lateral = rng.random(count) < 2.0 / 3.0
        pts = np.empty((count, 3))
        pts[:, 0] = 0.5 * np.cos(theta)
        pts[:, 1] = 0.5 * np.sin(theta)
        pts[lateral, 2] = rng.random(int(lateral.sum())) - 0.5
        caps = ~lateral
        r = 0.5 * np.sqrt(rng.random(int(caps.sum())))
        pts[caps, 0] = r * np.cos(theta[caps])
        pts[caps, 1] = r * np.sin(theta[caps])
        pts[caps, 2] = np.where(rng.random(int(caps.sum())) < 0.5, -0.5, 0.5)
        return pts
    raise SceneFormatError(f"unknown primitive type {kind!r}")


def primitive_asset(kind, color=(0.6, 0.6, 0.6), count=400, seed=0,
                    sh_degree=DEFAULT_SH_DEGREE, identity_dim=IDENTITY_DIM,
                    attributes=None):
    """Build a generated asset by splatting points on a primitive surface."""
    if kind not in PRIMITIVE_TYPES:
        raise SceneFormatError(
            f"no generator primitive for type {kind!r}; have {PRIMITIVE_TYPES}")
    rng = np.random.default_rng(seed)
    pts = _surface_points(kind, count, rng)
    k = sh_coeff_count(sh_degree)
    color = np.asarray(color, dtype=np.float64).reshape(3)
    sh = np.zeros((count, k, 3), dtype=np.float32)
    sh[:, 0] = ((color - 0.5) / SH_C0).astype(np.float32)
    quat = np.zeros((count, 4), dtype=np.float32)
    quat[:, 0] = 1.0
    # splat radius ~ surface spacing so the shell closes up
    log_s = np.log(1.2 / np.sqrt(count))
    log_scales = np.full((count, 4), log_s, dtype=np.float32)
    log_scales[:, 3] = TIME_FLAT_LOG_SCALE
    block = {
        "mu4": np.concatenate([pts, np.zeros((count, 1))], axis=1).astype(np.float32),
        "q_left": quat.copy(),
        "q_right": quat.copy(),
        "log_scales": log_scales,
        "opacity_logit": np.full(count, 2.0, dtype=np.float32),
        "sh": sh,
        "identity": rng.normal(0, IDENTITY_INIT_STD, (count, identity_dim)).astype(np.float32),
    }
    attrs = {"type": kind, "color": _nearest_color_name(color)}
    attrs.update(attributes or {})
    return Asset(asset_id=f"generated-{kind}-{seed}", label=kind,
                 attributes=attrs, block=canonicalize_block(block),
                 provenance="generated", sh_degree=sh_degree)


_COLOR_NAMES = {
    "red": (0.8, 0.15, 0.15), "green": (0.15, 0.7, 0.2), "blue": (0.15, 0.25, 0.8),
    "yellow": (0.85, 0.8, 0.15), "white": (0.9, 0.9, 0.9), "black": (0.08, 0.08, 0.08),
    "gray": (0.6, 0.6, 0.6), "orange": (0.9, 0.55, 0.1), "purple": (0.55, 0.2, 0.7),
}


def _nearest_color_name(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    names = list(_COLOR_NAMES)
    dists = [np.sum((rgb - np.asarray(_COLOR_NAMES[n])) ** 2) for n in names]
    return names[int(np.argmin(dists))]


def resolve_color(value):
    """Turn a color attribute ('#rrggbb', a name, or an RGB triple) into RGB."""
    if isinstance(value, str):
        if value.startswith("#"):
            h = value[1:]
            if len(h) != 6 or any(c not in string.hexdigits for c in h):
                raise ValueError(f"bad color literal {value!r}")
            return tuple(int(h[k:k + 2], 16) / 255.0 for k in (0, 2, 4))
        if value in _COLOR_NAMES:
            return _COLOR_NAMES[value]
        raise ValueError(
            f"unknown color name {value!r}; known: {sorted(_COLOR_NAMES)}")
    rgb = np.asarray(value, dtype=np.float64).reshape(3)
    return tuple(float(c) for c in rgb)


class AssetDatabase:
    """Directory of scene-format asset files plus a JSON index.

    The index records insertion order, labels, and attribute maps; blocks
    load lazily from their scene files.  In-memory assets (no directory)
    work too: pass root=None and use asset_add / asset_lookup directly.
    """

    def __init__(self, root=None):
        self.root = root
        self.entries = []  # insertion-ordered dicts
        self._cache = {}
        if root is not None:
            os.makedirs(root, exist_ok=True)
            index_path = os.path.join(root, INDEX_FILE)
            if os.path.exists(index_path):
                with open(index_path, encoding="utf-8") as fh:
                    data = json.load(fh)
                self.entries = list(data.get("assets", []))

    def _flush_index(self):
        if self.root is None:
            return
        tmp = {"assets": self.entries}
        with open(os.path.join(self.root, INDEX_FILE), "w", encoding="utf-8") as fh:
            json.dump(tmp, fh, indent=1, sort_keys=True)

    def __len__(self):
        return len(self.entries)

    def add(self, asset):
        """Register an asset; persists its block when the db has a directory."""
        entry = {
            "asset_id": asset.asset_id,
            "label": asset.label,
            "attributes": dict(asset.attributes),
            "provenance": asset.provenance,
            "sh_degree": asset.sh_degree,
            "file": f"{len(self.entries):04d}-{asset.asset_id}.rprl",
        }
        if self.root is not None:
            scene = SceneModel.empty(sh_degree=asset.sh_degree,
                                     identity_dim=asset.block["identity"].shape[1])
            scene.insert_gaussians(asset.copy_block(), asset.label,
                                   attributes=asset.attributes)
            sceneio.save_scene(scene, os.path.join(self.root, entry["file"]))
        self._cache[entry["asset_id"]] = asset
        self.entries.append(entry)
        self._flush_index()
        return asset.asset_id

    def _materialize(self, entry):
        aid = entry["asset_id"]
        if aid in self._cache:
            return self._cache[aid]
        scene = sceneio.load_scene(os.path.join(self.root, entry["file"]))
        block = {name: getattr(scene, name).copy() for name in PARAM_BLOCKS}
        asset = Asset(asset_id=aid, label=entry["label"],
                      attributes=dict(entry["attributes"]),
                      block=block, provenance=entry["provenance"],
                      sh_degree=entry["sh_degree"])
        self._cache[aid] = asset
        return asset

    def lookup(self, attributes):
        """Best attribute match with exact type gate; None when type absent.

        Score = number of equal (key, value) pairs over the non-type
        attributes; ties resolve to the earlier-inserted asset.
        """
        query = dict(attributes)
        want_type = query.pop("type", None)
        best, best_score = None, -1
        for entry in self.entries:
            attrs = entry["attributes"]
            if want_type is not None and attrs.get("type") != want_type:
                continue
            score = sum(1 for k, v in query.items() if attrs.get(k) == v)
            if score > best_score:
                best, best_score = entry, score
        if best is None:
            return None
        return self._materialize(best)


def asset_add(db, asset):
    return db.add(asset)


def asset_lookup(db, attributes):
    return db.lookup(attributes)
