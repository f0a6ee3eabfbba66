"""Interactive editing sessions: transactional script execution and replay.

A Session owns a scene, the captured views it was fitted against, and a
set of composite target images (the views with edited regions replaced by
each operator's fit target).  Scripts run in rounds; a round either
commits fully or rolls the scene, bindings, and targets back to their
pre-round state and raises StageFailedError.  Every committed round is
appended to an edit log whose replay against the original scene is
bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..assets import PRIMITIVE_TYPES, asset_lookup, primitive_asset, resolve_color
from ..errors import LangError, PlanError, SplatError, StageFailedError, \
    FeatureDisabledError, TranslationError
from ..imgio import load_image, save_image
from ..operators import (
    GroundingQuery,
    ground,
    group_footprint,
    insert_object,
    move_object,
    recolor_object,
    refine_scene,
    remove_object,
    resize_object,
    retexture_object,
)
from ..physics import MaterialParams, save_trajectory, simulate, trajectory_overrides
from ..render import rasterize
from ..training import FitView
from .cameras import camera_from_spec
from .lang import (
    Insert,
    Locate,
    Move,
    Recolor,
    Refine,
    Remove,
    Render,
    Resize,
    Retexture,
    Simulate,
    parse_program,
    print_program,
    print_statement,
)
from .plan import ASSET, GROUND, PHYSICS, REFINE, RENDER, SCENE_OP, plan_program

__all__ = [
    "Budgets",
    "RenderResult",
    "RoundResult",
    "Session",
    "translate_external",
    "replay_log",
]

LOG_FORMAT = "splatsim-editlog"
LOG_VERSION = 1


@dataclass(frozen=True)
class Budgets:
    """Iteration budgets for the fits the operators run internally."""

    remove_iters: int = 500
    insert_iters: int = 300
    retexture_iters: int = 300
    refine_iters: int = 500
    fill_count: int = 2000


@dataclass
class RenderResult:
    out: str | None
    paths: tuple
    frame_count: int
    cameras: int
    images: list | None  # images[frame][camera] when the session keeps frames


@dataclass
class RoundResult:
    round: int
    seed: int
    source: str
    stages: list = field(default_factory=list)
    renders: list = field(default_factory=list)


class _Snapshot:
    """Everything a failed round must restore, captured by value."""

    def __init__(self, session):
        self.scene = session.scene.copy()
        self.bindings = dict(session.bindings)
        self.targets = [t.copy() for t in session.targets]
        self.trajectories = dict(session.trajectories)
        self.trajectory = session.trajectory
        self.touched = set(session.touched)

    def restore(self, session):
        session.scene = self.scene
        session.bindings = self.bindings
        session.targets = self.targets
        session.trajectories = self.trajectories
        session.trajectory = self.trajectory
        session.touched = self.touched


class Session:
    """Stateful script interpreter over one scene.

    Parameters: `views` are the FitViews the scene was fitted against (their
    cameras drive grounding, operator fits, and default renders); `asset_db`
    supplies insertable assets beyond the generator primitives; `translator`
    enables free-text commands via translate().  All randomness derives from
    `seed` and the round counter, so equal sessions replay identically.
    """

    def __init__(self, scene, views, *, asset_db=None, inpaint_oracle=None,
                 translator=None, out_dir=None, seed=42, fps=10.0,
                 budgets=None, resource_root=None, keep_images=True):
        self.scene = scene
        self.views = list(views)
        self.asset_db = asset_db
        self.inpaint_oracle = inpaint_oracle
        self.translator = translator
        self.out_dir = os.fspath(out_dir) if out_dir is not None else None
        self.seed = int(seed)
        self.fps = float(fps)
        self.budgets = budgets or Budgets()
        self.resource_root = os.fspath(resource_root) if resource_root else "."
        self.keep_images = bool(keep_images)

        self.bindings = {}      # identifier -> group id
        self.targets = [np.array(v.image, dtype=np.float64) for v in self.views]
        self.trajectories = {}  # identifier -> Trajectory
        self.trajectory = None  # most recent
        self.touched = set()    # group ids edited this session
        self.edit_log = []      # committed round records
        self.round = 0

    # -- public API -----------------------------------------------------------

    def run(self, source):
        """Parse, plan, and execute one script round transactionally.

        Syntax and planning errors raise before any state is touched.  A
        failure mid-execution restores the pre-round state bit-exactly and
        raises StageFailedError carrying the failing stage and cause.
        """
        program = parse_program(source)
        pipeline = plan_program(program, bound=self.bindings,
                                asset_types=self.known_asset_types())
        canonical = print_program(program)
        round_seed = self._round_seed(self.round)
        result = RoundResult(round=self.round, seed=round_seed, source=canonical)

        snap = _Snapshot(self)
        stage_label = "plan"
        try:
            assets = {}
            for stage in pipeline:
                stage_label = "%s[%d] %s" % (
                    stage.kind, stage.index, print_statement(stage.stmt))
                seed = self._stage_seed(round_seed, stage.index)
                record = {"kind": stage.kind, "index": stage.index,
                          "stmt": print_statement(stage.stmt), "seed": seed}
                if stage.kind == GROUND:
                    self._run_ground(stage.stmt, record)
                elif stage.kind == ASSET:
                    assets[stage.index] = self._resolve_asset(stage.stmt, seed, record)
                elif stage.kind == SCENE_OP:
                    self._run_scene_op(stage.stmt, assets.get(stage.index), seed, record)
                elif stage.kind == PHYSICS:
                    self._run_physics(stage.stmt, record)
                elif stage.kind == REFINE:
                    self._run_refine(stage.stmt, seed, record)
                elif stage.kind == RENDER:
                    result.renders.append(self._run_render(stage.stmt, record))
                result.stages.append(record)
        except Exception as exc:
            snap.restore(self)
            raise StageFailedError(stage_label, exc) from exc

        self.edit_log.append({
            "round": self.round, "seed": round_seed, "source": canonical,
            "stages": result.stages,
        })
        self.round += 1
        return result

    def translate(self, text):
        """Translate free-text with the registered provider, then run it."""
        program, raw = translate_external(text, self.translator)
        return self.run(print_program(program)), raw

    def known_asset_types(self):
        types = set(PRIMITIVE_TYPES)
        if self.asset_db is not None:
            types |= {e["attributes"].get("type") for e in self.asset_db.entries
                      if e["attributes"].get("type")}
        return types

    def save_log(self, path):
        """Write the edit log as JSONL: one header line, one line per round."""
        header = {"format": LOG_FORMAT, "version": LOG_VERSION,
                  "seed": self.seed, "fps": self.fps,
                  "budgets": dataclasses.asdict(self.budgets)}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for rec in self.edit_log:
                fh.write(json.dumps(rec) + "\n")

    # -- stage runners ----------------------------------------------------------

    def _round_seed(self, rnd):
        return self.seed + 1009 * int(rnd)

    @staticmethod
    def _stage_seed(round_seed, index):
        return round_seed + 13 * (int(index) + 1)

    def _run_ground(self, stmt, record):
        query = GroundingQuery(phrase=stmt.phrase, relation=stmt.relation,
                               anchor=stmt.anchor)
        gid = ground(self.scene, query, views=self.views)
        self.bindings[stmt.binding] = int(gid)
        record.update(binding=stmt.binding, group=int(gid),
                      label=self.scene.groups[int(gid)].label)

    def _resolve_asset(self, stmt, seed, record):
        attrs = dict(stmt.attributes)
        asset = None
        if self.asset_db is not None:
            asset = asset_lookup(self.asset_db, {"type": stmt.asset_type, **attrs})
        if asset is None:
            if stmt.asset_type not in PRIMITIVE_TYPES:
                raise PlanError(f"unknown asset type {stmt.asset_type!r}")
            color = resolve_color(attrs["color"]) if "color" in attrs else (0.6, 0.6, 0.6)
            count = int(attrs.get("count", 400))
            asset = primitive_asset(stmt.asset_type, color=color, count=count,
                                    seed=seed, sh_degree=self.scene.sh_degree,
                                    identity_dim=self.scene.identity_dim,
                                    attributes=attrs)
        record.update(asset_id=asset.asset_id, provenance=asset.provenance,
                      gaussians=asset.count)
        return asset

    def _gid_of(self, name):
        gid = self.bindings[name]  # planner guarantees the name is bound
        return int(gid)

    def _pre_footprints(self, gid):
        return [group_footprint(self.scene, gid, v.camera) for v in self.views]

    def _patch_targets(self, pre_footprints=None, gids=()):
        """Overwrite target pixels in the touched regions with fresh renders."""
        for i, view in enumerate(self.views):
            region = np.zeros((view.camera.height, view.camera.width), dtype=bool)
            if pre_footprints is not None:
                region |= pre_footprints[i]
            for g in gids:
                if int(g) in self.scene.groups:
                    region |= group_footprint(self.scene, int(g), view.camera)
            if region.any():
                img = rasterize(self.scene, view.camera, channels=("color",)).color
                self.targets[i][region] = img[region]

    def _run_scene_op(self, stmt, asset, seed, record):
        b = self.budgets
        if isinstance(stmt, Remove):
            gid = self._gid_of(stmt.target)
            fill_gid, plates = remove_object(
                self.scene, gid, self.views, oracle=self.inpaint_oracle,
                fill_count=b.fill_count, iters=b.remove_iters, seed=seed)
            self.targets = [np.array(p) for p in plates]
            self.bindings = {k: v for k, v in self.bindings.items() if v != gid}
            self.touched.discard(gid)
            self.touched.add(int(fill_gid))
            record.update(op="remove", group=gid, fill_group=int(fill_gid))
        elif isinstance(stmt, Insert):
            scale = 1.0 if stmt.scale is None else float(stmt.scale)
            gid, plates = insert_object(
                self.scene, asset, stmt.position, scale, self.views,
                iters=b.insert_iters, seed=seed)
            self.targets = [np.array(p) for p in plates]
            if stmt.binding is not None:
                self.bindings[stmt.binding] = int(gid)
            self.touched.add(int(gid))
            record.update(op="insert", group=int(gid), scale=scale,
                          position=list(stmt.position))
        elif isinstance(stmt, Recolor):
            gid = self._gid_of(stmt.target)
            pre = self._pre_footprints(gid)
            recolor_object(self.scene, gid, stmt.rgb)
            self._patch_targets(pre, gids=(gid,))
            self.touched.add(gid)
            record.update(op="recolor", group=gid, color=stmt.color_hex)
        elif isinstance(stmt, Retexture):
            gid = self._gid_of(stmt.target)
            ref = load_image(os.path.join(self.resource_root, stmt.reference))
            pre = self._pre_footprints(gid)
            retexture_object(self.scene, gid, ref, self.views,
                             iters=b.retexture_iters, seed=seed)
            self._patch_targets(pre, gids=(gid,))
            self.touched.add(gid)
            record.update(op="retexture", group=gid, reference=stmt.reference)
        elif isinstance(stmt, Move):
            gid = self._gid_of(stmt.target)
            new_gid, plates = move_object(
                self.scene, gid, stmt.position, self.views,
                inpaint_oracle=self.inpaint_oracle, fill_count=b.fill_count,
                iters=b.remove_iters, seed=seed)
            self.targets = [np.array(p) for p in plates]
            self._patch_targets(gids=(new_gid,))
            for name, bound in list(self.bindings.items()):
                if bound == gid:
                    self.bindings[name] = int(new_gid)
            self.touched.discard(gid)
            self.touched.add(int(new_gid))
            record.update(op="move", group=gid, new_group=int(new_gid),
                          position=list(stmt.position))
        elif isinstance(stmt, Resize):
            gid = self._gid_of(stmt.target)
            pre = self._pre_footprints(gid)
            resize_object(self.scene, gid, stmt.factor)
            self._patch_targets(pre, gids=(gid,))
            self.touched.add(gid)
            record.update(op="resize", group=gid, factor=float(stmt.factor))
        else:
            raise PlanError(f"cannot execute {type(stmt).__name__} as a scene op")

    def _run_physics(self, stmt, record):
        gid = self._gid_of(stmt.target)
        material = MaterialParams(density=stmt.density, youngs=stmt.youngs,
                                  poisson=stmt.poisson)
        traj = simulate(self.scene, gid, material, stmt.duration, fps=self.fps)
        self.trajectories[stmt.target] = traj
        self.trajectory = traj
        path = None
        if self.out_dir is not None:
            os.makedirs(self.out_dir, exist_ok=True)
            path = os.path.join(
                self.out_dir, f"trajectory_r{self.round:03d}_{stmt.target}.npz")
            save_trajectory(traj, path)
        record.update(op="simulate", group=gid, frames=len(traj.times),
                      duration=float(stmt.duration), warn_count=traj.warn_count,
                      trajectory=path)

    def _run_refine(self, stmt, seed, record):
        iters = self.budgets.refine_iters if stmt.iters is None else int(stmt.iters)
        fit_views = [FitView(camera=v.camera, image=t)
                     for v, t in zip(self.views, self.targets)]
        touched = sorted(g for g in self.touched if g in self.scene.groups)
        mse = refine_scene(self.scene, fit_views, touched, iters=iters, seed=seed)
        record.update(op="refine", iters=iters, touched=touched,
                      composite_mse=float(mse))

    def _scene_centroid(self):
        if self.scene.n == 0:
            return np.zeros(3)
        return self.scene.positions3(self.scene.mid_time()).mean(axis=0)

    def _run_render(self, stmt, record):
        t0, t1 = self.scene.time_range
        traj = self.trajectory
        if stmt.frames is not None:
            first, last = (int(f) for f in stmt.frames)
        elif traj is not None:
            first, last = 0, len(traj.times) - 1
        else:
            first, last = 0, max(0, math.floor((t1 - t0) * self.fps))
        if stmt.camera is not None:
            cams = [camera_from_spec(stmt.camera, self.views[0].camera,
                                     self._scene_centroid())]
        else:
            cams = [v.camera for v in self.views]

        out = None
        if stmt.out is not None:
            out = stmt.out if self.out_dir is None \
                else os.path.join(self.out_dir, stmt.out)
        elif self.out_dir is not None:
            out = os.path.join(self.out_dir, f"render_r{self.round:03d}")
        if out is not None:
            os.makedirs(out, exist_ok=True)

        paths, images = [], []
        for k in range(first, last + 1):
            overrides = None
            if traj is not None:
                overrides = trajectory_overrides(
                    self.scene, traj, min(k, len(traj.times) - 1))
            t = t0 + k / self.fps
            row = []
            for ci, cam in enumerate(cams):
                img = rasterize(self.scene, cam, channels=("color",), t=t,
                                overrides=overrides).color
                if out is not None:
                    path = os.path.join(out, f"cam{ci:02d}_frame{k:04d}.png")
                    save_image(path, img)
                    paths.append(path)
                if self.keep_images:
                    row.append(img)
            images.append(row)
        rr = RenderResult(out=out, paths=tuple(paths),
                          frame_count=last - first + 1, cameras=len(cams),
                          images=images if self.keep_images else None)
        record.update(op="render", frames=[first, last], cameras=len(cams),
                      out=out, files=len(paths))
        return rr


# -- external translation -------------------------------------------------------

def translate_external(text, translator=None):
    """Turn free text into a parsed program via a registered translator.

    The translator is any callable text -> script source.  Raises
    FeatureDisabledError when none is registered and TranslationError
    (carrying the raw output and the syntax error) when the translation
    does not parse.

    Returns (program, raw_output).
    """
    if translator is None:
        raise FeatureDisabledError(
            "no external translator registered; construct the session with "
            "translator=<callable text -> script>")
    raw = translator(text)
    try:
        return parse_program(raw), raw
    except LangError as exc:
        raise TranslationError(
            f"translated script does not parse: {exc}",
            raw_output=raw, parse_error=exc) from exc


# -- replay ----------------------------------------------------------------------

def replay_log(scene, views, path, **session_kwargs):
    """Re-run a saved edit log against a scene; returns the new Session.

    The log header's seed, fps, and budgets are applied unless overridden.
    With the same initial scene, views, asset database, and oracles, the
    replayed session's final scene is bit-identical to the original.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("format") != LOG_FORMAT:
        raise SplatError(f"{path} is not an edit log")
    header, rounds = lines[0], lines[1:]
    session_kwargs.setdefault("seed", header["seed"])
    session_kwargs.setdefault("fps", header["fps"])
    session_kwargs.setdefault("budgets", Budgets(**header["budgets"]))
    session = Session(scene, views, **session_kwargs)
    for rec in rounds:
        session.run(rec["source"])
    return session
