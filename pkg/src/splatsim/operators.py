"""Scene-editing operators: grounding, part distillation, removal,
insertion with color harmonization, geometric edits, recolor, retexture,
and the global refinement pass.

Operators mutate the scene in place and are deterministic under
(scene, arguments, seed).  External perception models stay behind the
SegmentOracle / InpaintOracle interfaces; the default inpainter is a
harmonic fill, and tests supply synthetic ground-truth segmenters.

Footprint convention: an object's rendered footprint in a view is the set
of pixels where its composited contribution weight exceeds FOOTPRINT_EPS;
its solid mask uses SOLID_THRESHOLD.  Guarantees about untouched
background pixels are stated against footprints, where the contribution
bound makes them hold by construction.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .assets import Asset, canonicalize_block
from .core_math import SH_C0, lab_to_rgb, rgb_to_lab
from .errors import GroundingError, PartNotFoundError, UnknownGroupError
from .imgio import dilate_mask
from .render import rasterize, render_object_mask
from .scene import Group
from .training import (FitConfig, FitView, LossWeights, default_lr_table, fit,
                       mse_loss)
from .training.features import PatchPyramidExtractor
from .training.losses import nnfm_3d_loss
from .training.optim import AdamState, adam_step

__all__ = [
    "FOOTPRINT_EPS", "SOLID_THRESHOLD", "GroundingQuery", "SegmentOracle",
    "InpaintOracle", "HarmonicInpaint", "ground", "isd_refine",
    "remove_object", "insert_object", "resize_object", "move_object",
    "recolor_object", "retexture_object", "refine_scene",
    "group_footprint", "harmonize_region", "mask_iou",
]

FOOTPRINT_EPS = 1e-5
SOLID_THRESHOLD = 0.5
RELATIONS = ("nearest-to", "left-of", "right-of", "above", "below")


# -- grounding ----------------------------------------------------------------

@dataclass
class GroundingQuery:
    """A noun phrase, optional spatial relation to an anchor phrase, and
    optional attribute filters.  Matching is case-insensitive token
    containment: every query token must appear in the group label."""

    phrase: str
    relation: str | None = None
    anchor: str | None = None
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.phrase or not self.phrase.strip():
            raise GroundingError("empty grounding phrase")
        if self.relation is not None and self.relation not in RELATIONS:
            raise GroundingError(
                f"unknown relation {self.relation!r}; expected one of {RELATIONS}")


def _tokens(text):
    return [t for t in re.split(r"[^a-z0-9]+", text.strip().lower()) if t]


def _phrase_matches(scene, phrase, attributes=None):
    """Group ids whose label tokens contain all phrase tokens, ascending."""
    want = set(_tokens(phrase))
    hits = []
    for gid in sorted(scene.groups):
        g = scene.groups[gid]
        if not want <= set(_tokens(g.label)):
            continue
        attrs = attributes or {}
        if all(g.attributes.get(k) == v for k, v in attrs.items()):
            hits.append(gid)
    return hits


def ground(scene, query, views=()):
    """Resolve a GroundingQuery to a group id.

    Relations compare group centroids at the scene's mid time; directional
    relations use the first view's camera axes (x right, y down), so
    "above" means smaller camera-y.  Ties resolve to the smallest group id.
    Raises GroundingError with the available labels on no match.
    """
    labels = sorted({g.label for g in scene.groups.values()})
    cands = _phrase_matches(scene, query.phrase, query.attributes)
    if not cands:
        raise GroundingError(
            f"no group matches phrase {query.phrase!r}", candidates=labels)
    if query.relation is None:
        return cands[0]

    anchors = _phrase_matches(scene, query.anchor or "")
    if not anchors:
        raise GroundingError(
            f"no group matches anchor phrase {query.anchor!r}", candidates=labels)
    anchor = anchors[0]
    others = [g for g in cands if g != anchor] or cands
    t = scene.mid_time()
    a_cent = scene.group_centroid(anchor, t)

    if query.relation == "nearest-to":
        dists = [(float(np.linalg.norm(scene.group_centroid(g, t) - a_cent)), g)
                 for g in others]
        return min(dists)[1]

    if not views:
        raise GroundingError(
            f"relation {query.relation!r} needs at least one view for camera axes")
    cam = views[0].camera if hasattr(views[0], "camera") else views[0]
    a_cam = cam.world_to_cam(a_cent)
    axis, sign = {"left-of": (0, -1), "right-of": (0, +1),
                  "above": (1, -1), "below": (1, +1)}[query.relation]
    sel = [g for g in others
           if sign * (cam.world_to_cam(scene.group_centroid(g, t))[axis]
                      - a_cam[axis]) > 0]
    if not sel:
        raise GroundingError(
            f"no {query.phrase!r} {query.relation} {query.anchor!r}",
            candidates=labels)
    return sel[0]


# -- oracle interfaces --------------------------------------------------------

class SegmentOracle:
    """Segmentation plug point standing in for learned detectors.

    detect(image, phrase) -> (box, mask, confidence) or None, where box is
    (i0, j0, i1, j1) half-open pixel bounds; mask_from_box(image, box) ->
    bool mask of the image shape.
    """

    def detect(self, image, phrase):
        raise NotImplementedError

    def mask_from_box(self, image, box):
        raise NotImplementedError


class InpaintOracle:
    """Hole-filling plug point: __call__(image, hole_mask) -> filled image
    with pixels outside the hole returned unchanged."""

    def __call__(self, image, hole_mask):
        raise NotImplementedError


class HarmonicInpaint(InpaintOracle):
    """Laplace fill: hole pixels relax to the average of their neighbors,
    boundary conditions from the surrounding image (Jacobi sweeps).

    Deterministic and model-free; produces smooth membranes rather than
    texture, which is exactly what a fit target needs to be reproducible.
    """

    def __init__(self, sweeps=500):
        self.sweeps = int(sweeps)

    def __call__(self, image, hole_mask):
        img = np.array(image, dtype=np.float64)
        hole = np.asarray(hole_mask, dtype=bool)
        if not hole.any():
            return img
        # init hole with the mean of the non-hole boundary ring for faster settling
        ring = dilate_mask(hole, 1) & ~hole
        seed = img[ring].mean(axis=0) if ring.any() else np.full(img.shape[-1], 0.5)
        img[hole] = seed
        for _ in range(self.sweeps):
            up = np.roll(img, 1, axis=0)
            down = np.roll(img, -1, axis=0)
            left = np.roll(img, 1, axis=1)
            right = np.roll(img, -1, axis=1)
            # clamp rolls at the borders by re-using the center row/col
            up[0] = img[0]
            down[-1] = img[-1]
            left[:, 0] = img[:, 0]
            right[:, -1] = img[:, -1]
            avg = 0.25 * (up + down + left + right)
            img[hole] = avg[hole]
        return img


# -- shared helpers -----------------------------------------------------------

def group_footprint(scene, group_id, cam, threshold=FOOTPRINT_EPS, t=None):
    """Bool mask of pixels where the group's composited weight > threshold."""
    return render_object_mask(scene, int(group_id), cam, t=t) > threshold


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _cameras_of(views):
    return [v.camera if hasattr(v, "camera") else v for v in views]


# -- ISD ----------------------------------------------------------------------

def isd_refine(scene, parent_group, part_phrase, views, oracle,
               iters=400, verify_iou=0.75, vote_views=2, seed=0):
    """Split a finer-grained part off an existing group by fine-tuning only
    the parent's identity encodings (plus the head) against oracle masks.

    Returns the parent id unchanged when the oracle's detection already
    matches the parent mask (IoU >= verify_iou in every detected view).
    Otherwise registers a new semantic class, fits, and moves the parent
    Gaussians classified as the new class on >= vote_views views into a
    new group.  All parameter blocks except `identity` stay bit-identical.
    """
    gid = int(parent_group)
    if gid not in scene.groups:
        raise UnknownGroupError(f"unknown group id {gid}")
    parent = scene.groups[gid]
    cams = _cameras_of(views)

    detections = []
    for cam in cams:
        img = rasterize(scene, cam, channels=("color",)).color
        hit = oracle.detect(img, part_phrase)
        detections.append((img, hit))
    if all(hit is None for _, hit in detections):
        raise PartNotFoundError(
            f"oracle found no {part_phrase!r} in any of {len(cams)} views")

    parent_masks = [render_object_mask(scene, gid, cam) > SOLID_THRESHOLD
                    for cam in cams]
    ious = [mask_iou(parent_masks[i], hit[1])
            for i, (_, hit) in enumerate(detections) if hit is not None]
    if ious and min(ious) >= verify_iou:
        return gid  # the part is the whole object; nothing to distill

    new_class = scene.head.add_class()
    fit_views = []
    for i, cam in enumerate(cams):
        img, hit = detections[i]
        labels = np.full((cam.height, cam.width), -1, dtype=np.int32)
        labels[parent_masks[i]] = parent.class_id
        if hit is not None:
            fine = oracle.mask_from_box(img, hit[0])
            labels[fine & parent_masks[i]] = new_class
        fit_views.append(FitView(camera=cam, image=img, labels=labels))

    row_mask = np.zeros(scene.n, dtype=bool)
    row_mask[parent.indices] = True
    cfg = FitConfig(iterations=int(iters), seed=seed, param_blocks=("identity",),
                    row_mask=row_mask, train_head=True, probe_view=None)
    fit(scene, fit_views, cfg, LossWeights(render=0.0, semantic=1.0, consistency=0.0))

    # membership vote: a parent Gaussian joins the part when the pixel under
    # its projected center classifies as the new class on enough views
    votes = np.zeros(scene.n, dtype=np.int64)
    for i, cam in enumerate(cams):
        out = rasterize(scene, cam, channels=("feature",))
        logits = scene.head.logits(out.feature.reshape(-1, scene.identity_dim))
        classes = np.argmax(logits, axis=1).reshape(cam.height, cam.width)
        mu3, _, _ = scene.condition(cam.time)
        pc = cam.world_to_cam(mu3[parent.indices])
        ok = pc[:, 2] > 1e-6
        px = np.round(cam.fx * pc[:, 0] / np.where(ok, pc[:, 2], 1.0) + cam.cx).astype(int)
        py = np.round(cam.fy * pc[:, 1] / np.where(ok, pc[:, 2], 1.0) + cam.cy).astype(int)
        inside = ok & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        idx = parent.indices[inside]
        votes[idx] += classes[py[inside], px[inside]] == new_class

    members = np.flatnonzero(votes >= vote_views)
    members = members[np.isin(members, parent.indices)]
    new_gid = scene.next_group_id
    scene.next_group_id += 1
    scene.groups[new_gid] = Group(new_gid, str(part_phrase), new_class,
                                  dict(parent.attributes), members.copy())
    parent.indices = parent.indices[~np.isin(parent.indices, members)]
    return new_gid


# -- removal ------------------------------------------------------------------

def remove_object(scene, group_id, views, oracle=None, fill_count=2000,
                  dilation=5, iters=500, seed=0):
    """Delete a group and heal the revealed hole.

    Per view: footprint = pre-deletion rendered object mask dilated by
    `dilation` px.  After deletion the rendered views are inpainted inside
    the footprints (default: harmonic fill) and `fill_count` fresh
    time-flat Gaussians spawned in the group's pre-deletion bounding box
    are fitted against the inpainted plates (only the new rows train).

    Returns (fill_group_id, plates) where plates are the per-view fit
    targets (useful as composite targets for later refinement).
    """
    gid = int(group_id)
    if gid not in scene.groups:
        raise UnknownGroupError(f"unknown group id {gid}")
    oracle = oracle or HarmonicInpaint()
    cams = _cameras_of(views)
    class_id = scene.groups[gid].class_id

    footprints = [dilate_mask(group_footprint(scene, gid, cam), dilation)
                  for cam in cams]
    bbox = scene.group_bbox(gid, pad_sigma=True)
    scene.delete_gaussians(gid)

    plates = []
    for cam, foot in zip(cams, footprints):
        holed = rasterize(scene, cam, channels=("color",)).color
        plates.append(oracle(holed, foot))

    block = scene.spawn_near(bbox, int(fill_count), seed)
    fill_gid = scene.insert_gaussians(block, "fill", class_id=class_id,
                                      rng=np.random.default_rng(seed))
    row_mask = np.zeros(scene.n, dtype=bool)
    row_mask[scene.groups[fill_gid].indices] = True
    fit_views = [FitView(camera=cam, image=plate)
                 for cam, plate in zip(cams, plates)]
    cfg = FitConfig(iterations=int(iters), seed=seed, row_mask=row_mask,
                    train_head=False, probe_view=None)
    fit(scene, fit_views, cfg, LossWeights(render=1.0, semantic=0.0, consistency=0.0))
    return fill_gid, plates


# -- insertion ----------------------------------------------------------------

def harmonize_region(image, mask, ring_width=10, max_shift=20.0):
    """Shift a region's Lab statistics toward its surrounding ring.

    Mean and standard deviation of each Lab channel inside `mask` are
    matched to those of the `ring_width`-px ring around it, with the
    per-pixel adjustment clamped to `max_shift` Lab units per channel.
    Pixels outside the mask are returned unchanged.
    """
    img = np.array(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return img
    ring = dilate_mask(mask, ring_width) & ~mask
    if not ring.any():
        return img
    lab = rgb_to_lab(np.clip(img, 0.0, 1.0))
    src = lab[mask]
    ref = lab[ring]
    mu_s, sd_s = src.mean(axis=0), src.std(axis=0)
    mu_r, sd_r = ref.mean(axis=0), ref.std(axis=0)
    scale = np.where(sd_s > 1e-9, sd_r / np.maximum(sd_s, 1e-9), 1.0)
    target = (src - mu_s) * scale + mu_r
    shifted = src + np.clip(target - src, -max_shift, max_shift)
    lab[mask] = shifted
    out = np.clip(lab_to_rgb(lab), 0.0, 1.0)
    img[mask] = out[mask]
    return img


def insert_object(scene, asset, position, scale, views, pose=None,
                  iters=300, seed=0, ring_width=10, max_shift=20.0):
    """Place an asset and blend its colors into the scene.

    The canonical block is scaled about the origin, optionally rotated by
    the unit quaternion `pose`, and translated to `position`; it enters the
    scene as a new group with a fresh semantic class.  Each view is then
    rendered, the inserted solid region harmonized toward its surroundings,
    and the new group's SH coefficients fitted against the harmonized
    plates (pixel mask = solid region).  Background guarantee: pixels
    outside the inserted footprint change by at most the footprint weight
    bound since only the new group's SH moves.

    Returns (group_id, plates).
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    block = asset.copy_block()
    if block["mu4"].shape[0] == 0:
        raise ValueError("asset Gaussian block is empty")
    position = np.asarray(position, dtype=np.float64).reshape(3)

    xyz = block["mu4"][:, :3].astype(np.float64) * float(scale)
    if pose is not None:
        from .core_math import normalize_quat, quat_conjugate, quat_multiply, quat_to_rotmat
        q = normalize_quat(np.asarray(pose, dtype=np.float64).reshape(4))
        xyz = xyz @ quat_to_rotmat(q).T
        block["q_left"] = quat_multiply(q, block["q_left"].astype(np.float64)).astype(np.float32)
        block["q_right"] = quat_multiply(block["q_right"].astype(np.float64),
                                         quat_conjugate(q)).astype(np.float32)
    block["mu4"][:, :3] = (xyz + position).astype(np.float32)
    block["mu4"][:, 3] = np.float32(scene.mid_time())
    block["log_scales"][:, :3] += np.float32(np.log(float(scale)))

    gid = scene.insert_gaussians(block, asset.label, attributes=asset.attributes,
                                 rng=np.random.default_rng(seed))
    cams = _cameras_of(views)
    plates, solids = [], []
    for cam in cams:
        img = rasterize(scene, cam, channels=("color",)).color
        solid = render_object_mask(scene, gid, cam) > SOLID_THRESHOLD
        plates.append(harmonize_region(img, solid, ring_width, max_shift))
        solids.append(solid)

    row_mask = np.zeros(scene.n, dtype=bool)
    row_mask[scene.groups[gid].indices] = True
    fit_views = [FitView(camera=cam, image=plate, pixel_mask=solid)
                 for cam, plate, solid in zip(cams, plates, solids)]
    cfg = FitConfig(iterations=int(iters), seed=seed, param_blocks=("sh",),
                    row_mask=row_mask, train_head=False, probe_view=None)
    fit(scene, fit_views, cfg, LossWeights(render=1.0, semantic=0.0, consistency=0.0))
    return gid, plates


# -- geometric and color edits ------------------------------------------------

def resize_object(scene, group_id, factor, pivot=None):
    """Scale a group about a pivot (default: its centroid).

    Positions map to pivot + factor * (mu - pivot); spatial log-scales get
    += ln(factor); temporal components and rotations stay untouched.
    factor == 1.0 is an exact no-op (bit-identical scene).
    """
    factor = float(factor)
    if factor <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    idx = scene.select_group(int(group_id))
    if factor == 1.0:
        return scene
    if pivot is None:
        pivot = scene.mu4[idx, :3].astype(np.float64).mean(axis=0)
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    mu = scene.mu4[idx, :3].astype(np.float64)
    scene.mu4[idx, :3] = (pivot + factor * (mu - pivot)).astype(np.float32)
    ls = scene.log_scales[idx, :3].astype(np.float64) + np.log(factor)
    scene.log_scales[idx, :3] = ls.astype(np.float32)
    return scene


def move_object(scene, group_id, target, views, inpaint_oracle=None,
                fill_count=2000, iters=500, seed=0):
    """Relocate a group: removal at the source plus insertion at the target.

    The group's block is snapshotted as an in-memory asset (canonical pose,
    so a moving object is frozen at the scene mid time), healed out of its
    source location per the removal contract, and re-inserted at `target`
    with its original size; both sub-operator postconditions apply.

    Returns (new_group_id, plates) with the removal plates.
    """
    gid = int(group_id)
    idx = scene.select_group(gid)
    if idx.size == 0:
        raise UnknownGroupError(f"group {gid} is empty or deleted")
    group = scene.groups[gid]
    snapshot = {name: getattr(scene, name)[idx].copy()
                for name in ("mu4", "q_left", "q_right", "log_scales",
                             "opacity_logit", "sh", "identity")}
    xyz = snapshot["mu4"][:, :3].astype(np.float64)
    extent = float((xyz.max(axis=0) - xyz.min(axis=0)).max()) if len(xyz) > 1 else 0.0
    asset = Asset(asset_id=f"moved-{gid}", label=group.label,
                  attributes=dict(group.attributes),
                  block=canonicalize_block(snapshot), provenance="library",
                  sh_degree=scene.sh_degree)

    _, plates = remove_object(scene, gid, views, oracle=inpaint_oracle,
                              fill_count=fill_count, iters=iters, seed=seed)
    new_gid, _ = insert_object(scene, asset, target,
                               scale=extent if extent > 0 else 1.0,
                               views=views, iters=iters, seed=seed)
    return new_gid, plates


def recolor_object(scene, group_id, target_rgb):
    """Replace a group's chroma while preserving per-Gaussian lightness.

    Each Gaussian's base (degree-0) color moves to the target's (a, b) in
    CIELAB with its own L kept; higher SH bands are scaled by 0.25 to damp
    view-dependent residue of the old hue.  Other groups stay bit-identical.
    """
    idx = scene.select_group(int(group_id))
    if idx.size == 0:
        return scene
    target = np.asarray(target_rgb, dtype=np.float64).reshape(3)
    target_ab = rgb_to_lab(target)[1:]

    dc = scene.sh[idx, 0, :].astype(np.float64)
    rgb = np.clip(SH_C0 * dc + 0.5, 0.0, 1.0)
    lab = rgb_to_lab(rgb)
    lab[:, 1:] = target_ab
    new_rgb = np.clip(lab_to_rgb(lab), 0.0, 1.0)
    scene.sh[idx, 0, :] = ((new_rgb - 0.5) / SH_C0).astype(np.float32)
    if scene.sh.shape[1] > 1:
        scene.sh[idx, 1:, :] *= np.float32(0.25)
    return scene


def retexture_object(scene, group_id, reference_image, views, iters=300,
                     weights=(1.0, 1.0), seed=0, extractor=None):
    """Transfer the reference image's local texture onto a group.

    Runs the masked feature-matching loss per view for `iters` iterations,
    training only the group's SH coefficients; pixels outside the object's
    solid mask are tied to the pre-edit renders.

    Returns a trace list of per-iteration loss parts.
    """
    gid = int(group_id)
    idx = scene.select_group(gid)
    if idx.size == 0:
        raise UnknownGroupError(f"group {gid} is empty or deleted")
    extractor = extractor or PatchPyramidExtractor()
    bank = extractor.extract(np.asarray(reference_image, dtype=np.float64))[0]
    bank_flat = bank.values.reshape(-1, bank.channels)

    cams = _cameras_of(views)
    pre_renders = [rasterize(scene, cam, channels=("color",)).color for cam in cams]

    rng = np.random.default_rng(seed)
    state = AdamState()
    lr = default_lr_table()
    row_mask = np.zeros(scene.n, dtype=bool)
    row_mask[idx] = True
    trace = []
    for it in range(int(iters)):
        vi = int(rng.integers(len(cams)))
        total, parts, bundle = nnfm_3d_loss(
            scene, cams[vi], gid, bank_flat, pre_renders[vi], extractor,
            weights=weights, mask_threshold=SOLID_THRESHOLD)
        adam_step({"sh": scene.sh}, {"sh": bundle.sh}, state, lr,
                  {"sh": row_mask})
        trace.append({"iteration": it + 1, "loss_total": total,
                      "nnfm": parts["nnfm"], "mse_out": parts["mse_out"]})
    return trace


# -- refinement ---------------------------------------------------------------

def refine_scene(scene, views, touched_groups, iters=500, seed=0):
    """Polish the groups touched in a session against composite targets.

    Fits all parameter blocks of the touched groups' Gaussians against the
    given views (captured views with edited regions already replaced by
    their operator targets).  Keeps whichever of (before, after) has the
    lower mean composite MSE, so refinement never degrades the targets.
    Empty `touched_groups` is a no-op.

    Returns the mean composite MSE after the call.
    """
    touched = [g for g in touched_groups
               if isinstance(g, (int, np.integer)) and int(g) in scene.groups]
    cams = _cameras_of(views)

    def composite_mse(s):
        losses = []
        for cam, view in zip(cams, views):
            out = rasterize(s, cam, channels=("color",)).color
            losses.append(mse_loss(out, view.image)[0])
        return float(np.mean(losses)) if losses else 0.0

    if not touched or not views:
        return composite_mse(scene)

    before = composite_mse(scene)
    snapshot = scene.copy()
    row_mask = np.zeros(scene.n, dtype=bool)
    for g in touched:
        row_mask[scene.groups[int(g)].indices] = True
    cfg = FitConfig(iterations=int(iters), seed=seed, row_mask=row_mask,
                    train_head=False, probe_view=None)
    fit(scene, list(views), cfg,
        LossWeights(render=1.0, semantic=0.0, consistency=0.0))
    after = composite_mse(scene)
    if after > before:
        # roll back: refinement must never make the composite worse
        for name in ("mu4", "q_left", "q_right", "log_scales",
                     "opacity_logit", "sh", "identity"):
            setattr(scene, name, getattr(snapshot, name))
        scene.head = snapshot.head
        return before
    return after
