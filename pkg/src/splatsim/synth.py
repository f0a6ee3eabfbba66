"""Synthetic labeled scenes, camera rigs, and view bundles.

Everything here is deterministic under a seed: blob scenes with known
group labels, ring cameras, reference-rendered views with per-pixel class
labels, and disk bundles (views.json plus 8-bit images and 16-bit label
planes).  These are the ground-truth generators behind the benchmarks and
the regression suite.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core_math import SH_C0, Camera, rot4d_to_pair, sh_coeff_count
from .errors import SceneFormatError
from .imgio import load_image, load_labels, save_image, save_labels
from .operators import SegmentOracle
from .render import rasterize
from .scene import (
    IDENTITY_INIT_STD,
    TIME_FLAT_LOG_SCALE,
    SceneModel,
)
from .training import FitView

__all__ = [
    "BlobSpec",
    "ColorBoxDetector",
    "build_scene",
    "editing_scene",
    "fit_benchmark",
    "label_plane",
    "load_view_bundle",
    "moving_scene",
    "gradcheck_scene",
    "perturb_scene",
    "random_scene",
    "render_views",
    "ring_cameras",
    "save_view_bundle",
    "two_part_scene",
]


# -- scene construction ---------------------------------------------------------

@dataclass(frozen=True)
class BlobSpec:
    """One labeled group: a cluster of Gaussians on a fuzzy ball.

    `flatten` scales the cluster's spatial axes (thin slabs, plates);
    `velocity` gives exact linear motion of the conditioned means in world
    units per unit time.  `parts` adds extra differently-colored
    sub-clusters that stay inside the same group (one semantic object
    with visually distinct parts).
    """

    label: str
    center: tuple
    radius: float = 0.2
    count: int = 80
    color: tuple = (0.7, 0.3, 0.3)
    flatten: tuple = (1.0, 1.0, 1.0)
    velocity: tuple | None = None
    color_jitter: float = 0.04
    opacity: float = 2.5
    attributes: dict = field(default_factory=dict)
    parts: tuple = ()  # ((offset, radius, count, color), ...)


def _motion_pair(sigmas3, sigma_t, velocity):
    """Rotor pair and log-scales whose 4D covariance moves at `velocity`.

    Covariance of (x0 + v * tau, tau) with x0 ~ N(0, diag(sigmas3^2)) and
    tau ~ N(0, sigma_t^2): conditioning on time then gives mean trajectory
    mu + v (t - mu_t) and a time-independent spatial covariance.
    """
    v = np.asarray(velocity, dtype=np.float64).reshape(3)
    s3 = np.asarray(sigmas3, dtype=np.float64).reshape(3)
    st2 = float(sigma_t) ** 2
    cov4 = np.zeros((4, 4))
    cov4[:3, :3] = np.diag(s3 ** 2) + np.outer(v, v) * st2
    cov4[:3, 3] = v * st2
    cov4[3, :3] = v * st2
    cov4[3, 3] = st2
    evals, evecs = np.linalg.eigh(cov4)
    if np.linalg.det(evecs) < 0:
        evecs[:, 0] = -evecs[:, 0]
    q_left, q_right = rot4d_to_pair(evecs)
    return q_left, q_right, 0.5 * np.log(evals)


def _cluster_points(center, radius, count, flatten, rng):
    u = rng.normal(size=(count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / 3.0)
    return np.asarray(center) + u * r * np.asarray(flatten)


def _blob_block(spec, rng, sh_degree, identity_dim, time_range):
    pieces = [(np.zeros(3), spec.radius, spec.count, spec.color)]
    pieces += [tuple(p) for p in spec.parts]
    t0, t1 = time_range
    mid = 0.5 * (t0 + t1)

    pts, colors, sizes = [], [], []
    for offset, radius, count, color in pieces:
        center = np.asarray(spec.center, dtype=np.float64) + np.asarray(offset)
        pts.append(_cluster_points(center, radius, int(count), spec.flatten, rng))
        jitter = rng.normal(0.0, spec.color_jitter, size=(int(count), 3))
        colors.append(np.clip(np.asarray(color) + jitter, 0.02, 0.98))
        # splat size ~ cluster spacing so the surface closes up
        sizes.append(np.full(int(count), radius * 1.6 / max(count, 1) ** (1 / 3)))
    pts = np.concatenate(pts)
    colors = np.concatenate(colors)
    sizes = np.concatenate(sizes)
    n = len(pts)

    mu4 = np.zeros((n, 4), dtype=np.float32)
    mu4[:, :3] = pts.astype(np.float32)
    mu4[:, 3] = np.float32(mid)
    k = sh_coeff_count(sh_degree)
    sh = np.zeros((n, k, 3), dtype=np.float32)
    sh[:, 0] = ((colors - 0.5) / SH_C0).astype(np.float32)

    log_scales = np.zeros((n, 4), dtype=np.float32)
    quat = np.zeros((n, 4), dtype=np.float32)
    quat[:, 0] = 1.0
    q_left, q_right = quat, quat.copy()
    if spec.velocity is None:
        log_scales[:, :3] = np.log(sizes)[:, None] * np.ones((1, 3))
        log_scales[:, :3] += np.log(np.asarray(spec.flatten, dtype=np.float64))[None, :].astype(np.float32)
        log_scales[:, 3] = TIME_FLAT_LOG_SCALE
    else:
        sigma_t = 0.35 * (t1 - t0)
        for i in range(n):
            s3 = sizes[i] * np.asarray(spec.flatten, dtype=np.float64)
            ql, qr, ls = _motion_pair(s3, sigma_t, spec.velocity)
            q_left[i] = ql.astype(np.float32)
            q_right[i] = qr.astype(np.float32)
            log_scales[i] = ls.astype(np.float32)

    return {
        "mu4": mu4,
        "q_left": q_left,
        "q_right": q_right,
        "log_scales": log_scales,
        "opacity_logit": np.full(n, spec.opacity, dtype=np.float32),
        "sh": sh,
        "identity": rng.normal(0.0, IDENTITY_INIT_STD, (n, identity_dim)).astype(np.float32),
    }


def build_scene(blobs, seed=42, sh_degree=2, identity_dim=16,
                time_range=(0.0, 1.0), background=(0.05, 0.05, 0.08)):
    """Assemble labeled blobs into a scene; one group per blob."""
    scene = SceneModel.empty(sh_degree=sh_degree, identity_dim=identity_dim,
                             time_range=time_range)
    scene.background = np.asarray(background, dtype=np.float32).reshape(3)
    rng = np.random.default_rng(seed)
    for spec in blobs:
        block = _blob_block(spec, rng, sh_degree, identity_dim, time_range)
        scene.insert_gaussians(block, spec.label, attributes=dict(spec.attributes))
    return scene


# -- cameras and rendered views --------------------------------------------------

def ring_cameras(center, radius, n, image_size=(64, 64), fov_x_deg=60.0,
                 z_amp=0.3, times=None, time_range=(0.0, 1.0)):
    """n cameras on a wavy ring looking at `center`.

    Camera timestamps default to an even spread over `time_range` so a
    dynamic scene is observed across its whole span.
    """
    center = np.asarray(center, dtype=np.float64)
    w, h = int(image_size[0]), int(image_size[1])
    if times is None:
        t0, t1 = time_range
        times = [t0 + (t1 - t0) * (k / max(n - 1, 1)) for k in range(n)]
    cams = []
    for k in range(n):
        ang = 2.0 * math.pi * k / n + 0.3
        eye = center + np.array([radius * math.cos(ang), radius * math.sin(ang),
                                 radius * z_amp * math.sin(3.0 * ang + 1.0) + 0.35 * radius])
        cams.append(Camera.look_at(eye, center, width=w, height=h,
                                   fov_x_deg=fov_x_deg, time=float(times[k])))
    return cams


def label_plane(scene, cam, t=None, alpha_min=0.5):
    """Per-pixel semantic class ids (-1 where the scene is see-through).

    A pixel gets the class of the group with the largest composited
    contribution, provided total alpha exceeds alpha_min.
    """
    gids = sorted(scene.groups)
    out = rasterize(scene, cam, channels=("alpha",), mask_groups=gids, t=t)
    labels = np.full((cam.height, cam.width), -1, dtype=np.int32)
    if not gids:
        return labels
    stack = np.stack([out.masks[g] for g in gids])
    winner = np.argmax(stack, axis=0)
    solid = out.alpha > alpha_min
    classes = np.asarray([scene.groups[g].class_id for g in gids], dtype=np.int32)
    labels[solid] = classes[winner[solid]]
    return labels


def render_views(scene, cams, with_labels=True):
    """Reference-render FitViews (images plus label planes) for cameras."""
    views = []
    for cam in cams:
        img = rasterize(scene, cam, channels=("color",)).color
        labels = label_plane(scene, cam) if with_labels else None
        views.append(FitView(camera=cam, image=img, labels=labels))
    return views


def save_view_bundle(out_dir, views):
    """Write views.json plus per-view PNG images and 16-bit label planes."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for i, view in enumerate(views):
        entry = {"camera": view.camera.to_dict(), "image": f"view_{i:03d}.png"}
        save_image(os.path.join(out_dir, entry["image"]), view.image)
        if view.labels is not None:
            entry["labels"] = f"view_{i:03d}_labels.png"
            save_labels(os.path.join(out_dir, entry["labels"]), view.labels)
        manifest.append(entry)
    with open(os.path.join(out_dir, "views.json"), "w", encoding="utf-8") as fh:
        json.dump({"views": manifest}, fh, indent=1)
    return os.path.join(out_dir, "views.json")


def load_view_bundle(path):
    """Read a view bundle from views.json (or its directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, "views.json")
    if not os.path.exists(path):
        raise SceneFormatError(f"no view manifest at {path}")
    root = os.path.dirname(path)
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    views = []
    for entry in manifest["views"]:
        cam = Camera.from_dict(entry["camera"])
        img = load_image(os.path.join(root, entry["image"]))
        labels = None
        if entry.get("labels"):
            labels = load_labels(os.path.join(root, entry["labels"]))
        views.append(FitView(camera=cam, image=img, labels=labels))
    return views


def perturb_scene(scene, seed, pos=0.02, log_scale=0.1, quat=0.05,
                  opacity=0.4, sh=0.12, identity=0.0):
    """Noisy copy of a scene: the recovery start point for fit benchmarks."""
    out = scene.copy()
    rng = np.random.default_rng(seed)
    out.mu4[:, :3] += rng.normal(0, pos, (out.n, 3)).astype(np.float32)
    out.log_scales[:, :3] += rng.normal(0, log_scale, (out.n, 3)).astype(np.float32)
    out.q_left += rng.normal(0, quat, (out.n, 4)).astype(np.float32)
    out.q_right += rng.normal(0, quat, (out.n, 4)).astype(np.float32)
    out.opacity_logit += rng.normal(0, opacity, out.n).astype(np.float32)
    out.sh += rng.normal(0, sh, out.sh.shape).astype(np.float32)
    if identity > 0:
        out.identity += rng.normal(0, identity, out.identity.shape).astype(np.float32)
    out.validate()
    return out


# -- preset scenes ----------------------------------------------------------------

def editing_scene(seed=42, n_views=8, image_size=(64, 64)):
    """Labeled tabletop: distinct colored objects over a thin floor slab."""
    blobs = [
        BlobSpec(label="floor", center=(0.0, 0.0, -0.25), radius=0.85, count=600,
                 color=(0.45, 0.42, 0.4), flatten=(1.0, 1.0, 0.08),
                 attributes={"type": "floor"}),
        BlobSpec(label="red cup", center=(0.25, 0.18, 0.02), radius=0.16, count=140,
                 color=(0.8, 0.15, 0.15), attributes={"type": "cup", "color": "red"}),
        BlobSpec(label="green box", center=(-0.3, -0.05, 0.0), radius=0.18, count=140,
                 color=(0.15, 0.7, 0.2), attributes={"type": "box", "color": "green"}),
        BlobSpec(label="blue ball", center=(0.0, -0.33, -0.02), radius=0.13, count=110,
                 color=(0.15, 0.25, 0.8), attributes={"type": "ball", "color": "blue"}),
    ]
    scene = build_scene(blobs, seed=seed)
    cams = ring_cameras((0.0, 0.0, 0.0), radius=1.45, n=n_views,
                        image_size=image_size)
    return scene, render_views(scene, cams)


def two_part_scene(seed=42, n_views=6, image_size=(64, 64)):
    """One two-part object (body plus a distinctly colored handle) and a floor."""
    blobs = [
        BlobSpec(label="floor", center=(0.0, 0.0, -0.3), radius=0.8, count=500,
                 color=(0.5, 0.47, 0.45), flatten=(1.0, 1.0, 0.08),
                 attributes={"type": "floor"}),
        BlobSpec(label="blue mug", center=(0.0, 0.0, 0.0), radius=0.2, count=200,
                 color=(0.15, 0.25, 0.8),
                 attributes={"type": "mug", "color": "blue"},
                 parts=(((0.28, 0.0, 0.02), 0.09, 90, (0.85, 0.8, 0.15)),)),
    ]
    scene = build_scene(blobs, seed=seed)
    cams = ring_cameras((0.0, 0.0, -0.05), radius=1.35, n=n_views,
                        image_size=image_size, z_amp=0.45)
    return scene, render_views(scene, cams)


def moving_scene(seed=42, n_views=8, image_size=(64, 64), velocity=(0.5, 0.0, 0.0)):
    """A dynamic blob crossing a static backdrop; exact linear motion."""
    blobs = [
        BlobSpec(label="backdrop", center=(0.0, 0.0, -0.3), radius=0.8, count=400,
                 color=(0.5, 0.48, 0.45), flatten=(1.0, 1.0, 0.08)),
        BlobSpec(label="drifting ball", center=(-0.25, 0.0, 0.05), radius=0.14,
                 count=120, color=(0.85, 0.6, 0.1), velocity=velocity),
    ]
    scene = build_scene(blobs, seed=seed)
    cams = ring_cameras((0.0, 0.0, 0.0), radius=1.45, n=n_views,
                        image_size=image_size)
    return scene, render_views(scene, cams)


def fit_benchmark(seed=20, n_gaussians=50, n_views=9, image_size=(64, 64)):
    """Recovery benchmark: ground-truth blob scene plus ring cameras.

    Positions stay inside a bounded box well away from the camera ring so
    no Gaussian degenerates to a screen-filling splat.  views[:-1] are a
    training ring of n_views - 1 cameras; views[-1] is a held-out novel
    view halfway between the first two ring cameras, so scoring it tests
    interpolation rather than extrapolation into an unobserved arc.
    """
    rng = np.random.default_rng(seed)
    count = int(n_gaussians)
    scene = SceneModel.empty()
    block = {
        "mu4": np.concatenate([
            rng.uniform(-0.5, 0.5, (count, 2)),
            rng.uniform(-0.2, 0.4, (count, 1)),
            np.full((count, 1), 0.5)], axis=1).astype(np.float32),
        "q_left": np.tile(np.float32([1, 0, 0, 0]), (count, 1)),
        "q_right": np.tile(np.float32([1, 0, 0, 0]), (count, 1)),
        "log_scales": np.concatenate([
            rng.uniform(np.log(0.04), np.log(0.12), (count, 3)),
            np.full((count, 1), TIME_FLAT_LOG_SCALE)], axis=1).astype(np.float32),
        "opacity_logit": rng.uniform(0.5, 3.0, count).astype(np.float32),
        "sh": np.zeros((count, sh_coeff_count(2), 3), dtype=np.float32),
        "identity": rng.normal(0, IDENTITY_INIT_STD, (count, 16)).astype(np.float32),
    }
    block["sh"][:, 0] = ((rng.uniform(0.1, 0.9, (count, 3)) - 0.5) / SH_C0).astype(np.float32)
    scene.insert_gaussians(block, "blobs")
    center = np.array([0.0, 0.0, 0.1])
    radius, z_amp = 1.3, 0.25
    n_ring = int(n_views) - 1
    cams = ring_cameras(center, radius=radius, n=n_ring,
                        image_size=image_size, z_amp=z_amp)
    ang = 2.0 * math.pi * 0.5 / n_ring + 0.3
    eye = center + np.array([radius * math.cos(ang), radius * math.sin(ang),
                             radius * z_amp * math.sin(3.0 * ang + 1.0) + 0.35 * radius])
    cams.append(Camera.look_at(eye, center, width=int(image_size[0]),
                               height=int(image_size[1]), fov_x_deg=60.0,
                               time=0.5 * (cams[0].time + cams[1].time)))
    return scene, render_views(scene, cams)


def random_scene(seed, n=500, image_size=(64, 64), time_range=(0.0, 1.0)):
    """Adversarial random scene for renderer equivalence property tests.

    Draws unconstrained rotors, anisotropic scales, the full opacity
    range, off-screen and behind-camera positions, and mixed time-flat /
    time-extended Gaussians.  Returns (scene, cam).
    """
    rng = np.random.default_rng(seed)
    scene = SceneModel.empty(time_range=time_range)
    k = sh_coeff_count(2)

    mu4 = np.stack([
        rng.uniform(-0.9, 0.9, n),
        rng.uniform(-0.9, 0.9, n),
        rng.uniform(-0.6, 1.2, n),
        rng.uniform(*time_range, n)], axis=1).astype(np.float32)

    def unit_quats():
        q = rng.normal(size=(n, 4))
        return (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)

    log_scales = rng.uniform(np.log(0.02), np.log(0.25), (n, 4)).astype(np.float32)
    flat = rng.random(n) < 0.5  # half the scene is time-flat
    log_scales[flat, 3] = TIME_FLAT_LOG_SCALE
    q_left, q_right = unit_quats(), unit_quats()
    # unconstrained rotors on time-extended Gaussians mix space and time;
    # keep those near identity so conditioned footprints stay bounded
    for arr in (q_left, q_right):
        mild = np.concatenate([np.ones((n, 1)), rng.normal(0, 0.15, (n, 3))], axis=1)
        mild = (mild / np.linalg.norm(mild, axis=1, keepdims=True)).astype(np.float32)
        arr[~flat] = mild[~flat]

    sh = rng.normal(0.0, 0.25, (n, k, 3)).astype(np.float32)
    block = {
        "mu4": mu4,
        "q_left": q_left,
        "q_right": q_right,
        "log_scales": log_scales,
        "opacity_logit": rng.uniform(-4.0, 4.0, n).astype(np.float32),
        "sh": sh,
        "identity": rng.normal(0, 0.3, (n, 16)).astype(np.float32),
    }
    scene.insert_gaussians(block, "random")
    eye = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3) - 2.3,
                    rng.uniform(0.2, 0.9)])
    cam = Camera.look_at(eye, np.zeros(3), width=image_size[0],
                         height=image_size[1], fov_x_deg=55.0,
                         time=rng.uniform(*time_range))
    return scene, cam


def gradcheck_scene(seed=0, n=20, image_size=(32, 32)):
    """Scene built for finite-difference gradient verification.

    The composite is discontinuous at depth ties (front-to-back order
    swaps) and at transmittance termination, so FD probes are only
    meaningful away from those events: depths here are strictly separated
    (min gap ~0.05, far above any FD-induced motion), opacities are capped
    so no pixel ever terminates, and Gaussians carry temporal extent,
    slight 4D rotations, and off-center time means so every parameter
    block receives nonzero gradients.

    Returns (scene, cam, target) with a color-jittered render as target.
    """
    rng = np.random.default_rng(seed)
    scene = SceneModel.empty()
    k = sh_coeff_count(2)

    z = np.linspace(-0.3, 0.6, n)
    rng.shuffle(z)
    mu4 = np.stack([
        rng.uniform(-0.4, 0.4, n),
        rng.uniform(-0.4, 0.4, n),
        z,
        rng.uniform(0.3, 0.7, n)], axis=1).astype(np.float32)

    def small_quats():
        q = np.concatenate([np.ones((n, 1)), rng.normal(0, 0.1, (n, 3))], axis=1)
        return (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)

    log_scales = np.concatenate([
        rng.uniform(np.log(0.05), np.log(0.1), (n, 3)),
        rng.uniform(np.log(0.5), np.log(1.0), (n, 1))], axis=1).astype(np.float32)

    sh = rng.normal(0.0, 0.05, (n, k, 3)).astype(np.float32)
    sh[:, 0] = ((rng.uniform(0.15, 0.85, (n, 3)) - 0.5) / SH_C0).astype(np.float32)

    block = {
        "mu4": mu4,
        "q_left": small_quats(),
        "q_right": small_quats(),
        "log_scales": log_scales,
        "opacity_logit": rng.uniform(-0.8, 0.8, n).astype(np.float32),
        "sh": sh,
        "identity": rng.normal(0, IDENTITY_INIT_STD, (n, 16)).astype(np.float32),
    }
    scene.insert_gaussians(block, "probe")
    cam = Camera.look_at(np.array([0.0, -0.15, 2.2]), np.zeros(3),
                         width=image_size[0], height=image_size[1],
                         fov_x_deg=50.0, time=0.5)
    jittered = scene.copy()
    jittered.sh = (jittered.sh + rng.normal(0, 0.08, jittered.sh.shape)).astype(np.float32)
    target = rasterize(jittered, cam, channels=("color",)).color
    return scene, cam, target


# -- synthetic detector oracle ----------------------------------------------------

class ColorBoxDetector(SegmentOracle):
    """Color-keyed stand-in for a learned open-vocabulary detector.

    Maps phrases to RGB keys; detection masks are the pixels within `tol`
    (max-channel distance) of the key color.  Purely image-space, so it
    works on any rendered view without scene knowledge.
    """

    def __init__(self, phrase_colors, tol=0.22, min_pixels=4):
        self.phrase_colors = {k: np.asarray(v, dtype=np.float64)
                              for k, v in phrase_colors.items()}
        self.tol = float(tol)
        self.min_pixels = int(min_pixels)

    def detect(self, image, phrase):
        key = None
        for name, rgb in self.phrase_colors.items():
            if name in phrase or phrase in name:
                key = rgb
                break
        if key is None:
            return None
        img = np.asarray(image, dtype=np.float64)
        mask = np.abs(img - key).max(axis=-1) < self.tol
        if mask.sum() < self.min_pixels:
            return None
        ys, xs = np.nonzero(mask)
        box = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
        conf = float(mask.mean())
        return box, mask, conf

    def mask_from_box(self, image, box):
        mask = np.zeros(np.asarray(image).shape[:2], dtype=bool)
        i0, j0, i1, j1 = box
        mask[i0:i1, j0:j1] = True
        return mask
