"""Command-line interface.

Subcommands: synth (generate labeled scenes and view bundles), fit
(reconstruct a scene from a bundle), edit (run scripts against a scene,
optionally as a REPL), render (dump frames or feature PCA images),
inspect (scene summary), check (built-in verification).

Exit codes: 0 success, 1 user error (bad arguments, bad inputs, script
errors), 2 internal invariant failure (verification failures, unexpected
exceptions).  SPLATSIM_THREADS caps BLAS threads for reproducible timing.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import synth
from .errors import SplatError
from .imgio import feature_pca_image, save_image
from .render import rasterize, rasterize_reference
from .scene import SceneModel, TIME_FLAT_LOG_SCALE
from .sceneio import load_scene, save_scene
from .simlang import Budgets, Session, camera_from_spec
from .training import FitConfig, LossWeights, fit, write_trace_csv
from .training.gradcheck import gradcheck
from .core_math import SH_C0, sh_coeff_count


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _parse_frames(text):
    try:
        if ".." in text:
            a, b = text.split("..")
            first, last = int(a), int(b)
        else:
            first = last = int(text)
    except ValueError as exc:
        raise UsageError(f"bad --frames {text!r}; expected A..B") from exc
    if first < 0 or last < first:
        raise UsageError(f"bad --frames {text!r}; need 0 <= first <= last")
    return first, last


# -- synth ------------------------------------------------------------------------

_PRESETS = {
    "editing": synth.editing_scene,
    "two_part": synth.two_part_scene,
    "moving": synth.moving_scene,
    "fit_benchmark": synth.fit_benchmark,
}


def cmd_synth(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 42)
    out = args.out or cfg.get("out")
    if out is None:
        raise UsageError("synth needs --out")

    if "blobs" in cfg:
        blobs = [synth.BlobSpec(**b) for b in cfg["blobs"]]
        scene = synth.build_scene(
            blobs, seed=seed, time_range=tuple(cfg.get("time_range", (0.0, 1.0))))
        cam_cfg = cfg.get("cameras", {})
        cams = synth.ring_cameras(
            tuple(cam_cfg.get("center", (0.0, 0.0, 0.0))),
            radius=cam_cfg.get("radius", 1.45),
            n=cam_cfg.get("count", 8),
            image_size=tuple(cfg.get("image_size", (64, 64))),
            time_range=tuple(cfg.get("time_range", (0.0, 1.0))))
        views = synth.render_views(scene, cams)
    else:
        preset = cfg.get("preset", "editing")
        if preset not in _PRESETS:
            raise UsageError(
                f"unknown preset {preset!r}; have {sorted(_PRESETS)}")
        kwargs = {k: v for k, v in cfg.items()
                  if k in ("n_views", "image_size", "velocity", "n_gaussians")}
        if "image_size" in kwargs:
            kwargs["image_size"] = tuple(kwargs["image_size"])
        if "velocity" in kwargs:
            kwargs["velocity"] = tuple(kwargs["velocity"])
        scene, views = _PRESETS[preset](seed=seed, **kwargs)

    os.makedirs(out, exist_ok=True)
    scene_path = os.path.join(out, "scene.rprl")
    save_scene(scene, scene_path)
    manifest = synth.save_view_bundle(os.path.join(out, "views"), views)
    print(f"scene: {scene_path} ({scene.n} Gaussians, {len(scene.groups)} groups)")
    print(f"views: {manifest} ({len(views)} views)")
    return 0


# -- fit --------------------------------------------------------------------------

def _frustum_union_init(views, count, seed, sh_degree=2, identity_dim=16,
                        time_range=(0.0, 1.0), dynamic=False):
    """Seed scene: positions sampled uniformly over the union of view
    frustums (pick a view, a pixel, and a bounded depth; unproject), colors
    from the chosen pixel, sizes from the local sample spacing."""
    rng = np.random.default_rng(seed)
    cams = [v.camera for v in views]
    centers = np.array([c.cam_center() for c in cams])
    centroid = centers.mean(axis=0)
    dists = np.linalg.norm(centers - centroid, axis=1)

    pts = np.empty((count, 3))
    cols = np.empty((count, 3))
    for i in range(count):
        k = int(rng.integers(len(cams)))
        cam = cams[k]
        px = rng.uniform(0, cam.width)
        py = rng.uniform(0, cam.height)
        depth = dists[k] * rng.uniform(0.45, 1.6)
        d_cam = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0])
        pts[i] = cam.R.T @ (d_cam * depth - cam.t)
        img = views[k].image
        cols[i] = img[min(int(py), cam.height - 1), min(int(px), cam.width - 1)]

    spacing = 1.2 * float(dists.mean()) / max(count, 1) ** (1.0 / 3.0)
    t0, t1 = time_range
    scene = SceneModel.empty(sh_degree=sh_degree, identity_dim=identity_dim,
                             time_range=time_range)
    k_sh = sh_coeff_count(sh_degree)
    quat = np.zeros((count, 4), dtype=np.float32)
    quat[:, 0] = 1.0
    log_scales = np.full((count, 4), np.log(spacing), dtype=np.float32)
    mu_t = np.full(count, 0.5 * (t0 + t1))
    if dynamic:
        log_scales[:, 3] = np.float32(np.log(0.4 * (t1 - t0)))
        mu_t = rng.uniform(t0, t1, count)
    else:
        log_scales[:, 3] = TIME_FLAT_LOG_SCALE
    sh = np.zeros((count, k_sh, 3), dtype=np.float32)
    sh[:, 0] = ((cols - 0.5) / SH_C0).astype(np.float32)
    block = {
        "mu4": np.concatenate([pts, mu_t[:, None]], axis=1).astype(np.float32),
        "q_left": quat,
        "q_right": quat.copy(),
        "log_scales": log_scales,
        "opacity_logit": np.full(count, -1.0, dtype=np.float32),
        "sh": sh,
    }
    scene.insert_gaussians(block, "fit", rng=rng)
    return scene


def cmd_fit(args):
    if not args.views:
        raise UsageError("fit needs --views")
    if not args.out:
        raise UsageError("fit needs --out")
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 42)
    views = synth.load_view_bundle(args.views)

    scene = _frustum_union_init(
        views, count=int(cfg.get("n_init", 400)), seed=seed,
        sh_degree=int(cfg.get("sh_degree", 2)),
        identity_dim=int(cfg.get("identity_dim", 16)),
        time_range=tuple(cfg.get("time_range", (0.0, 1.0))),
        dynamic=bool(cfg.get("dynamic", False)))

    labeled = any(v.labels is not None for v in views)
    if labeled:
        n_classes = max(int(v.labels.max()) for v in views
                        if v.labels is not None) + 1
        while scene.head.n_classes < n_classes:
            scene.head.add_class()

    weights = LossWeights(**cfg.get("weights", {})) if "weights" in cfg else \
        LossWeights(render=1.0, semantic=1.0 if labeled else 0.0, consistency=2.0)
    fit_cfg = FitConfig(
        iterations=int(cfg.get("iterations", 2000)), seed=seed,
        lr=cfg.get("lr", {}),
        densify=bool(cfg.get("densify", True)),
        probe_view=0, probe_every=int(cfg.get("probe_every", 200)))
    result = fit(scene, views, fit_cfg, weights)

    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_scene(scene, args.out)
    trace_path = os.path.splitext(args.out)[0] + "_trace.csv"
    write_trace_csv(result.trace, trace_path)
    print(f"fitted {result.n_gaussians} Gaussians; final loss {result.final_loss:.6f}"
          + (f"; probe psnr {result.probe_psnr:.2f} dB" if result.probe_psnr else ""))
    print(f"scene: {args.out}\ntrace: {trace_path}")
    return 0


# -- edit -------------------------------------------------------------------------

def _make_session(args, cfg):
    if not args.scene:
        raise UsageError("edit needs --scene")
    if not args.views:
        raise UsageError("edit needs --views")
    scene = load_scene(args.scene)
    views = synth.load_view_bundle(args.views)
    seed = args.seed if args.seed is not None else cfg.get("seed", 42)
    budgets = Budgets(**cfg.get("budgets", {}))
    return Session(scene, views, seed=seed, budgets=budgets,
                   out_dir=args.out, fps=float(cfg.get("fps", 10.0)),
                   resource_root=cfg.get("resource_root", "."),
                   keep_images=False)


def cmd_edit(args):
    cfg = _load_config(args.config)
    session = _make_session(args, cfg)

    if args.repl:
        print("splatsim edit REPL; one statement per line, 'exit' to finish.")
        for line in sys.stdin:
            line = line.strip()
            if line in ("exit", "quit"):
                break
            if not line:
                continue
            try:
                result = session.run(line)
                for rec in result.stages:
                    print("  " + _stage_line(rec))
            except SplatError as exc:
                print(f"error: {exc}", file=sys.stderr)
    else:
        if not args.script:
            raise UsageError("edit needs --script FILE or --repl")
        with open(args.script, encoding="utf-8") as fh:
            source = fh.read()
        result = session.run(source)
        for rec in result.stages:
            print(_stage_line(rec))

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        scene_path = os.path.join(args.out, "scene.rprl")
        save_scene(session.scene, scene_path)
        log_path = os.path.join(args.out, "edits.jsonl")
        session.save_log(log_path)
        print(f"scene: {scene_path}\nlog: {log_path}")
    return 0


def _stage_line(rec):
    extra = {k: v for k, v in rec.items() if k not in ("kind", "index", "stmt", "seed")}
    return f"[{rec['kind']}] {rec['stmt']}" + (f"  -> {extra}" if extra else "")


# -- render -----------------------------------------------------------------------

def cmd_render(args):
    if not args.scene:
        raise UsageError("render needs --scene")
    if not args.views:
        raise UsageError("render needs --views (for cameras)")
    if not args.out:
        raise UsageError("render needs --out")
    scene = load_scene(args.scene)
    views = synth.load_view_bundle(args.views)
    channels = tuple(args.channels.split(","))
    unknown = set(channels) - {"color", "feature"}
    if unknown:
        raise UsageError(f"unknown channels {sorted(unknown)}")

    t0, t1 = scene.time_range
    fps = args.fps
    if args.frames:
        first, last = _parse_frames(args.frames)
    else:
        first, last = 0, max(0, math.floor((t1 - t0) * fps))
    if args.camera:
        centroid = scene.positions3(scene.mid_time()).mean(axis=0) \
            if scene.n else np.zeros(3)
        cams = [camera_from_spec(args.camera, views[0].camera, centroid)]
    else:
        cams = [v.camera for v in views]

    os.makedirs(args.out, exist_ok=True)
    count = 0
    for k in range(first, last + 1):
        t = t0 + k / fps
        for ci, cam in enumerate(cams):
            out = rasterize(scene, cam, channels=channels, t=t)
            if "color" in channels:
                save_image(os.path.join(args.out, f"cam{ci:02d}_frame{k:04d}.png"),
                           out.color)
                count += 1
            if "feature" in channels:
                rgb, _ = feature_pca_image(out.feature)
                save_image(
                    os.path.join(args.out, f"cam{ci:02d}_frame{k:04d}_feature.png"),
                    rgb)
                count += 1
    print(f"wrote {count} images to {args.out}")
    return 0


# -- inspect ----------------------------------------------------------------------

def cmd_inspect(args):
    if not args.scene:
        raise UsageError("inspect needs --scene")
    scene = load_scene(args.scene)
    info = {
        "gaussians": scene.n,
        "sh_degree": scene.sh_degree,
        "identity_dim": scene.identity_dim,
        "time_range": list(scene.time_range),
        "head_classes": scene.head.n_classes,
        "background": [float(c) for c in scene.background],
        "groups": [
            {"id": g.gid, "label": g.label, "class_id": g.class_id,
             "count": int(len(g.indices)), "attributes": g.attributes}
            for g in sorted(scene.groups.values(), key=lambda g: g.gid)
        ],
    }
    if args.views:
        views = synth.load_view_bundle(args.views)
        info["views"] = [{"size": [v.camera.width, v.camera.height],
                          "time": v.camera.time,
                          "labeled": v.labels is not None} for v in views]
    json.dump(info, sys.stdout, indent=1)
    print()
    return 0


# -- check ------------------------------------------------------------------------

def cmd_check(args):
    failures = []

    def report(name, ok, detail):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            failures.append(name)

    n_seeds = 5 if args.quick else 20
    worst = 0.0
    for seed in range(n_seeds):
        scene, cam = synth.random_scene(seed, n=200 if args.quick else 500)
        a = rasterize(scene, cam, channels=("color", "alpha"))
        b = rasterize_reference(scene, cam, channels=("color", "alpha"))
        worst = max(worst, float(np.abs(a.color - b.color).max()),
                    float(np.abs(a.alpha - b.alpha).max()))
    report("oracle-equivalence", worst <= 1e-5,
           f"max |tiled - reference| = {worst:.2e} over {n_seeds} seeds (<= 1e-5)")

    scene, cam, target = synth.gradcheck_scene()
    frac, recs = gradcheck(scene, cam, target,
                           per_block=20 if args.quick else 50, seed=1)
    rest_ok = all(abs(r[3] - r[2]) <= 1e-5 for r in recs if not r[4])
    report("gradient-fd", frac >= 0.95 and rest_ok,
           f"rel-pass {frac:.3f} (>= 0.95), remainder abs <= 1e-5: {rest_ok}")

    import tempfile
    from .physics import MaterialParams, build_grid, gaussians_to_particles, mpm_step
    scene, cam = synth.random_scene(3, n=100)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "roundtrip.rprl")
        save_scene(scene, path)
        back = load_scene(path)
    report("scene-roundtrip", scene.equal_blocks(back),
           "save/load parameter blocks bit-identical")

    edit_scene, _ = synth.editing_scene(n_views=2)
    gids = sorted(edit_scene.groups)
    cam0 = synth.ring_cameras((0, 0, 0), 1.45, 1)[0]
    out = rasterize(edit_scene, cam0, channels=("alpha",), mask_groups=gids)
    total = sum(out.masks[g] for g in gids)
    gap = float(np.abs(total - out.alpha).max())
    report("mask-partition", gap <= 1e-6,
           f"sum of group masks vs alpha: {gap:.2e} (<= 1e-6)")

    mat = MaterialParams(density=1000.0, youngs=1e5, poisson=0.3)
    ps = gaussians_to_particles(edit_scene, gids[1], mat)
    grid = build_grid((ps.x.min(axis=0) - 0.1, ps.x.max(axis=0) + 0.1))
    drift = 0.0
    dt = 1e-4
    for _ in range(50):
        before = (ps.mass[:, None] * ps.v).sum(axis=0) \
            + ps.mass.sum() * np.array([0.0, 0.0, -9.8]) * dt
        ps = mpm_step(ps, grid, dt)
        after = (ps.mass[:, None] * ps.v).sum(axis=0)
        drift = max(drift, float(np.abs(after - before).max()))
    report("mpm-momentum", drift <= 1e-6,
           f"max per-step drift {drift:.2e} (<= 1e-6, gravity accounted)")

    base = synth.ring_cameras((0, 0, 0), 1.45, 1)[0]
    ident = camera_from_spec("orbit 0 left", base)
    inv = camera_from_spec("dolly 1", camera_from_spec("dolly -1", base))
    cam_ok = (np.array_equal(ident.R, base.R) and np.array_equal(ident.t, base.t)
              and np.abs(inv.R - base.R).max() < 1e-9
              and np.abs(inv.t - base.t).max() < 1e-9)
    report("camera-spec", cam_ok, "orbit-0 identity exact; dolly inverse <= 1e-9")

    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return 2
    print("all checks passed")
    return 0


# -- entry ------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="splatsim",
                description="Editable Gaussian-splat scene simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scene", help="scene file (.rprl)")
        sp.add_argument("--views", help="view bundle directory or views.json")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="random seed (default 42)")
        sp.add_argument("--config", help="JSON config file")

    sp = sub.add_parser("synth", help="generate a labeled scene + view bundle")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit a scene to a view bundle")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("edit", help="run an edit script or REPL")
    common(sp)
    sp.add_argument("--script", help="script file (one round)")
    sp.add_argument("--repl", action="store_true",
                    help="read statements from stdin, one round per line")
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("render", help="render frames from a scene")
    common(sp)
    sp.add_argument("--channels", default="color",
                    help="comma list: color,feature (feature = PCA RGB)")
    sp.add_argument("--frames", help="frame range A..B (default: whole time range)")
    sp.add_argument("--camera", help="relative camera spec, e.g. 'orbit 30 left'")
    sp.add_argument("--fps", type=float, default=10.0)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("inspect", help="print a scene summary as JSON")
    common(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("check", help="run built-in verification")
    sp.add_argument("--quick", action="store_true", help="smaller check set")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # internal invariant failure
        import traceback
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
