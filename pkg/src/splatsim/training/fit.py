"""Scene fitting: stochastic multi-view optimization of Gaussian blocks.

Each iteration renders one (seeded-randomly chosen) posed view, assembles
image cotangents from the active losses, pulls them back through the
rasterizer, and takes one masked Adam step.  The three losses are
  render      mean squared error against the view's RGB image,
  semantic    cross entropy of head logits on the rendered feature plane
              against the view's label plane,
  consistency KL divergence between softmaxed identity encodings of
              spatially neighboring Gaussians.
Densification (clone/split/prune) runs on a fixed schedule over a window
of the run, with optimizer moments migrated across the row remap.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteLossError
from ..render import Cotangents, backward, rasterize
from ..scene import PARAM_BLOCKS
from .losses import kl_consistency_loss, mse_loss, psnr, semantic_ce_loss
from .optim import AdamState, adam_step, default_lr_table, migrate_state

__all__ = ["FitView", "LossWeights", "FitConfig", "FitResult", "fit", "write_trace_csv"]

TRACE_FIELDS = ("iteration", "loss_total", "loss_render", "loss_semantic",
                "loss_consistency", "psnr", "n_gaussians")


@dataclass
class FitView:
    """One supervision view: camera plus ground-truth planes."""

    camera: object
    image: np.ndarray                 # (H, W, 3) float in [0, 1]
    labels: np.ndarray | None = None  # (H, W) int, -1 = unlabeled
    pixel_mask: np.ndarray | None = None


@dataclass
class LossWeights:
    render: float = 1.0
    semantic: float = 1.0
    consistency: float = 2.0

    def validate(self):
        vals = (self.render, self.semantic, self.consistency)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"loss weights must be finite and >= 0, got {vals}")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")
        return self


@dataclass
class FitConfig:
    iterations: int = 2000
    seed: int = 0
    lr: dict = field(default_factory=dict)  # overrides on the default table
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    position_lr_final: float = 0.01         # mu4 lr decays to this fraction
    kl_anchors: int = 100
    kl_neighbors: int = 5
    densify: bool = False
    densify_interval: int = 100
    densify_start: int = 500
    densify_end_frac: float = 0.6
    clone_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    param_blocks: tuple | None = None       # None = all scene blocks
    train_head: bool = True
    row_mask: np.ndarray | None = None      # (N,) bool, True rows trainable
    probe_view: int | None = 0              # view index scored for PSNR
    probe_every: int = 100


@dataclass
class FitResult:
    trace: list
    final_loss: float
    probe_psnr: float | None
    n_gaussians: int


def _probe(scene, view):
    out = rasterize(scene, view.camera, channels=("color",))
    return psnr(out.color, view.image)


def fit(scene, views, config=None, weights=None):
    """Optimize `scene` in place against posed views; returns a FitResult.

    Raises NonFiniteLossError (with the trace so far attached) if any loss
    term stops being finite, and GradientError on non-finite gradients.
    """
    config = config or FitConfig()
    weights = (weights or LossWeights()).validate()
    if not views:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(config.seed)

    lr_table = default_lr_table()
    lr_table.update(config.lr)
    mu4_lr0 = lr_table["mu4"]
    state = AdamState()

    active = set(PARAM_BLOCKS if config.param_blocks is None else config.param_blocks)
    unknown = active - set(PARAM_BLOCKS)
    if unknown:
        raise ValueError(f"unknown parameter blocks {sorted(unknown)}")
    row_mask = None if config.row_mask is None else np.asarray(config.row_mask, bool).copy()

    gsum = np.zeros(scene.n)
    gcount = np.zeros(scene.n)
    densify_end = int(config.densify_end_frac * config.iterations)

    trace = []
    total = float("nan")
    for it in range(1, config.iterations + 1):
        view = views[int(rng.integers(len(views)))]
        sem_on = (weights.semantic > 0 and view.labels is not None
                  and scene.head.n_classes > 0)
        kl_on = weights.consistency > 0 and scene.n > config.kl_neighbors
        channels = ("color", "feature") if sem_on else ("color",)
        out = rasterize(scene, view.camera, channels=channels, retain_state=True)

        l_render, d_color = mse_loss(out.color, view.image, view.pixel_mask)
        l_sem = 0.0
        d_head_w = d_head_b = None
        cot = Cotangents(d_color=weights.render * d_color)
        if sem_on:
            l_sem, d_feat, d_head_w, d_head_b = semantic_ce_loss(
                out.feature, scene.head, view.labels, view.pixel_mask)
            cot.d_feature = weights.semantic * d_feat

        bundle = backward(scene, view.camera, cot,
                          param_mask=tuple(active), state=out.state)

        l_kl = 0.0
        if kl_on:
            l_kl, d_ident = kl_consistency_loss(
                scene, anchors=config.kl_anchors, k=config.kl_neighbors, rng=rng)
            if "identity" in active:
                bundle.identity += weights.consistency * d_ident

        total = (weights.render * l_render + weights.semantic * l_sem
                 + weights.consistency * l_kl)
        if not np.isfinite(total):
            raise NonFiniteLossError(
                f"loss became non-finite at iteration {it}", trace=trace)

        touched = np.abs(bundle.mu4[:, :3]).sum(axis=1) > 0
        gsum[touched] += np.linalg.norm(bundle.mu4[touched, :3], axis=1)
        gcount[touched] += 1

        grads = bundle.blocks()
        params = scene.blocks()
        row_masks = {}
        for name in PARAM_BLOCKS:
            if name not in active:
                row_masks[name] = False
            elif row_mask is not None:
                row_masks[name] = row_mask
        if sem_on and config.train_head:
            params["head_weight"] = scene.head.weight
            params["head_bias"] = scene.head.bias
            grads["head_weight"] = weights.semantic * d_head_w
            grads["head_bias"] = weights.semantic * d_head_b

        lr_table["mu4"] = mu4_lr0 * config.position_lr_final ** (it / config.iterations)
        adam_step(params, grads, state, lr_table, row_masks,
                  betas=config.betas, eps=config.eps)

        if (config.densify and config.densify_start <= it <= densify_end
                and it % config.densify_interval == 0):
            avg = gsum / np.maximum(gcount, 1.0)
            carry, stats = scene.densify_and_prune(
                avg, rng, clone_grad_threshold=config.clone_grad_threshold,
                prune_opacity=config.prune_opacity)
            kept = len(carry) - stats["cloned"] - 2 * stats["split"]
            migrate_state(state, carry, kept)
            if row_mask is not None:
                row_mask = row_mask[carry]
            gsum = np.zeros(scene.n)
            gcount = np.zeros(scene.n)

        row = {"iteration": it, "loss_total": total, "loss_render": l_render,
               "loss_semantic": l_sem, "loss_consistency": l_kl,
               "psnr": "", "n_gaussians": scene.n}
        if (config.probe_view is not None
                and (it % config.probe_every == 0 or it == config.iterations)):
            row["psnr"] = _probe(scene, views[config.probe_view])
        trace.append(row)

    probe = trace[-1]["psnr"] if trace and trace[-1]["psnr"] != "" else None
    return FitResult(trace=trace, final_loss=total, probe_psnr=probe,
                     n_gaussians=scene.n)


def write_trace_csv(trace, path):
    """Write fit trace rows to CSV with a fixed, stable column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
