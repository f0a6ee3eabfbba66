"""Adam with per-block learning rates and row-level masking.

Scene parameters live in named float32 blocks of very different scales
(positions, rotor components, log scales, logits, SH coefficients), so a
single learning rate does not work; each block gets its own.  Moments are
kept in float64 and updates are computed in float64 before storing back,
which keeps the optimizer deterministic across densification via explicit
state migration.
"""

import numpy as np

from ..errors import GradientError

__all__ = ["AdamState", "default_lr_table", "adam_step", "migrate_state"]

# Tuned for scenes normalized to roughly unit extent.
_DEFAULT_LR = {
    "mu4": 2e-4,
    "q_left": 1e-3,
    "q_right": 1e-3,
    "log_scales": 5e-3,
    "opacity_logit": 5e-2,
    "sh": 2.5e-3,
    "identity": 2.5e-3,
    "head_weight": 1e-3,
    "head_bias": 1e-3,
}


def default_lr_table():
    return dict(_DEFAULT_LR)


class AdamState:
    """First/second moment estimates per parameter block, plus step count."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    def ensure(self, name, shape):
        if name not in self.m or self.m[name].shape != tuple(shape):
            self.m[name] = np.zeros(shape, dtype=np.float64)
            self.v[name] = np.zeros(shape, dtype=np.float64)
        return self.m[name], self.v[name]


def adam_step(params, grads, state, lr_table, row_masks=None,
              betas=(0.9, 0.999), eps=1e-8):
    """One Adam update over named parameter blocks, in place.

    params : dict name -> array (modified in place, dtype preserved).
    grads : dict name -> float64 array of the same shape; missing names are
        skipped entirely (parameter and moments untouched).
    state : AdamState, advanced by one step.
    lr_table : dict name -> learning rate; missing name raises KeyError.
    row_masks : optional dict name -> bool row mask (updates only True rows)
        or False (skip the block entirely, moments untouched).

    Raises GradientError on non-finite gradient entries.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        sel = True if row_masks is None else row_masks.get(name, True)
        if sel is False:
            continue
        if g.shape != p.shape:
            raise GradientError(f"gradient shape {g.shape} != param {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient in block '{name}'")
        m, v = state.ensure(name, p.shape)
        if sel is True:
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * g * g
            upd = (lr_table[name] / corr1) * m / (np.sqrt(v / corr2) + eps)
            p[...] = (p.astype(np.float64) - upd).astype(p.dtype)
        else:
            rows = np.asarray(sel, dtype=bool)
            m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
            v[rows] = b2 * v[rows] + (1.0 - b2) * g[rows] * g[rows]
            upd = (lr_table[name] / corr1) * m[rows] / (np.sqrt(v[rows] / corr2) + eps)
            p[rows] = (p[rows].astype(np.float64) - upd).astype(p.dtype)


def migrate_state(state, carry, kept):
    """Rebuild per-row moments after densification.

    carry : (N_new,) int indices into the old rows; the first ``kept``
        entries are surviving originals (moments copied over), the rest are
        fresh clones/splits (moments reset to zero).  Head blocks and the
        step count are left untouched.
    """
    carry = np.asarray(carry)
    n_new = len(carry)
    for name in list(state.m.keys()):
        if name.startswith("head_"):
            continue
        old_m, old_v = state.m[name], state.v[name]
        shape = (n_new,) + old_m.shape[1:]
        new_m = np.zeros(shape, dtype=np.float64)
        new_v = np.zeros(shape, dtype=np.float64)
        new_m[:kept] = old_m[carry[:kept]]
        new_v[:kept] = old_v[carry[:kept]]
        state.m[name], state.v[name] = new_m, new_v
