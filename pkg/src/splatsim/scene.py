"""Scene container: Gaussian parameter blocks, semantic groups, cameras,
classification head, and the structural mutations (insert/delete/spawn/
densify) that every operator builds on.

Parameter blocks are float32 (the persisted representation); math upcasts
at the point of use. Every Gaussian belongs to exactly one group and group
index lists partition [0, N). Identity encodings are per-Gaussian vectors
with no time axis anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math
from .core_math import Camera
from .errors import DegenerateRegionError, ShapeError, UnknownGroupError

PARAM_BLOCKS = ("mu4", "q_left", "q_right", "log_scales", "opacity_logit", "sh", "identity")

IDENTITY_DIM = 16
IDENTITY_INIT_STD = 0.01
DEFAULT_SH_DEGREE = 2
# log temporal scale that makes a Gaussian effectively time-flat
# (density_t = 1 within ~1e-12 across unit-scale time ranges)
TIME_FLAT_LOG_SCALE = float(np.log(1e6))

# densification defaults (standard splatting practice, config-exposed)
CLONE_GRAD_THRESHOLD = 2e-4
PRUNE_OPACITY = 0.005
SPLIT_SCALE_SHRINK = 1.6
CLONE_MAX_SCALE_REL = 0.01


@dataclass
class Group:
    gid: int
    label: str
    class_id: int
    attributes: dict = field(default_factory=dict)
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def copy(self):
        return Group(self.gid, self.label, self.class_id, dict(self.attributes),
                     self.indices.copy())


class SemanticHead:
    """Linear classifier from identity features to group-class logits."""

    def __init__(self, weight=None, bias=None, dim=IDENTITY_DIM):
        if weight is None:
            weight = np.zeros((0, dim), dtype=np.float32)
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=np.float32)
        self.weight = np.asarray(weight, dtype=np.float32)
        self.bias = np.asarray(bias, dtype=np.float32)

    @property
    def n_classes(self):
        return self.weight.shape[0]

    def logits(self, features):
        f = np.asarray(features, dtype=np.float64)
        return f @ self.weight.astype(np.float64).T + self.bias.astype(np.float64)

    def add_class(self):
        """Grow the output by one neutral class; returns the new class id."""
        dim = self.weight.shape[1]
        self.weight = np.concatenate([self.weight, np.zeros((1, dim), dtype=np.float32)])
        self.bias = np.concatenate([self.bias, np.zeros(1, dtype=np.float32)])
        return self.n_classes - 1

    def copy(self):
        return SemanticHead(self.weight.copy(), self.bias.copy())


class SceneModel:
    """Gaussian soup + group table + cameras + semantic head."""

    def __init__(self, mu4, q_left, q_right, log_scales, opacity_logit, sh, identity,
                 sh_degree=DEFAULT_SH_DEGREE, time_range=(0.0, 1.0), background=None):
        self.mu4 = np.asarray(mu4, dtype=np.float32).reshape(-1, 4)
        n = self.mu4.shape[0]
        self.q_left = np.asarray(q_left, dtype=np.float32).reshape(n, 4)
        self.q_right = np.asarray(q_right, dtype=np.float32).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float32).reshape(n, 4)
        self.opacity_logit = np.asarray(opacity_logit, dtype=np.float32).reshape(n)
        k = core_math.sh_coeff_count(sh_degree)
        self.sh = np.asarray(sh, dtype=np.float32).reshape(n, k, 3)
        identity = np.asarray(identity, dtype=np.float32)
        if identity.ndim != 2 or identity.shape[0] != n:
            raise ShapeError("identity block must be (N, D)")
        self.identity = identity
        self.sh_degree = int(sh_degree)
        self.time_range = (float(time_range[0]), float(time_range[1]))
        self.background = (np.zeros(3, dtype=np.float32) if background is None
                           else np.asarray(background, dtype=np.float32).reshape(3))
        self.groups: dict[int, Group] = {}
        self.deleted_group_ids: set[int] = set()
        self.next_group_id = 0
        self.head = SemanticHead(dim=self.identity.shape[1] if n else IDENTITY_DIM)
        self.cameras: list[Camera] = []

    # -- construction -------------------------------------------------------

    @staticmethod
    def empty(sh_degree=DEFAULT_SH_DEGREE, identity_dim=IDENTITY_DIM, time_range=(0.0, 1.0)):
        k = core_math.sh_coeff_count(sh_degree)
        return SceneModel(
            mu4=np.zeros((0, 4), dtype=np.float32),
            q_left=np.zeros((0, 4), dtype=np.float32),
            q_right=np.zeros((0, 4), dtype=np.float32),
            log_scales=np.zeros((0, 4), dtype=np.float32),
            opacity_logit=np.zeros(0, dtype=np.float32),
            sh=np.zeros((0, k, 3), dtype=np.float32),
            identity=np.zeros((0, identity_dim), dtype=np.float32),
            sh_degree=sh_degree, time_range=time_range,
        )

    @property
    def n(self):
        return self.mu4.shape[0]

    @property
    def identity_dim(self):
        return self.identity.shape[1]

    def blocks(self):
        """Name -> live array view of every parameter block."""
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def copy(self):
        out = SceneModel(
            self.mu4.copy(), self.q_left.copy(), self.q_right.copy(),
            self.log_scales.copy(), self.opacity_logit.copy(), self.sh.copy(),
            self.identity.copy(), sh_degree=self.sh_degree,
            time_range=self.time_range, background=self.background.copy(),
        )
        out.groups = {gid: g.copy() for gid, g in self.groups.items()}
        out.deleted_group_ids = set(self.deleted_group_ids)
        out.next_group_id = self.next_group_id
        out.head = self.head.copy()
        out.cameras = [Camera.from_dict(c.to_dict()) for c in self.cameras]
        return out

    def equal_blocks(self, other):
        """Bit-level equality of parameter blocks (used by transactional tests)."""
        return all(np.array_equal(getattr(self, b), getattr(other, b)) for b in PARAM_BLOCKS)

    def validate(self):
        """Check the partition invariant and block shapes; raises ShapeError."""
        n = self.n
        counts = np.zeros(n, dtype=np.int64)
        for g in self.groups.values():
            if g.indices.size and (g.indices.min() < 0 or g.indices.max() >= n):
                raise ShapeError("group %d has out-of-range indices" % g.gid)
            counts[g.indices] += 1
        if n and not np.all(counts == 1):
            raise ShapeError("group index lists do not partition the scene")
        for name in PARAM_BLOCKS:
            if getattr(self, name).shape[0] != n:
                raise ShapeError("block %s row count mismatch" % name)
        return True

    # -- derived quantities -------------------------------------------------

    def cov4s(self):
        """(N,4,4) float64 covariance of every Gaussian."""
        rot4 = core_math.rot4d_from_pair(
            core_math.normalize_quat(self.q_left.astype(np.float64)),
            core_math.normalize_quat(self.q_right.astype(np.float64)),
        )
        return core_math.build_cov4(rot4, self.log_scales.astype(np.float64))

    def condition(self, t):
        """(mu3, cov3, density) of every Gaussian at time t."""
        return core_math.condition_on_time(
            self.mu4.astype(np.float64), self.cov4s(), float(t))

    def mid_time(self):
        return 0.5 * (self.time_range[0] + self.time_range[1])

    def positions3(self, t=None):
        if t is None:
            t = self.mid_time()
        mu3, _, _ = self.condition(t)
        return mu3

    def group_of(self):
        """(N,) group id per Gaussian."""
        out = np.full(self.n, -1, dtype=np.int64)
        for g in self.groups.values():
            out[g.indices] = g.gid
        return out

    def group_bbox(self, gid, pad_sigma=True):
        """Axis-aligned bbox of a group's spatial means, optionally expanded
        by the group's mean spatial sigma per axis (so flat objects still
        enclose a usable volume)."""
        idx = self.select_group(gid)
        if idx.size == 0:
            raise UnknownGroupError("group %r is empty" % gid)
        mu = self.mu4[idx, :3].astype(np.float64)
        lo, hi = mu.min(axis=0), mu.max(axis=0)
        if pad_sigma:
            sigma = np.exp(self.log_scales[idx, :3].astype(np.float64)).mean(axis=0)
            lo, hi = lo - sigma, hi + sigma
        return np.stack([lo, hi])

    def group_centroid(self, gid, t=None):
        idx = self.select_group(gid)
        if idx.size == 0:
            raise UnknownGroupError("group %r is empty" % gid)
        return self.positions3(t)[idx].mean(axis=0)

    # -- group selection ----------------------------------------------------

    def select_group(self, group_ref):
        """Indices of a group by id or (case-insensitive) label.

        Deleted ids resolve to an empty list; ids/labels that never existed
        raise UnknownGroupError. A label shared by several groups returns
        the union of their indices.
        """
        if isinstance(group_ref, (int, np.integer)):
            gid = int(group_ref)
            if gid in self.groups:
                return self.groups[gid].indices.copy()
            if gid in self.deleted_group_ids:
                return np.zeros(0, dtype=np.int64)
            raise UnknownGroupError("unknown group id %d" % gid)
        key = str(group_ref).strip().lower()
        hits = [g.indices for g in self.groups.values() if g.label.strip().lower() == key]
        if not hits:
            raise UnknownGroupError("unknown group label %r" % group_ref)
        return np.sort(np.concatenate(hits))

    def groups_matching_label(self, key):
        key = key.strip().lower()
        return [g for g in self.groups.values() if g.label.strip().lower() == key]

    # -- structural mutations -------------------------------------------------

    def _append_rows(self, block):
        for name in PARAM_BLOCKS:
            arr = np.asarray(block[name], dtype=np.float32)
            setattr(self, name, np.concatenate([getattr(self, name), arr], axis=0))

    def insert_gaussians(self, block, group_label, attributes=None, class_id=None, rng=None):
        """Append a Gaussian block as a new group; returns the group id.

        `block` maps block names to arrays; `identity` may be omitted, in
        which case fresh encodings ~ N(0, 0.01^2) are drawn (neutral start,
        semantics come from fine-tuning). A fresh semantic class is
        registered unless class_id is given.
        """
        block = dict(block)
        count = np.asarray(block["mu4"]).reshape(-1, 4).shape[0]
        if "identity" not in block:
            if rng is None:
                rng = np.random.default_rng(0)
            block["identity"] = rng.normal(
                0.0, IDENTITY_INIT_STD, size=(count, self.identity_dim)).astype(np.float32)
        start = self.n
        self._append_rows(block)
        if class_id is None:
            class_id = self.head.add_class()
        gid = self.next_group_id
        self.next_group_id += 1
        self.groups[gid] = Group(gid, group_label, class_id, dict(attributes or {}),
                                 np.arange(start, start + count, dtype=np.int64))
        return gid

    def delete_gaussians(self, group_id):
        """Remove a group's rows, compact indices, tombstone the id."""
        gid = int(group_id)
        if gid not in self.groups:
            raise UnknownGroupError("unknown group id %d" % gid)
        drop = self.groups.pop(gid).indices
        keep = np.ones(self.n, dtype=bool)
        keep[drop] = False
        remap = np.cumsum(keep) - 1
        for name in PARAM_BLOCKS:
            setattr(self, name, getattr(self, name)[keep])
        for g in self.groups.values():
            g.indices = remap[g.indices[keep[g.indices]]]
        self.deleted_group_ids.add(gid)

    def spawn_near(self, region, count, seed):
        """Sample `count` fresh Gaussians uniformly inside a 3D box.

        Isotropic spatial log-scale log(diag / count^(1/3) / 4), opacity
        logit 0, gray SH, time-flat, seeded identity init. Returns a block
        dict (not yet inserted). Zero-volume regions are an error.
        """
        region = np.asarray(region, dtype=np.float64).reshape(2, 3)
        extent = region[1] - region[0]
        count = int(count)
        k = core_math.sh_coeff_count(self.sh_degree)
        if count == 0:
            return {
                "mu4": np.zeros((0, 4), dtype=np.float32),
                "q_left": np.zeros((0, 4), dtype=np.float32),
                "q_right": np.zeros((0, 4), dtype=np.float32),
                "log_scales": np.zeros((0, 4), dtype=np.float32),
                "opacity_logit": np.zeros(0, dtype=np.float32),
                "sh": np.zeros((0, k, 3), dtype=np.float32),
                "identity": np.zeros((0, self.identity_dim), dtype=np.float32),
            }
        if np.any(extent <= 0):
            raise DegenerateRegionError("spawn region has zero volume")
        rng = np.random.default_rng(seed)
        pos = region[0] + rng.random((count, 3)) * extent
        diag = float(np.linalg.norm(extent))
        log_s = np.log(diag / count ** (1.0 / 3.0) / 4.0)
        mu4 = np.concatenate([pos, np.full((count, 1), self.mid_time())], axis=1)
        quat = np.zeros((count, 4), dtype=np.float32)
        quat[:, 0] = 1.0
        log_scales = np.full((count, 4), log_s, dtype=np.float32)
        log_scales[:, 3] = TIME_FLAT_LOG_SCALE
        return {
            "mu4": mu4.astype(np.float32),
            "q_left": quat.copy(),
            "q_right": quat.copy(),
            "log_scales": log_scales,
            "opacity_logit": np.zeros(count, dtype=np.float32),
            "sh": np.zeros((count, k, 3), dtype=np.float32),
            "identity": rng.normal(0.0, IDENTITY_INIT_STD,
                                   size=(count, self.identity_dim)).astype(np.float32),
        }

    def densify_and_prune(self, grad_avg, rng,
                          clone_grad_threshold=CLONE_GRAD_THRESHOLD,
                          prune_opacity=PRUNE_OPACITY,
                          clone_max_scale_rel=CLONE_MAX_SCALE_REL):
        """Standard clone/split densification plus opacity pruning.

        grad_avg: (N,) average positional-gradient norm per Gaussian.
        Children inherit the parent's group and identity encoding bit-exactly
        (clones are exact copies; splits resample position from the parent's
        spatial Gaussian and shrink spatial scales by 1.6). Returns a carry
        array mapping new rows to their source row (for optimizer-state
        migration) and a stats dict.
        """
        n = self.n
        grad_avg = np.asarray(grad_avg, dtype=np.float64).reshape(n)
        opacity = 1.0 / (1.0 + np.exp(-self.opacity_logit.astype(np.float64)))
        prune = opacity < prune_opacity

        mu = self.mu4[:, :3].astype(np.float64)
        if n:
            extent = float(np.linalg.norm(mu.max(axis=0) - mu.min(axis=0)))
        else:
            extent = 0.0
        max_scale = np.exp(self.log_scales[:, :3].astype(np.float64)).max(axis=1)
        hot = (grad_avg > clone_grad_threshold) & ~prune
        clone = hot & (max_scale < clone_max_scale_rel * max(extent, 1e-12))
        split = hot & ~clone

        keep = ~prune & ~split
        keep_idx = np.flatnonzero(keep)
        clone_idx = np.flatnonzero(clone & keep)
        split_idx = np.flatnonzero(split)

        parts = {name: [getattr(self, name)[keep_idx]] for name in PARAM_BLOCKS}
        carry = [keep_idx]
        if clone_idx.size:
            for name in PARAM_BLOCKS:
                parts[name].append(getattr(self, name)[clone_idx])
            carry.append(clone_idx)
        if split_idx.size:
            _, cov3, _ = self.condition(self.mid_time())
            cov3 = cov3[split_idx] + 1e-12 * np.eye(3)
            chol = np.linalg.cholesky(cov3)
            for _child in range(2):
                noise = rng.standard_normal((split_idx.size, 3))
                pos = mu[split_idx] + np.einsum("nij,nj->ni", chol, noise)
                mu4 = self.mu4[split_idx].copy()
                mu4[:, :3] = pos.astype(np.float32)
                ls = self.log_scales[split_idx].copy()
                ls[:, :3] -= np.float32(np.log(SPLIT_SCALE_SHRINK))
                for name in PARAM_BLOCKS:
                    if name == "mu4":
                        parts[name].append(mu4)
                    elif name == "log_scales":
                        parts[name].append(ls)
                    else:
                        parts[name].append(getattr(self, name)[split_idx])
                carry.append(split_idx)

        carry = np.concatenate(carry) if carry else np.zeros(0, dtype=np.int64)
        old_group = self.group_of()
        for name in PARAM_BLOCKS:
            setattr(self, name, np.concatenate(parts[name], axis=0))
        new_group = old_group[carry]
        for g in self.groups.values():
            g.indices = np.flatnonzero(new_group == g.gid).astype(np.int64)
        return carry, {
            "pruned": int(prune.sum()),
            "cloned": int(clone_idx.size),
            "split": int(split_idx.size),
            "n": self.n,
        }
