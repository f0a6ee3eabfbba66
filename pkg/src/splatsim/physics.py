"""Elastic object simulation with the Material Point Method.

MLS-MPM with quadratic B-spline transfers and fixed-corotated elasticity.
Only the selected group's Gaussians become particles; the rest of the
scene acts as static geometry through a sticky ground-plane collider.
Each particle carries a deformation gradient F that later deforms its
source Gaussian's spatial covariance as F Sigma F^T, so simulation output
plugs straight into the renderer as per-frame overrides.

Scene units are treated as meters, masses in kg, moduli in Pa.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import MaterialError, TimestepError, UnknownGroupError
from .render import Overrides

__all__ = [
    "MaterialParams", "MaterialLibrary", "ParticleState", "GridConfig",
    "PlaneCollider", "Trajectory", "lame_from", "assign_material",
    "gaussians_to_particles", "build_grid", "mpm_step", "simulate",
    "trajectory_overrides", "save_trajectory", "load_trajectory",
    "DEFAULT_LIBRARY_TEXT",
]

CFL_FACTOR = 0.1
GRID_DIVISIONS = 32
MIN_SINGULAR = 0.05  # F clamp floor under inversion
DET_GUARD = 1e-6


@dataclass(frozen=True)
class MaterialParams:
    density: float
    youngs: float
    poisson: float

    def __post_init__(self):
        if not (self.density > 0):
            raise MaterialError(f"density must be > 0, got {self.density}")
        if not (self.youngs > 0):
            raise MaterialError(f"Young's modulus must be > 0, got {self.youngs}")
        if not (-1.0 < self.poisson < 0.5):
            raise MaterialError(
                f"Poisson ratio must lie in (-1, 0.5), got {self.poisson}")


def lame_from(youngs, poisson):
    """Shear modulus and first Lame parameter from (E, nu)."""
    if abs(poisson - 0.5) < 1e-6:
        raise MaterialError("incompressible limit: Poisson ratio too close to 0.5")
    if not (-1.0 < poisson < 0.5):
        raise MaterialError(f"Poisson ratio must lie in (-1, 0.5), got {poisson}")
    mu = youngs / (2.0 * (1.0 + poisson))
    lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


DEFAULT_LIBRARY_TEXT = """\
# label density(kg/m3) youngs(Pa) poisson
default 1000 1e5 0.3
rubber 1100 5e6 0.45
wood 600 1e9 0.35
metal 7800 2e11 0.29
foam 100 1e4 0.2
jelly 1000 1e4 0.4
"""


class MaterialLibrary:
    """Ordered label -> MaterialParams table, parsed from a text config.

    Config lines are `label density youngs poisson`; `#` starts a comment.
    Lookup falls back from exact label to token containment to the entry
    named "default" (or the first entry when none is named that).
    """

    def __init__(self, entries=None):
        self.entries = {}
        for label, params in (entries or {}).items():
            self.entries[str(label)] = params

    @staticmethod
    def parse(text):
        lib = MaterialLibrary()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MaterialError(
                    f"line {lineno}: expected `label density youngs poisson`, "
                    f"got {raw!r}")
            label, rho, e, nu = parts
            try:
                lib.entries[label] = MaterialParams(float(rho), float(e), float(nu))
            except ValueError as exc:
                raise MaterialError(f"line {lineno}: bad number in {raw!r}") from exc
        return lib

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as fh:
            return MaterialLibrary.parse(fh.read())

    @staticmethod
    def default():
        return MaterialLibrary.parse(DEFAULT_LIBRARY_TEXT)


def _tokens(text):
    return [t for t in re.split(r"[^a-z0-9]+", str(text).lower()) if t]


def assign_material(label, library):
    """Exact label lookup, else best token-containment match, else default."""
    if not library.entries:
        raise MaterialError("material library is empty")
    if label in library.entries:
        return library.entries[label]
    want = set(_tokens(label))
    best, best_score = None, 0
    for key, params in library.entries.items():
        kt = set(_tokens(key))
        if kt and kt <= want and len(kt) > best_score:
            best, best_score = params, len(kt)
    if best is not None:
        return best
    if "default" in library.entries:
        return library.entries["default"]
    return next(iter(library.entries.values()))


@dataclass
class ParticleState:
    """Vectorized particle set; one particle per source Gaussian."""

    x: np.ndarray          # (N, 3) positions
    v: np.ndarray          # (N, 3) velocities
    mass: np.ndarray       # (N,)
    C: np.ndarray          # (N, 3, 3) affine velocity
    F: np.ndarray          # (N, 3, 3) deformation gradient
    source: np.ndarray     # (N,) source Gaussian row indices
    material: MaterialParams
    warn_count: int = 0

    @property
    def n(self):
        return len(self.x)

    def copy(self):
        return ParticleState(self.x.copy(), self.v.copy(), self.mass.copy(),
                             self.C.copy(), self.F.copy(), self.source.copy(),
                             self.material, self.warn_count)


@dataclass
class GridConfig:
    origin: np.ndarray  # (3,) position of node (0,0,0)
    h: float            # cell edge
    dims: tuple         # node counts per axis

    def node_positions_z(self):
        return self.origin[2] + self.h * np.arange(self.dims[2])


@dataclass
class PlaneCollider:
    """Sticky half-space: grid nodes at or below the plane that move into
    it lose their velocity entirely."""

    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0  # plane is {p : p . normal = offset}

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(self.offset)


def sound_speed(material):
    mu, lam = lame_from(material.youngs, material.poisson)
    return float(np.sqrt((lam + 2.0 * mu) / material.density))


def cfl_dt(h, material):
    """Largest stable timestep for the grid spacing and material."""
    return CFL_FACTOR * h / sound_speed(material)


def gaussians_to_particles(scene, group_id, material, t=None):
    """One particle per group Gaussian: rest positions, shared mass budget.

    Total mass is density times the summed oriented-ellipsoid volume of the
    group, split evenly across particles; F starts at identity.
    """
    idx = scene.select_group(int(group_id))
    if idx.size == 0:
        raise UnknownGroupError(f"group {group_id} is empty or deleted")
    if t is None:
        t = scene.mid_time()
    mu3, _, _ = scene.condition(t)
    x = mu3[idx].copy()
    scales = np.exp(scene.log_scales[idx, :3].astype(np.float64))
    v_total = float(np.sum(4.0 / 3.0 * np.pi * np.prod(scales, axis=1)))
    mass = np.full(idx.size, material.density * v_total / idx.size)
    return ParticleState(
        x=x, v=np.zeros((idx.size, 3)), mass=mass,
        C=np.zeros((idx.size, 3, 3)),
        F=np.tile(np.eye(3), (idx.size, 1, 1)),
        source=idx.astype(np.int64), material=material,
    )


def build_grid(bbox, h=None, pad_cells=4, floor_z=None, drop=0.0, lateral=0.0):
    """Grid covering a bbox with padding, optionally extended down to a
    floor plane, by an expected drop distance, and sideways by an expected
    lateral spread (impact splash, initial velocity)."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if h is None:
        h = float(np.linalg.norm(bbox[1] - bbox[0])) / GRID_DIVISIONS
    if h <= 0:
        raise TimestepError("grid spacing must be positive (degenerate bbox)")
    lo = bbox[0] - pad_cells * h
    hi = bbox[1] + pad_cells * h
    lo[:2] -= max(0.0, float(lateral))
    hi[:2] += max(0.0, float(lateral))
    lo[2] -= max(0.0, float(drop))
    if floor_z is not None:
        lo[2] = min(lo[2], float(floor_z) - pad_cells * h)
    dims = tuple(int(np.ceil((hi[i] - lo[i]) / h)) + 1 for i in range(3))
    return GridConfig(origin=lo, h=h, dims=dims)


def _corotated_stress(F, mu, lam):
    """Kirchhoff stress 2 mu (F - R) F^T + lam J (J - 1) I, batched."""
    u, sig, vt = np.linalg.svd(F)
    # proper rotations: flip the smallest singular direction if det < 0
    det_uv = np.linalg.det(u @ vt)
    flip = det_uv < 0
    if np.any(flip):
        u = u.copy()
        u[flip, :, 2] *= -1.0
        sig = sig.copy()
        sig[flip, 2] *= -1.0
    r = u @ vt
    j = np.prod(sig, axis=1)
    ft = np.swapaxes(F, 1, 2)
    eye = np.eye(3)
    return (2.0 * mu * (F - r) @ ft
            + (lam * j * (j - 1.0))[:, None, None] * eye)


def mpm_step(particles, grid, dt, gravity=(0.0, 0.0, -9.8), colliders=()):
    """One MLS-MPM cycle (P2G, grid update, G2P); mutates and returns particles.

    Raises TimestepError when dt exceeds the CFL bound for the grid and
    material.  Deformation gradients whose determinant would fall below the
    inversion guard get their singular values clamped (warn_count grows).
    """
    mat = particles.material
    bound = cfl_dt(grid.h, mat)
    if dt > bound * (1.0 + 1e-9):
        raise TimestepError(f"dt {dt:g} exceeds CFL bound {bound:g}")
    mu, lam = lame_from(mat.youngs, mat.poisson)
    h = grid.h
    inv_h = 1.0 / h
    n = particles.n
    dims = grid.dims
    gravity = np.asarray(gravity, dtype=np.float64).reshape(3)

    # quadratic B-spline stencil
    rel = (particles.x - grid.origin) * inv_h
    base = np.floor(rel - 0.5).astype(np.int64)  # (N, 3)
    fx = rel - base                              # in [0.5, 1.5]
    w = np.stack([0.5 * (1.5 - fx) ** 2,
                  0.75 - (fx - 1.0) ** 2,
                  0.5 * (fx - 0.5) ** 2], axis=0)  # (3, N, 3)
    if np.any(base < 0) or np.any(base + 2 >= np.array(dims)):
        raise TimestepError("particles left the simulation grid")

    # volumes: particle volume derives from the mass budget and density
    vol = particles.mass / mat.density
    stress = _corotated_stress(particles.F, mu, lam)
    affine = (-dt * 4.0 * inv_h * inv_h * vol)[:, None, None] * stress \
        + particles.mass[:, None, None] * particles.C

    grid_mv = np.zeros(dims + (3,), dtype=np.float64)
    grid_m = np.zeros(dims, dtype=np.float64)
    flat_mv = grid_mv.reshape(-1, 3)
    flat_m = grid_m.reshape(-1)
    stride = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)

    offsets = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
    weights = {}
    dpos = {}
    nodes = {}
    for off in offsets:
        oi, oj, ok = off
        weight = w[oi, :, 0] * w[oj, :, 1] * w[ok, :, 2]  # (N,)
        d = (np.array(off, dtype=np.float64) - fx) * h      # (N, 3)
        node = (base + np.array(off)) @ stride              # (N,)
        weights[off], dpos[off], nodes[off] = weight, d, node
        mom = weight[:, None] * (particles.mass[:, None] * particles.v
                                 + np.einsum("nij,nj->ni", affine, d))
        np.add.at(flat_mv, node, mom)
        np.add.at(flat_m, node, weight * particles.mass)

    live = flat_m > 0.0
    grid_v = np.zeros_like(flat_mv)
    grid_v[live] = flat_mv[live] / flat_m[live, None]
    grid_v[live] += dt * gravity

    if colliders:
        ii, jj, kk = np.unravel_index(np.flatnonzero(live), dims)
        pos = grid.origin + h * np.stack([ii, jj, kk], axis=1)
        vlive = grid_v[live]
        for col in colliders:
            below = (pos @ col.normal - col.offset) <= 0.0
            into = (vlive @ col.normal) < 0.0
            vlive[below & into] = 0.0
        grid_v[live] = vlive

    new_v = np.zeros((n, 3))
    new_c = np.zeros((n, 3, 3))
    for off in offsets:
        gv = grid_v[nodes[off]]                    # (N, 3)
        weight = weights[off][:, None]
        new_v += weight * gv
        new_c += (4.0 * inv_h * inv_h) * (weight * gv)[:, :, None] \
            * dpos[off][:, None, :]

    particles.v = new_v
    particles.C = new_c
    particles.x = particles.x + dt * new_v
    particles.F = (np.eye(3) + dt * new_c) @ particles.F

    # inversion guard: clamp singular values away from collapse
    det = np.linalg.det(particles.F)
    bad = det <= DET_GUARD
    if np.any(bad):
        u, sig, vt = np.linalg.svd(particles.F[bad])
        sig = np.clip(sig, MIN_SINGULAR, None)
        particles.F[bad] = u @ (sig[..., None] * vt)
        particles.warn_count += int(bad.sum())

    for col in colliders:
        # keep particles out of the half-space (projection along the normal)
        depth = particles.x @ col.normal - col.offset
        under = depth < 0.0
        if np.any(under):
            particles.x[under] -= depth[under, None] * col.normal
    return particles


@dataclass
class Trajectory:
    """Keyframed overlay: per frame, particle positions and deformations."""

    times: np.ndarray       # (T,)
    positions: np.ndarray   # (T, N, 3)
    deformations: np.ndarray  # (T, N, 3, 3)
    source: np.ndarray      # (N,) source Gaussian rows
    group_id: int
    warn_count: int = 0

    @property
    def n_frames(self):
        return len(self.times)


def simulate(scene, group_id, material, duration, fps=10.0, gravity=(0.0, 0.0, -9.8),
             colliders=None, floor_z=None, dt=None, velocity=None):
    """Run MPM on a group and sample a trajectory at fps.

    The original scene is untouched; the returned Trajectory references the
    group's Gaussian rows and can be turned into renderer overrides with
    trajectory_overrides().  Default collider: a sticky ground plane at the
    scene's minimum spatial z (or floor_z when given).
    """
    if duration < 0:
        raise TimestepError(f"duration must be >= 0, got {duration}")
    particles = gaussians_to_particles(scene, group_id, material)
    if velocity is not None:
        particles.v[:] = np.asarray(velocity, dtype=np.float64).reshape(-1, 3)

    if floor_z is None:
        floor_z = float(scene.mu4[:, 2].astype(np.float64).min()) if scene.n else 0.0
    if colliders is None:
        colliders = [PlaneCollider(normal=(0, 0, 1), offset=floor_z)]
    bbox = np.asarray(scene.group_bbox(int(group_id), pad_sigma=True),
                      dtype=np.float64).reshape(2, 3)
    gmag = float(np.linalg.norm(np.asarray(gravity, dtype=np.float64)))
    vmag = float(np.abs(particles.v).max()) if particles.n else 0.0
    ballistic = 0.5 * gmag * duration ** 2 + vmag * duration
    if colliders:
        # a floor caps the descent; post-impact splash is bounded by the
        # redirected fall, so pad sideways by the same budget
        max_fall = max(0.0, float(bbox[0, 2]) - float(floor_z))
        drop = min(ballistic, max_fall + vmag * duration)
        splash = min(0.5 * gmag * duration ** 2, max_fall)
    else:
        drop = ballistic
        splash = 0.0
    grid = build_grid(bbox, floor_z=floor_z if colliders else None, drop=drop,
                      lateral=vmag * duration + splash)
    if dt is None:
        dt = cfl_dt(grid.h, material)

    n_frames = int(np.floor(duration * fps)) + 1
    times = np.arange(n_frames) / fps
    positions = np.empty((n_frames, particles.n, 3))
    deformations = np.empty((n_frames, particles.n, 3, 3))
    positions[0] = particles.x
    deformations[0] = particles.F

    t_now = 0.0
    for k in range(1, n_frames):
        t_target = times[k]
        while t_now < t_target - 1e-12:
            step = min(dt, t_target - t_now)
            mpm_step(particles, grid, step, gravity=gravity, colliders=colliders)
            t_now += step
        positions[k] = particles.x
        deformations[k] = particles.F
    return Trajectory(times=times, positions=positions, deformations=deformations,
                      source=particles.source, group_id=int(group_id),
                      warn_count=particles.warn_count)


def trajectory_overrides(scene, trajectory, frame, t=None):
    """Renderer overrides for one trajectory frame.

    Moves each source Gaussian's conditioned mean to its particle position
    and deforms its conditioned spatial covariance as F Sigma F^T.
    """
    if t is None:
        t = scene.mid_time()
    mu3, cov3, _ = scene.condition(t)
    idx = trajectory.source
    f = trajectory.deformations[frame]
    cov = f @ cov3[idx] @ np.swapaxes(f, 1, 2)
    return Overrides(indices=idx, mu3=trajectory.positions[frame].copy(), cov3=cov)


def save_trajectory(trajectory, path):
    np.savez(path, times=trajectory.times, positions=trajectory.positions,
             deformations=trajectory.deformations, source=trajectory.source,
             group_id=np.int64(trajectory.group_id),
             warn_count=np.int64(trajectory.warn_count))


def load_trajectory(path):
    with np.load(path) as data:
        return Trajectory(times=data["times"], positions=data["positions"],
                          deformations=data["deformations"], source=data["source"],
                          group_id=int(data["group_id"]),
                          warn_count=int(data["warn_count"]))
