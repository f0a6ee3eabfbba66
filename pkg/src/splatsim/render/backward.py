"""Analytic backward pass of the rasterizer.

Gradients flow from per-pixel cotangents (color / feature / alpha planes)
through the compositing recurrence, the footprint weight, the projected
conic, the EWA projection Jacobian (including its dependence on the mean),
the time conditioning, the Sigma = M M^T factor, and the isoclinic rotor
parameterization, down to the seven parameter blocks.

The compositing derivative uses the classic back-to-front recurrence: with
R_k the composite of everything behind contributor k (seeded with the
background for color, zero for features),

    dC/dw_k = T_k (c_k - R_k),   R_{k-1} = w_k c_k + (1 - w_k) R_k

and dA/dw_k = T_k * prod_{j>k} (1 - w_j). Contributors removed by the
footprint cutoff or the termination rule receive exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import core_math
from ..scene import PARAM_BLOCKS
from ..errors import StaleStateError
from .common import QMAX, T_MIN, tile_pixels


@dataclass
class Cotangents:
    d_color: np.ndarray | None = None
    d_feature: np.ndarray | None = None
    d_alpha: np.ndarray | None = None


@dataclass
class GradientBundle:
    mu4: np.ndarray
    q_left: np.ndarray
    q_right: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    identity: np.ndarray

    @staticmethod
    def zeros(scene):
        return GradientBundle(
            mu4=np.zeros((scene.n, 4)), q_left=np.zeros((scene.n, 4)),
            q_right=np.zeros((scene.n, 4)), log_scales=np.zeros((scene.n, 4)),
            opacity_logit=np.zeros(scene.n),
            sh=np.zeros(scene.sh.shape, dtype=np.float64),
            identity=np.zeros(scene.identity.shape, dtype=np.float64))

    def blocks(self):
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def add(self, other):
        for name in PARAM_BLOCKS:
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scale(self, factor):
        for name in PARAM_BLOCKS:
            getattr(self, name).__imul__(factor)
        return self


def backward(scene, cam, cotangents, param_mask=None, state=None):
    """Gradients of a scalar loss through one rasterized view.

    `state` is the ForwardState retained by rasterize(retain_state=True);
    missing state raises StaleStateError. param_mask is an iterable of
    block names to fill (others are exact zeros); None means all.
    """
    if state is None:
        raise StaleStateError("backward requires the forward state "
                              "(rasterize with retain_state=True)")
    prep, bins = state.prep, state.bins
    n = scene.n
    dim = scene.identity_dim
    grads = GradientBundle.zeros(scene)
    if n == 0:
        return grads

    dC = cotangents.d_color
    dF = cotangents.d_feature
    dA = cotangents.d_alpha

    # per-Gaussian accumulators in projected space
    acc_color = np.zeros((n, 3))
    acc_ident = np.zeros((n, dim))
    acc_mu2 = np.zeros((n, 2))
    acc_conic = np.zeros((n, 2, 2))
    acc_density = np.zeros(n)
    acc_sigop = np.zeros(n)

    ident = scene.identity.astype(np.float64)
    for ty in range(bins.tiles_y):
        for tx in range(bins.tiles_x):
            tid = ty * bins.tiles_x + tx
            cnt = bins.counts[tid]
            if cnt == 0:
                continue
            s = bins.starts[tid]
            ids = bins.gauss[s:s + cnt]
            px, ys, xs = tile_pixels(tx, ty, state.width, state.height)
            sl = np.ix_(ys, xs)
            tC = dC[sl].reshape(-1, 3) if dC is not None else None
            tF = dF[sl].reshape(-1, dim) if dF is not None else None
            tA = dA[sl].reshape(-1) if dA is not None else None
            if ((tC is None or not tC.any()) and (tF is None or not tF.any())
                    and (tA is None or not tA.any())):
                continue

            mu2 = prep.mu2[ids]
            con = prep.conic[ids]
            d = px[:, None, :] - mu2[None, :, :]
            q = (con[None, :, 0, 0] * d[:, :, 0] ** 2
                 + 2.0 * con[None, :, 0, 1] * d[:, :, 0] * d[:, :, 1]
                 + con[None, :, 1, 1] * d[:, :, 1] ** 2)
            cut = q <= QMAX
            wsp = np.where(cut, np.exp(-0.5 * q), 0.0)
            w = prep.density[ids][None, :] * prep.opacity[ids][None, :] * wsp
            t_incl = np.cumprod(1.0 - w, axis=1)
            t_excl = np.concatenate([np.ones((w.shape[0], 1)), t_incl[:, :-1]], axis=1)
            include = t_excl >= T_MIN
            w_eff = w * include
            weights = w_eff * t_excl

            k_count = len(ids)
            p_count = w.shape[0]
            dldw = np.zeros((p_count, k_count))
            colors = prep.color[ids]
            feats = ident[ids]
            r_c = np.tile(state.bg, (p_count, 1)) if tC is not None else None
            r_f = np.zeros((p_count, dim)) if tF is not None else None
            t_after = np.ones(p_count) if tA is not None else None
            for k in range(k_count - 1, -1, -1):
                te = t_excl[:, k]
                if tC is not None:
                    dldw[:, k] += np.einsum("pc,pc->p", tC, te[:, None] * (colors[k] - r_c))
                    wk = w_eff[:, k:k + 1]
                    r_c = wk * colors[k] + (1.0 - wk) * r_c
                if tF is not None:
                    dldw[:, k] += np.einsum("pc,pc->p", tF, te[:, None] * (feats[k] - r_f))
                    wk = w_eff[:, k:k + 1]
                    r_f = wk * feats[k] + (1.0 - wk) * r_f
                if tA is not None:
                    dldw[:, k] += tA * te * t_after
                    t_after = t_after * (1.0 - w_eff[:, k])
            dldw *= include

            if tC is not None:
                np.add.at(acc_color, ids, weights.T @ tC)
            if tF is not None:
                np.add.at(acc_ident, ids, weights.T @ tF)
            wsp_incl = wsp * include
            np.add.at(acc_density, ids,
                      prep.opacity[ids] * np.einsum("pk,pk->k", dldw, wsp_incl))
            np.add.at(acc_sigop, ids,
                      prep.density[ids] * np.einsum("pk,pk->k", dldw, wsp_incl))
            dldq = dldw * w_eff * (-0.5)
            cd = np.einsum("kij,pkj->pki", con, d)
            np.add.at(acc_mu2, ids, np.einsum("pk,pki->ki", dldq, -2.0 * cd))
            np.add.at(acc_conic, ids, np.einsum("pk,pki,pkj->kij", dldq, d, d))

    # ----- global chains (vectorized over Gaussians) -----
    live = prep.valid & ~prep.override_mask

    # opacity logit
    sig = prep.opacity
    d_logit = acc_sigop * sig * (1.0 - sig)

    # SH color (with clamp masking) and view-direction dependence
    inside = (prep.color_raw > 0.0) & (prep.color_raw < 1.0)
    d_raw = acc_color * inside
    basis = core_math.sh_basis(prep.dirs, scene.sh_degree)
    d_sh = basis[:, :, None] * d_raw[:, None, :]
    dbasis = core_math.sh_basis_jacobian(prep.dirs, scene.sh_degree)
    coeffs = scene.sh.astype(np.float64)
    d_dir = np.einsum("nc,nkc,nkd->nd", d_raw, coeffs, dbasis)
    proj = d_dir - prep.dirs * np.einsum("nd,nd->n", prep.dirs, d_dir)[:, None]
    d_mu3 = proj / np.maximum(prep.dir_len, 1e-12)[:, None]

    # conic -> floored cov2
    d_cov2 = -np.einsum("nij,njk,nkl->nil", prep.conic, acc_conic, prep.conic)

    # cov2 = A cov3 A^T with A = J R; J depends on the camera-frame mean
    fx, fy = cam.fx, cam.fy
    x, y, z = prep.p_cam[:, 0], prep.p_cam[:, 1], prep.p_cam[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    a_mat = np.zeros((n, 2, 3))
    a_mat[:, 0, 0] = fx / zs
    a_mat[:, 0, 2] = -fx * x / zs ** 2
    a_mat[:, 1, 1] = fy / zs
    a_mat[:, 1, 2] = -fy * y / zs ** 2
    a_mat = a_mat @ cam.R
    d_cov3 = np.einsum("nji,njk,nkl->nil", a_mat, d_cov2, a_mat)
    d_a = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2, a_mat, prep.cov3)
    d_j = d_a @ cam.R.T
    d_p = np.zeros((n, 3))
    d_p[:, 0] = d_j[:, 0, 2] * (-fx / zs ** 2)
    d_p[:, 1] = d_j[:, 1, 2] * (-fy / zs ** 2)
    d_p[:, 2] = (d_j[:, 0, 0] * (-fx / zs ** 2) + d_j[:, 1, 1] * (-fy / zs ** 2)
                 + d_j[:, 0, 2] * (2.0 * fx * x / zs ** 3)
                 + d_j[:, 1, 2] * (2.0 * fy * y / zs ** 3))

    # projected mean
    d_p[:, 0] += acc_mu2[:, 0] * fx / zs
    d_p[:, 1] += acc_mu2[:, 1] * fy / zs
    d_p[:, 2] += -acc_mu2[:, 0] * fx * x / zs ** 2 - acc_mu2[:, 1] * fy * y / zs ** 2

    d_mu3 += d_p @ cam.R

    # temporal density and the conditional slice
    mu4 = scene.mu4.astype(np.float64)
    q_l = core_math.normalize_quat(scene.q_left.astype(np.float64))
    q_r = core_math.normalize_quat(scene.q_right.astype(np.float64))
    rot4 = core_math.rot4d_from_pair(q_l, q_r)
    scales = np.exp(scene.log_scales.astype(np.float64))
    m_mat = rot4 * scales[:, None, :]
    cov4 = m_mat @ np.swapaxes(m_mat, 1, 2)
    var_t = cov4[:, 3, 3]
    cross = cov4[:, :3, 3]
    dt = prep.t - mu4[:, 3]

    d_mu_t = acc_density * prep.density * (dt / var_t)
    d_var_t = acc_density * prep.density * (0.5 * dt * dt / var_t ** 2)

    # mu3 = mu_xyz + cross dt / var_t
    d_mu_xyz = d_mu3.copy()
    d_cross = d_mu3 * (dt / var_t)[:, None]
    dot_mc = np.einsum("ni,ni->n", d_mu3, cross)
    d_mu_t += -dot_mc / var_t
    d_var_t += -dot_mc * dt / var_t ** 2

    # cov3 = cov_s - cross cross^T / var_t
    d_cov_s = d_cov3
    sym = d_cov3 + np.swapaxes(d_cov3, 1, 2)
    d_cross += -np.einsum("nij,nj->ni", sym, cross) / var_t[:, None]
    d_var_t += np.einsum("ni,nij,nj->n", cross, d_cov3, cross) / var_t ** 2

    d_cov4 = np.zeros((n, 4, 4))
    d_cov4[:, :3, :3] = d_cov_s
    d_cov4[:, :3, 3] = d_cross
    d_cov4[:, 3, 3] = d_var_t

    # cov4 = M M^T, M = rot4 diag(exp(log_scales))
    d_m = (d_cov4 + np.swapaxes(d_cov4, 1, 2)) @ m_mat
    d_rot4 = d_m * scales[:, None, :]
    d_log_scales = np.einsum("nij,nij->nj", d_m, m_mat)

    # rot4 = L(q_l) R(q_r); both factors are linear in their rotor
    lb = core_math.left_isoclinic(np.eye(4))
    rb = core_math.right_isoclinic(np.eye(4))
    l_mat = core_math.left_isoclinic(q_l)
    r_mat = core_math.right_isoclinic(q_r)
    d_l = d_rot4 @ np.swapaxes(r_mat, 1, 2)
    d_r = np.swapaxes(l_mat, 1, 2) @ d_rot4
    d_ql = np.einsum("nij,cij->nc", d_l, lb)
    d_qr = np.einsum("nij,cij->nc", d_r, rb)

    # rotor normalization q = q_raw / |q_raw|
    for d_q, raw, unit in ((d_ql, scene.q_left.astype(np.float64), q_l),
                           (d_qr, scene.q_right.astype(np.float64), q_r)):
        norm = np.linalg.norm(raw, axis=1)
        d_q -= unit * np.einsum("nc,nc->n", unit, d_q)[:, None]
        d_q /= norm[:, None]

    grads.mu4[:, :3] = d_mu_xyz
    grads.mu4[:, 3] = d_mu_t
    grads.q_left[:] = d_ql
    grads.q_right[:] = d_qr
    grads.log_scales[:] = d_log_scales
    grads.opacity_logit[:] = d_logit
    grads.sh[:] = d_sh
    grads.identity[:] = acc_ident

    for name in PARAM_BLOCKS:
        arr = getattr(grads, name)
        arr[~live] = 0.0
    if param_mask is not None:
        keep = set(param_mask)
        for name in PARAM_BLOCKS:
            if name not in keep:
                getattr(grads, name).fill(0.0)
    return grads
