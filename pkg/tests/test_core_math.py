"""Quaternion/rotor algebra, 4D covariance, temporal conditioning, camera
projection, SH evaluation, and CIELAB conversion against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatsim.core_math import (
    COV2_FLOOR,
    SH_C0,
    SH_C1,
    Camera,
    build_cov4,
    condition_on_time,
    lab_to_rgb,
    left_isoclinic,
    normalize_quat,
    project_gaussian,
    quat_conjugate,
    quat_multiply,
    quat_to_rotmat,
    rgb_to_lab,
    right_isoclinic,
    rot4d_from_pair,
    rot4d_to_pair,
    sh_basis,
    sh_basis_jacobian,
    sh_coeff_count,
    sh_eval,
)
from splatsim.errors import DegenerateTimeError


def unit_quats(seed, n):
    rng = np.random.default_rng(seed)
    return normalize_quat(rng.normal(size=(n, 4)))


# -- quaternions --------------------------------------------------------------


def test_normalize_quat_unit_norm_and_zero_raises():
    q = normalize_quat(np.array([[2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]))
    assert np.allclose(np.linalg.norm(q, axis=-1), 1.0)
    with pytest.raises(Exception):
        normalize_quat(np.zeros(4))


def test_quat_multiply_matches_rotation_composition():
    qs = unit_quats(0, 8)
    for a, b in zip(qs[:4], qs[4:]):
        lhs = quat_to_rotmat(quat_multiply(a, b))
        rhs = quat_to_rotmat(a) @ quat_to_rotmat(b)
        assert np.abs(lhs - rhs).max() < 1e-12


def test_quat_conjugate_is_inverse():
    for q in unit_quats(1, 5):
        prod = quat_multiply(q, quat_conjugate(q))
        assert np.abs(prod - np.array([1.0, 0.0, 0.0, 0.0])).max() < 1e-12


def test_quat_to_rotmat_known_z_rotation():
    # 90 degrees about z: w = cos(45), z = sin(45)
    s = np.sqrt(0.5)
    R = quat_to_rotmat(np.array([s, 0.0, 0.0, s]))
    expect = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(R - expect).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rotmat_orthonormal(seed):
    q = unit_quats(seed, 1)[0]
    R = quat_to_rotmat(q)
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


# -- 4D rotors ----------------------------------------------------------------


def test_isoclinic_matrices_orthogonal_commuting():
    for ql, qr in zip(unit_quats(2, 4), unit_quats(3, 4)):
        L, Rm = left_isoclinic(ql), right_isoclinic(qr)
        for M in (L, Rm):
            assert np.abs(M @ M.T - np.eye(4)).max() < 1e-12
            assert abs(np.linalg.det(M) - 1.0) < 1e-10
        assert np.abs(L @ Rm - Rm @ L).max() < 1e-12


def test_rot4d_pair_round_trip():
    for ql, qr in zip(unit_quats(4, 6), unit_quats(5, 6)):
        rot = rot4d_from_pair(ql, qr)
        ql2, qr2 = rot4d_to_pair(rot)
        rot2 = rot4d_from_pair(ql2, qr2)
        assert np.abs(rot - rot2).max() < 1e-9


def test_rot4d_identity_pair():
    e = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.abs(rot4d_from_pair(e, e) - np.eye(4)).max() == 0.0


def test_build_cov4_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(7)
    log_s = rng.uniform(-2.0, 0.5, size=4)
    rot = rot4d_from_pair(*unit_quats(8, 2))
    cov = build_cov4(rot, log_s)
    assert np.abs(cov - cov.T).max() < 1e-15
    ev = np.sort(np.linalg.eigvalsh(cov))
    assert np.allclose(ev, np.sort(np.exp(2.0 * log_s)), rtol=1e-10)


# -- temporal conditioning ------------------------------------------------------


def test_condition_on_time_formula_exact():
    # hand-checkable slice: cov_xt = (0.5, 0, 0), cov_tt = 1
    cov4 = np.eye(4)
    cov4[0, 3] = cov4[3, 0] = 0.5
    mu4 = np.array([0.0, 0.0, 0.0, 2.0])
    for dt in (-1.0, 1.0):
        mu3, cov3, dens = condition_on_time(mu4, cov4, 2.0 + dt)
        assert np.array_equal(mu3, np.array([0.5 * dt, 0.0, 0.0]))
        # conditional covariance: var_x shrinks by cov_xt^2 / cov_tt
        assert abs(cov3[0, 0] - 0.75) < 1e-15
        assert abs(dens - np.exp(-0.5 * dt * dt)) < 1e-15
    _, _, peak = condition_on_time(mu4, cov4, 2.0)
    assert peak == 1.0


def test_condition_density_is_temporal_marginal():
    rng = np.random.default_rng(9)
    rot = rot4d_from_pair(*unit_quats(10, 2))
    cov4 = build_cov4(rot, rng.uniform(-1.0, 0.3, 4))
    mu4 = np.array([0.1, -0.2, 0.3, 0.5])
    t = 0.9
    _, _, dens = condition_on_time(mu4, cov4, t)
    expect = np.exp(-0.5 * (t - mu4[3]) ** 2 / cov4[3, 3])
    assert abs(dens - expect) < 1e-14


def test_condition_conditional_mean_matches_linear_regression():
    # Monte Carlo oracle: E[x | t] from samples of N(mu4, cov4)
    rng = np.random.default_rng(11)
    rot = rot4d_from_pair(*unit_quats(12, 2))
    cov4 = build_cov4(rot, np.array([-0.5, -0.7, -0.3, -0.4]))
    mu4 = np.array([0.0, 0.0, 0.0, 0.0])
    samples = rng.multivariate_normal(mu4, cov4, size=400_000)
    t0 = 0.3
    sel = np.abs(samples[:, 3] - t0) < 0.01
    mc_mean = samples[sel, :3].mean(axis=0)
    mu3, _, _ = condition_on_time(mu4, cov4, t0)
    assert np.abs(mu3 - mc_mean).max() < 0.01


def test_condition_rejects_degenerate_time_variance():
    cov4 = np.eye(4)
    cov4[3, 3] = 0.0
    with pytest.raises(DegenerateTimeError):
        condition_on_time(np.zeros(4), cov4, 0.0)


# -- cameras and projection -----------------------------------------------------


def test_look_at_geometry():
    eye, target = np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 0.0])
    cam = Camera.look_at(eye, target, 64, 48, fov_x_deg=60.0)
    assert np.abs(cam.cam_center() - eye).max() < 1e-12
    pc = cam.world_to_cam(target)
    # target sits on the optical axis in front of the camera
    assert abs(pc[0]) < 1e-12 and abs(pc[1]) < 1e-12
    assert pc[2] == pytest.approx(np.linalg.norm(eye - target))
    assert np.abs(cam.R @ cam.R.T - np.eye(3)).max() < 1e-12


def test_camera_dict_round_trip_exact():
    cam = Camera.look_at((1.0, -2.0, 0.5), (0.0, 0.1, 0.0), 32, 32, time=0.25)
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t)
    assert (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
    assert back.time == cam.time


def test_project_gaussian_pinhole_center_and_jacobian():
    cam = Camera(fx=100.0, fy=100.0, cx=31.5, cy=31.5, width=64, height=64)
    z = 2.0
    mu2, cov2, depth = project_gaussian(np.array([0.0, 0.0, z]),
                                        np.eye(3) * 1e-12, cam, floor=0.0)
    assert np.abs(mu2 - np.array([31.5, 31.5])).max() < 1e-9
    assert depth == pytest.approx(z)
    # first-order pixel shift: fx * dx / z
    dx = 1e-3
    mu2b, _, _ = project_gaussian(np.array([dx, 0.0, z]), np.eye(3) * 1e-12,
                                  cam, floor=0.0)
    assert mu2b[0] - mu2[0] == pytest.approx(cam.fx * dx / z, rel=1e-6)


def test_project_gaussian_covariance_floor():
    cam = Camera(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32)
    _, cov2, _ = project_gaussian(np.array([0.0, 0.0, 3.0]), np.eye(3) * 1e-10, cam)
    assert cov2[0, 0] >= COV2_FLOOR and cov2[1, 1] >= COV2_FLOOR


def test_project_gaussian_isotropic_scaling_oracle():
    # isotropic cov s^2 I at depth z on-axis projects to (fx s / z)^2 I
    cam = Camera(fx=80.0, fy=80.0, cx=16.0, cy=16.0, width=32, height=32)
    s, z = 0.1, 2.5
    _, cov2, _ = project_gaussian(np.array([0.0, 0.0, z]), np.eye(3) * s * s,
                                  cam, floor=0.0)
    expect = (cam.fx * s / z) ** 2
    assert np.abs(cov2 - np.eye(2) * expect).max() < 1e-9 * expect


# -- spherical harmonics ----------------------------------------------------------


def test_sh_coeff_count():
    assert [sh_coeff_count(d) for d in range(4)] == [1, 4, 9, 16]


def test_sh_basis_degree0_and_1_known_values():
    d = np.array([[0.0, 0.0, 1.0]])
    b = sh_basis(d, 1)[0]
    assert b[0] == pytest.approx(SH_C0)
    # order: (y, z, x) channels at degree 1
    assert b[1] == pytest.approx(-SH_C1 * 0.0)
    assert b[2] == pytest.approx(SH_C1 * 1.0)
    assert b[3] == pytest.approx(-SH_C1 * 0.0)


def test_sh_basis_orthonormal_on_sphere():
    # Monte Carlo integral of b_i b_j over the sphere = delta_ij / (4 pi) * 4 pi
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(200_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    B = sh_basis(dirs, 2)
    gram = B.T @ B / len(dirs) * 4.0 * np.pi
    assert np.abs(gram - np.eye(9)).max() < 0.05


def test_sh_eval_constant_term_offset_and_clamp():
    # color = clamp(basis . coeffs + 0.5): view-independent for dc-only coeffs
    coeffs = np.zeros((2, 9, 3))
    coeffs[:, 0, :] = 1.0
    dirs = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    out = sh_eval(coeffs, dirs, 2)
    assert np.abs(out - (SH_C0 + 0.5)).max() < 1e-12
    coeffs[:, 0, :] = 10.0  # clamps at 1
    assert np.abs(sh_eval(coeffs, dirs, 2) - 1.0).max() == 0.0


def test_sh_basis_jacobian_matches_fd():
    rng = np.random.default_rng(4)
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    jac = sh_basis_jacobian(dirs, 3)
    h = 1e-6
    for a in range(3):
        dp = dirs.copy()
        dm = dirs.copy()
        dp[:, a] += h
        dm[:, a] -= h
        fd = (sh_basis(dp, 3) - sh_basis(dm, 3)) / (2.0 * h)
        assert np.abs(jac[..., a] - fd).max() < 1e-6


# -- CIELAB -----------------------------------------------------------------------


# independent oracle: 4-digit IEC sRGB matrix, D65 white from matrix row sums
LAB_ORACLE = {
    (1.0, 0.0, 0.0): (53.2329, 80.1053, 67.2228),
    (0.0, 1.0, 0.0): (87.7370, -86.1884, 83.1861),
    (0.0, 0.0, 1.0): (32.3026, 79.1936, -107.8537),
    (0.2, 0.55, 0.35): (52.1283, -38.7570, 19.6136),
}


def test_rgb_to_lab_matches_independent_oracle():
    for rgb, lab in LAB_ORACLE.items():
        got = rgb_to_lab(np.array(rgb))
        assert np.abs(got - np.array(lab)).max() < 0.05


def test_lab_neutral_axis():
    assert np.abs(rgb_to_lab(np.ones(3)) - np.array([100.0, 0.0, 0.0])).max() < 1e-9
    assert np.abs(rgb_to_lab(np.zeros(3))).max() < 1e-9
    mid = rgb_to_lab(np.full(3, 0.5))
    assert mid[0] == pytest.approx(53.389, abs=1e-3)
    assert np.abs(mid[1:]).max() < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0)))
def test_lab_round_trip(rgb):
    rgb = np.array(rgb)
    back = lab_to_rgb(rgb_to_lab(rgb))
    assert np.abs(back - rgb).max() < 1e-6


def test_lab_vectorized_matches_scalar():
    rng = np.random.default_rng(5)
    img = rng.uniform(0.0, 1.0, size=(4, 3, 3))
    flat = rgb_to_lab(img)
    for i in range(4):
        for j in range(3):
            assert np.abs(flat[i, j] - rgb_to_lab(img[i, j])).max() < 1e-12
