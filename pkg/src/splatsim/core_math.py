"""Scalar math kernels: rotors, 4D covariance assembly, time conditioning,
EWA projection, spherical-harmonic color, CIELAB conversion.

Every function broadcasts over leading axes so the same implementation serves
both the per-Gaussian reference path and the batched rasterizer. Inputs are
upcast to float64; outputs are float64.

Conventions
-----------
4-vectors are ordered (x, y, z, t). Quaternions are (w, x, y, z) with the
scalar first. A 4-vector maps to the quaternion v = t + x*i + y*j + z*k, so
left/right quaternion multiplication act linearly on (x, y, z, t) and a pair
of unit rotors (l, r) gives the rotation v -> l * v * r. Spatial-only
rotation by a unit quaternion q is the pair (q, conj(q)).

Cameras follow x-right / y-down / z-forward; world-to-camera is
x_cam = R @ x_world + t. Pixel (row i, col j) is sampled at (x=j, y=i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTimeError, InvalidRotationError, ShapeError

# Projection constants shared by both renderers.
NEAR_PLANE = 0.01
COV2_FLOOR = 0.3  # px^2 added to the projected covariance diagonal
TIME_VAR_MIN = 1e-12

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ShapeError("SH degree must be in [0, %d], got %r" % (MAX_SH_DEGREE, degree))
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# quaternions and 4D rotations


def normalize_quat(q):
    """Normalize quaternion(s) to unit length.

    Idempotent. Raises InvalidRotationError on (near-)zero norm.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidRotationError("zero-norm quaternion cannot be normalized")
    return q / norm


def quat_multiply(a, b):
    """Hamilton product a * b, both (w, x, y, z)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_to_rotmat(q):
    """Unit-normalize q and return the 3x3 rotation matrix (batched)."""
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def left_isoclinic(q):
    """Matrix of v -> q * v acting on (x, y, z, t) coordinates (batched)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (4, 4), dtype=np.float64)
    m[..., 0, 0] = w
    m[..., 0, 1] = -z
    m[..., 0, 2] = y
    m[..., 0, 3] = x
    m[..., 1, 0] = z
    m[..., 1, 1] = w
    m[..., 1, 2] = -x
    m[..., 1, 3] = y
    m[..., 2, 0] = -y
    m[..., 2, 1] = x
    m[..., 2, 2] = w
    m[..., 2, 3] = z
    m[..., 3, 0] = -x
    m[..., 3, 1] = -y
    m[..., 3, 2] = -z
    m[..., 3, 3] = w
    return m


def right_isoclinic(q):
    """Matrix of v -> v * q acting on (x, y, z, t) coordinates (batched)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (4, 4), dtype=np.float64)
    m[..., 0, 0] = w
    m[..., 0, 1] = z
    m[..., 0, 2] = -y
    m[..., 0, 3] = x
    m[..., 1, 0] = -z
    m[..., 1, 1] = w
    m[..., 1, 2] = x
    m[..., 1, 3] = y
    m[..., 2, 0] = y
    m[..., 2, 1] = -x
    m[..., 2, 2] = w
    m[..., 2, 3] = z
    m[..., 3, 0] = -x
    m[..., 3, 1] = -y
    m[..., 3, 2] = -z
    m[..., 3, 3] = w
    return m


def rot4d_from_pair(q_left, q_right):
    """SO(4) matrix of the isoclinic pair: v -> q_left * v * q_right.

    Both rotors must already be unit quaternions (within 1e-6); raises
    InvalidRotationError otherwise. Output is orthonormal with det +1.
    """
    q_left = np.asarray(q_left, dtype=np.float64)
    q_right = np.asarray(q_right, dtype=np.float64)
    for q in (q_left, q_right):
        norm = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(norm - 1.0) > 1e-6):
            raise InvalidRotationError("rot4d_from_pair requires unit rotors")
    return left_isoclinic(q_left) @ right_isoclinic(q_right)


def _isoclinic_basis():
    eye = np.eye(4)
    lefts = left_isoclinic(eye)   # (4,4,4): L(e_a)
    rights = right_isoclinic(eye)
    return lefts, rights


def rot4d_to_pair(rot4):
    """Factor R in SO(4) into unit rotors (l, r) with R = L(l) @ R(r).

    The 16 matrices L(e_a) @ R(e_b) are Frobenius-orthogonal with norm 2, so
    K[a, b] = <R, L(e_a) R(e_b)> / 4 recovers the rank-1 outer product
    l r^T; its dominant singular pair gives the rotors. Sign fixed so the
    left rotor's first nonzero component is positive. Raises
    InvalidRotationError when the input is not a rotation (det +1,
    orthonormal within 1e-6).
    """
    rot4 = np.asarray(rot4, dtype=np.float64)
    if rot4.shape != (4, 4):
        raise ShapeError("rot4d_to_pair expects a single 4x4 matrix")
    if not np.allclose(rot4 @ rot4.T, np.eye(4), atol=1e-6):
        raise InvalidRotationError("matrix is not orthonormal")
    if np.linalg.det(rot4) < 0:
        raise InvalidRotationError("matrix has det -1, not a rotation")
    lefts, rights = _isoclinic_basis()
    k = np.einsum("aij,bjk,ik->ab", lefts, rights, rot4) / 4.0
    u, s, vt = np.linalg.svd(k)
    q_left = u[:, 0] * math.sqrt(s[0])
    q_right = vt[0] * math.sqrt(s[0])
    nz = np.flatnonzero(np.abs(q_left) > 1e-8)
    if nz.size and q_left[nz[0]] < 0:
        q_left, q_right = -q_left, -q_right
    q_left = normalize_quat(q_left)
    q_right = normalize_quat(q_right)
    recon = rot4d_from_pair(q_left, q_right)
    if not np.allclose(recon, rot4, atol=1e-6):
        raise InvalidRotationError("matrix is not in SO(4)")
    return q_left, q_right


def build_cov4(rot4, log_scales):
    """Sigma4 = R S S^T R^T with S = diag(exp(log_scales)). Batched."""
    rot4 = np.asarray(rot4, dtype=np.float64)
    scales = np.exp(np.asarray(log_scales, dtype=np.float64))
    rs = rot4 * scales[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


def condition_on_time(mu4, cov4, t):
    """Slice a 4D Gaussian at time t.

    Returns (mu3, cov3, density) where
      mu3     = mu_xyz + cov_xt / cov_tt * (t - mu_t)
      cov3    = cov_xyz - cov_xt cov_xt^T / cov_tt
      density = exp(-(t - mu_t)^2 / (2 cov_tt))   (unnormalized, peak 1)

    Raises DegenerateTimeError when any temporal variance <= 1e-12.
    """
    mu4 = np.asarray(mu4, dtype=np.float64)
    cov4 = np.asarray(cov4, dtype=np.float64)
    var_t = cov4[..., 3, 3]
    if np.any(var_t <= TIME_VAR_MIN):
        raise DegenerateTimeError("temporal variance <= %g" % TIME_VAR_MIN)
    dt = np.asarray(t, dtype=np.float64) - mu4[..., 3]
    cross = cov4[..., :3, 3]
    mu3 = mu4[..., :3] + cross * (dt / var_t)[..., None]
    cov3 = cov4[..., :3, :3] - cross[..., :, None] * cross[..., None, :] / var_t[..., None, None]
    density = np.exp(-0.5 * dt * dt / var_t)
    return mu3, cov3, density


# ---------------------------------------------------------------------------
# cameras and projection


@dataclass
class Camera:
    """Pinhole camera with a timestamp. R, t map world to camera coords."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def world_to_cam(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t

    def cam_center(self):
        return -self.R.T @ self.t

    def right_axis(self):
        return self.R[0]

    def down_axis(self):
        return self.R[1]

    def forward_axis(self):
        return self.R[2]

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "time": float(self.time),
        }

    @staticmethod
    def from_dict(d):
        return Camera(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"],
            R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.array(d["t"], dtype=np.float64),
            time=d.get("time", 0.0),
        )

    @staticmethod
    def look_at(eye, target, width, height, fov_x_deg=60.0, up=(0.0, 0.0, 1.0), time=0.0):
        """Camera at eye looking toward target, world up as given."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ShapeError("look_at eye and target coincide")
        fwd = fwd / n
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:  # looking straight along up: pick an arbitrary right
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        t = -R @ eye
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) * 0.5)
        return Camera(fx=fx, fy=fx, cx=(width - 1) * 0.5, cy=(height - 1) * 0.5,
                      width=width, height=height, R=R, t=t, time=time)


def project_gaussian(mu3, cov3, cam, floor=COV2_FLOOR):
    """EWA projection of 3D Gaussian(s) through a pinhole camera.

    Returns (mu2, cov2, depth): pixel-space mean, 2x2 covariance with
    `floor` px^2 added to the diagonal, and camera-frame depth. No culling
    here; callers treat depth <= NEAR_PLANE as behind-camera.
    """
    mu3 = np.asarray(mu3, dtype=np.float64)
    cov3 = np.asarray(cov3, dtype=np.float64)
    p = mu3 @ cam.R.T + cam.t
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    mu2 = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=-1)
    j = np.zeros(p.shape[:-1] + (2, 3), dtype=np.float64)
    j[..., 0, 0] = cam.fx / zs
    j[..., 0, 2] = -cam.fx * x / (zs * zs)
    j[..., 1, 1] = cam.fy / zs
    j[..., 1, 2] = -cam.fy * y / (zs * zs)
    jw = j @ cam.R
    cov2 = jw @ cov3 @ np.swapaxes(jw, -1, -2)
    cov2 = cov2 + floor * np.eye(2)
    return mu2, cov2, z


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree):
    """Real SH basis values at unit direction(s), shape (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    n = sh_coeff_count(degree)
    b = np.empty(dirs.shape[:-1] + (n,), dtype=np.float64)
    b[..., 0] = SH_C0
    if degree >= 1:
        b[..., 1] = -SH_C1 * y
        b[..., 2] = SH_C1 * z
        b[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 4] = SH_C2[0] * x * y
        b[..., 5] = SH_C2[1] * y * z
        b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        b[..., 7] = SH_C2[3] * x * z
        b[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        b[..., 10] = SH_C3[1] * x * y * z
        b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        b[..., 14] = SH_C3[5] * z * (xx - yy)
        b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_jacobian(dirs, degree):
    """d(basis)/d(direction components), shape (..., (degree+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    n = sh_coeff_count(degree)
    g = np.zeros(dirs.shape[:-1] + (n, 3), dtype=np.float64)
    zero = np.zeros_like(x)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
        g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
        g[..., 6, 2] = SH_C2[2] * (4.0 * z)
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * (2.0 * x)
        g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 9, 2] = zero
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
        g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
        g[..., 15, 2] = zero
    return g


def sh_eval(coeffs, dirs, degree):
    """Evaluate SH color: clamp(sum(basis * coeffs) + 0.5, 0, 1).

    coeffs has shape (..., (degree+1)^2, 3); dirs are unit directions.
    Raises ShapeError when the coefficient count does not match the degree.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = sh_coeff_count(degree)
    if coeffs.shape[-2] != n:
        raise ShapeError(
            "expected %d SH coefficients for degree %d, got %d" % (n, degree, coeffs.shape[-2])
        )
    b = sh_basis(dirs, degree)
    rgb = np.einsum("...k,...kc->...c", b, coeffs) + 0.5
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------------------
# CIELAB (D65, sRGB)

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
# White point consistent with the matrix rows so (1,1,1) maps to L=100, a=b~0.
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_LAB_EPS = 216.0 / 24389.0  # (6/29)^3
_LAB_KAPPA = 24389.0 / 27.0


def _srgb_decode(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c):
    c = np.asarray(c, dtype=np.float64)
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t):
    return np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def _lab_f_inv(f):
    f3 = f ** 3
    return np.where(f3 > _LAB_EPS, f3, (116.0 * f - 16.0) / _LAB_KAPPA)


def rgb_to_lab(rgb):
    """sRGB in [0,1] (...,3) -> CIELAB (D65). L in [0,100]."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    xyz = _srgb_decode(rgb) @ _SRGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    l = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([l, a, b], axis=-1)


def lab_to_rgb(lab):
    """CIELAB (D65) -> sRGB clamped to [0,1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    rgb = _srgb_encode(xyz @ _XYZ_TO_SRGB.T)
    return np.clip(rgb, 0.0, 1.0)
