"""Sim(3) group math.

A similarity ``T = (s, R, t)`` acts on points as ``T . p = s R p + t``.
Tangent vectors are 7-vectors ordered ``(nu[0:3], omega[3:6], lam[6])``
where ``nu`` is the translational part, ``omega`` the rotation vector and
``lam`` the log-scale.

Convention
----------
The exponential is the matrix exponential of

    [[lam*I + [omega]x, nu],
     [0,                 0]]

so ``exp(x) = (e^lam, exp_so3(omega), V(lam, omega) @ nu)`` with
``V = integral_0^1 e^(lam*u) exp(u*[omega]x) du``.  Scale and rotation are
coupled through ``V`` only; the log inverts this exactly.  The adjoint
satisfies ``log(T exp(x) T^-1) = Ad_T x``.

Rotations are stored as unit quaternions ``(w, x, y, z)`` in the canonical
hemisphere (``w >= 0``; at ``w == 0`` the leading nonzero vector component is
positive), renormalised after every composition.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

SMALL = 1e-6
# V coefficients lose ~1e-16/theta to cancellation; the series is exact to
# theta^6 here
THETA_SERIES = 1e-3
PI_TOL = 1e-12

__all__ = [
    "Sim3",
    "compose",
    "inverse",
    "act",
    "exp",
    "log",
    "adjoint",
    "adjoint_matrix",
    "ad_matrix",
    "hat3",
    "tangent",
    "left_jacobian",
    "right_jacobian",
    "quat_multiply",
    "quat_to_matrix",
    "matrix_to_quat",
    "canonical_quat",
    "Sim3Batch",
]


# --------------------------------------------------------------------------
# quaternion helpers


def canonical_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    # renormalising an already-unit quaternion can flip low bits; skip it so
    # serialised transforms round-trip exactly
    if abs(n - 1.0) > 1e-15:
        q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_matrices(q):
    """Vectorised ``quat_to_matrix`` for an (N, 4) array."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (R[0, 0], R[1, 1], R[2, 2])
    if tr >= max(diag):
        r = math.sqrt(1.0 + tr)
        w = 0.5 * r
        f = 0.5 / r
        q = [w, (R[2, 1] - R[1, 2]) * f, (R[0, 2] - R[2, 0]) * f, (R[1, 0] - R[0, 1]) * f]
    elif diag[0] >= diag[1] and diag[0] >= diag[2]:
        r = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        f = 0.5 / r
        q = [(R[2, 1] - R[1, 2]) * f, 0.5 * r, (R[0, 1] + R[1, 0]) * f, (R[0, 2] + R[2, 0]) * f]
    elif diag[1] >= diag[2]:
        r = math.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        f = 0.5 / r
        q = [(R[0, 2] - R[2, 0]) * f, (R[0, 1] + R[1, 0]) * f, 0.5 * r, (R[1, 2] + R[2, 1]) * f]
    else:
        r = math.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        f = 0.5 / r
        q = [(R[1, 0] - R[0, 1]) * f, (R[0, 2] + R[2, 0]) * f, (R[1, 2] + R[2, 1]) * f, 0.5 * r]
    return canonical_quat(q)


def hat3(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def tangent(nu=(0.0, 0.0, 0.0), omega=(0.0, 0.0, 0.0), lam=0.0):
    """Pack a Sim(3) tangent vector."""
    x = np.zeros(7)
    x[0:3] = nu
    x[3:6] = omega
    x[6] = lam
    return x


# --------------------------------------------------------------------------
# V-matrix coefficients


def _moment(n, sigma):
    """integral_0^1 e^(sigma u) u^n du."""
    if abs(sigma) <= 8.0:
        total = 0.0
        term = 1.0
        for k in range(80):
            total += term / (n + k + 1)
            term *= sigma / (k + 1)
            if abs(term) < 1e-20:
                break
        return total
    m = math.expm1(sigma) / sigma
    for j in range(1, n + 1):
        m = (math.exp(sigma) - j * m) / sigma
    return m


def _v_coeffs(sigma, theta):
    """Coefficients (a0, a1, a2) with V = a0 I + a1 W + a2 W^2, W = [omega]x."""
    if abs(sigma) < SMALL:
        a0 = 1.0 + sigma / 2.0 + sigma * sigma / 6.0
    else:
        a0 = math.expm1(sigma) / sigma
    if theta < THETA_SERIES:
        t2 = theta * theta
        a1 = _moment(1, sigma) - t2 / 6.0 * _moment(3, sigma) + t2 * t2 / 120.0 * _moment(5, sigma)
        a2 = (
            0.5 * _moment(2, sigma)
            - t2 / 24.0 * _moment(4, sigma)
            + t2 * t2 / 720.0 * _moment(6, sigma)
        )
        return a0, a1, a2
    es = math.exp(sigma)
    st, ct = math.sin(theta), math.cos(theta)
    den = sigma * sigma + theta * theta
    int_sin = (es * (sigma * st - theta * ct) + theta) / den
    int_cos = (es * (sigma * ct + theta * st) - sigma) / den
    a1 = int_sin / theta
    a2 = (a0 - int_cos) / (theta * theta)
    return a0, a1, a2


def _v_matrix(sigma, omega):
    theta = float(np.linalg.norm(omega))
    a0, a1, a2 = _v_coeffs(sigma, theta)
    W = hat3(omega)
    return a0 * np.eye(3) + a1 * W + a2 * (W @ W)


def _so3_exp_quat(omega):
    theta = float(np.linalg.norm(omega))
    if theta < SMALL:
        # sin(theta/2)/theta ~ 1/2 - theta^2/48
        k = 0.5 - theta * theta / 48.0
        w = 1.0 - theta * theta / 8.0
    else:
        k = math.sin(0.5 * theta) / theta
        w = math.cos(0.5 * theta)
    return np.array([w, k * omega[0], k * omega[1], k * omega[2]])


def _so3_log_quat(q):
    """Rotation vector of a canonical quaternion (w >= 0)."""
    w = q[0]
    v = q[1:]
    n = float(np.linalg.norm(v))
    if n < SMALL:
        # 2 atan(n/w) / n ~ (2/w) (1 - n^2 / (3 w^2))
        return (2.0 / w) * (1.0 - (n * n) / (3.0 * w * w)) * v
    if abs(w) < PI_TOL:
        # angle pi up to rounding: pick the axis sign deterministically
        lead = v[np.flatnonzero(np.abs(v) > PI_TOL)[0]]
        return (math.pi / n) * (v if lead > 0.0 else -v)
    theta = 2.0 * math.atan2(n, w)
    return (theta / n) * v


# --------------------------------------------------------------------------
# the group element


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform ``p -> s R p + t``; immutable."""

    scale: float
    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = float(self.scale)
        if not s > 0.0 or not math.isfinite(s):
            raise ValueError(f"Sim3 scale must be positive and finite, got {self.scale!r}")
        q = np.asarray(self.quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("Sim3 rotation quaternion must have unit norm")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "quat", canonical_quat(q))
        object.__setattr__(self, "translation", t)
        self.quat.flags.writeable = False
        self.translation.flags.writeable = False

    # constructors ---------------------------------------------------------
    @classmethod
    def identity(cls):
        return cls(1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotation_matrix(cls, R, translation=(0.0, 0.0, 0.0), scale=1.0):
        R = np.asarray(R, dtype=np.float64)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation matrix is not in SO(3)")
        return cls(scale, matrix_to_quat(R), translation)

    @classmethod
    def from_matrix(cls, M):
        """From a 4x4 homogeneous similarity matrix."""
        M = np.asarray(M, dtype=np.float64)
        sR = M[:3, :3]
        s = np.cbrt(np.linalg.det(sR))
        return cls.from_rotation_matrix(sR / s, M[:3, 3], s)

    @classmethod
    def from_array(cls, a):
        """Inverse of :meth:`to_array` (scale, qw, qx, qy, qz, tx, ty, tz)."""
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0], a[1:5], a[5:8])

    # views ------------------------------------------------------------------
    @cached_property
    def rotation(self):
        R = quat_to_matrix(self.quat)
        R.flags.writeable = False
        return R

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def to_array(self):
        return np.concatenate([[self.scale], self.quat, self.translation])

    def to_bytes(self):
        return struct.pack("<8d", *self.to_array())

    @classmethod
    def from_bytes(cls, b):
        return cls.from_array(struct.unpack("<8d", b))

    # group operations -------------------------------------------------------
    def __matmul__(self, other):
        if isinstance(other, Sim3):
            return compose(self, other)
        return NotImplemented

    def inverse(self):
        return inverse(self)

    def act(self, p):
        return act(self, p)

    def log(self):
        return log(self)

    def adjoint_matrix(self):
        return adjoint_matrix(self)

    def allclose(self, other, atol=1e-9):
        """Component-wise comparison (quaternion sign already canonical)."""
        return (
            abs(self.scale - other.scale) <= atol
            and np.allclose(self.quat, other.quat, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        q = np.array2string(self.quat, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Sim3(scale={self.scale:.6g}, quat={q}, translation={t})"


def compose(a, b):
    """``a o b``: apply ``b`` first, then ``a``."""
    q = quat_multiply(a.quat, b.quat)
    q = q / np.linalg.norm(q)
    t = a.scale * (a.rotation @ b.translation) + a.translation
    return Sim3(a.scale * b.scale, q, t)


def inverse(t):
    s_inv = 1.0 / t.scale
    q = t.quat * np.array([1.0, -1.0, -1.0, -1.0])
    Rt = t.rotation.T
    return Sim3(s_inv, q, -s_inv * (Rt @ t.translation))


def act(t, p):
    """``s R p + t`` for a single 3-vector or an (N, 3) array."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return t.scale * (t.rotation @ p) + t.translation
    return t.scale * (p @ t.rotation.T) + t.translation


def exp(x):
    x = np.asarray(x, dtype=np.float64)
    nu, omega, lam = x[0:3], x[3:6], float(x[6])
    q = _so3_exp_quat(omega)
    q = q / np.linalg.norm(q)
    V = _v_matrix(lam, omega)
    return Sim3(math.exp(lam), q, V @ nu)


def log(t):
    """Canonical logarithm.

    At a rotation angle of exactly pi both ``omega`` and ``-omega`` are valid;
    the canonical quaternion makes the returned axis have a nonnegative
    leading nonzero component.
    """
    omega = _so3_log_quat(t.quat)
    lam = math.log(t.scale)
    V = _v_matrix(lam, omega)
    nu = np.linalg.solve(V, t.translation)
    out = np.empty(7)
    out[0:3] = nu
    out[3:6] = omega
    out[6] = lam
    return out


def adjoint_matrix(t):
    """7x7 matrix ``Ad_T`` with ``log(T exp(x) T^-1) = Ad_T x``."""
    R = t.rotation
    A = np.zeros((7, 7))
    A[0:3, 0:3] = t.scale * R
    A[0:3, 3:6] = hat3(t.translation) @ R
    A[0:3, 6] = -t.translation
    A[3:6, 3:6] = R
    A[6, 6] = 1.0
    return A


def adjoint(t, x):
    return adjoint_matrix(t) @ np.asarray(x, dtype=np.float64)


def ad_matrix(x):
    """Lie bracket matrix: ``ad_x y = [x, y]``."""
    nu, omega, lam = x[0:3], x[3:6], x[6]
    A = np.zeros((7, 7))
    W = hat3(omega)
    A[0:3, 0:3] = lam * np.eye(3) + W
    A[0:3, 3:6] = hat3(nu)
    A[0:3, 6] = -nu
    A[3:6, 3:6] = W
    return A


def left_jacobian(x):
    """``sum_k ad_x^k / (k+1)!``, evaluated as a block matrix exponential."""
    from scipy.linalg import expm

    B = np.zeros((14, 14))
    B[:7, :7] = ad_matrix(np.asarray(x, dtype=np.float64))
    B[:7, 7:] = np.eye(7)
    return expm(B)[:7, 7:]


def right_jacobian(x):
    return left_jacobian(-np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# batched operations


@dataclass(frozen=True, eq=False)
class Sim3Batch:
    """``N`` similarities as arrays: scales ``(N,)``, quats ``(N, 4)``, translations ``(N, 3)``.

    Used by the solver to evaluate many residuals per call; results agree
    with the scalar functions to rounding.
    """

    scale: np.ndarray
    quat: np.ndarray
    translation: np.ndarray

    @classmethod
    def stack(cls, items):
        items = list(items)
        if not items:
            return cls(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
        return cls(
            np.array([x.scale for x in items]),
            np.array([x.quat for x in items]),
            np.array([x.translation for x in items]),
        )

    def __len__(self):
        return len(self.scale)

    def __getitem__(self, idx):
        return Sim3Batch(self.scale[idx], self.quat[idx], self.translation[idx])

    def item(self, i):
        return Sim3(float(self.scale[i]), self.quat[i], self.translation[i])

    @cached_property
    def rotation(self):
        return quats_to_matrices(self.quat)

    def __matmul__(self, other):
        q = _quat_multiply_rows(self.quat, other.quat)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        t = self.scale[:, None] * np.einsum("nij,nj->ni", self.rotation, other.translation) + self.translation
        return Sim3Batch(self.scale * other.scale, _canonical_rows(q), t)

    def inverse(self):
        s_inv = 1.0 / self.scale
        q = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        t = -s_inv[:, None] * np.einsum("nji,nj->ni", self.rotation, self.translation)
        return Sim3Batch(s_inv, _canonical_rows(q), t)

    def act(self, p):
        """Row-wise ``s_i R_i p_i + t_i`` for ``p`` of shape ``(N, 3)``."""
        return self.scale[:, None] * np.einsum("nij,nj->ni", self.rotation, p) + self.translation

    def log(self):
        q = _canonical_rows(self.quat)
        w, v = q[:, 0], q[:, 1:]
        n = np.linalg.norm(v, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(n < SMALL, (2.0 / w) * (1.0 - n * n / (3.0 * w * w)), 2.0 * np.arctan2(n, w) / n)
        omega = f[:, None] * v
        lam = np.log(self.scale)
        V = _v_matrices(lam, omega)
        nu = np.linalg.solve(V, self.translation[..., None])[..., 0]
        return np.concatenate([nu, omega, lam[:, None]], axis=1)

    def adjoint_matrices(self):
        R = self.rotation
        t = self.translation
        n = len(self)
        A = np.zeros((n, 7, 7))
        A[:, 0:3, 0:3] = self.scale[:, None, None] * R
        A[:, 0:3, 3:6] = _hat_rows(t) @ R
        A[:, 0:3, 6] = -t
        A[:, 3:6, 3:6] = R
        A[:, 6, 6] = 1.0
        return A


def _quat_multiply_rows(a, b):
    aw, ax, ay, az = a.T
    bw, bx, by, bz = b.T
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def _canonical_rows(q):
    """Row-wise :func:`canonical_quat` sign rule (no renormalisation)."""
    sign = np.ones(len(q))
    for c in range(4):
        undecided = sign == 1.0
        nz = q[:, c] != 0.0
        flip = undecided & nz & (q[:, c] < 0.0)
        sign = np.where(flip, -1.0, sign)
        # rows decided by this component stop here
        sign = np.where(undecided & nz & ~flip, 2.0, sign)
    return q * np.where(sign < 0, -1.0, 1.0)[:, None]


def _hat_rows(v):
    n = len(v)
    W = np.zeros((n, 3, 3))
    W[:, 0, 1], W[:, 0, 2] = -v[:, 2], v[:, 1]
    W[:, 1, 0], W[:, 1, 2] = v[:, 2], -v[:, 0]
    W[:, 2, 0], W[:, 2, 1] = -v[:, 1], v[:, 0]
    return W


def _moments(n, sigma):
    """Vectorised :func:`_moment`."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = np.zeros_like(sigma)
    term = np.ones_like(sigma)
    small = np.abs(sigma) <= 8.0
    ss = np.where(small, sigma, 0.0)
    for k in range(80):
        total += term / (n + k + 1)
        term = term * ss / (k + 1)
        if np.all(np.abs(term) < 1e-20):
            break
    if small.all():
        return total
    big = np.where(small, 1.0, sigma)
    m = np.expm1(big) / big
    for j in range(1, n + 1):
        m = (np.exp(big) - j * m) / big
    return np.where(small, total, m)


def _v_matrices(sigma, omega):
    theta = np.linalg.norm(omega, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        a0 = np.where(np.abs(sigma) < SMALL, 1.0 + sigma / 2.0 + sigma * sigma / 6.0, np.expm1(sigma) / sigma)
        es = np.exp(sigma)
        st, ct = np.sin(theta), np.cos(theta)
        den = sigma * sigma + theta * theta
        int_sin = (es * (sigma * st - theta * ct) + theta) / den
        int_cos = (es * (sigma * ct + theta * st) - sigma) / den
        a1 = int_sin / theta
        a2 = (a0 - int_cos) / (theta * theta)
    series = theta < THETA_SERIES
    if series.any():
        t2 = theta * theta
        a1s = _moments(1, sigma) - t2 / 6.0 * _moments(3, sigma) + t2 * t2 / 120.0 * _moments(5, sigma)
        a2s = 0.5 * _moments(2, sigma) - t2 / 24.0 * _moments(4, sigma) + t2 * t2 / 720.0 * _moments(6, sigma)
        a1 = np.where(series, a1s, a1)
        a2 = np.where(series, a2s, a2)
    W = _hat_rows(omega)
    return a0[:, None, None] * np.eye(3) + a1[:, None, None] * W + a2[:, None, None] * (W @ W)


def ad_matrices(x):
    """Row-wise :func:`ad_matrix` for tangents of shape ``(N, 7)``."""
    x = np.asarray(x, dtype=np.float64)
    nu, omega, lam = x[:, 0:3], x[:, 3:6], x[:, 6]
    W = _hat_rows(omega)
    A = np.zeros((len(x), 7, 7))
    A[:, 0:3, 0:3] = lam[:, None, None] * np.eye(3) + W
    A[:, 0:3, 3:6] = _hat_rows(nu)
    A[:, 0:3, 6] = -nu
    A[:, 3:6, 3:6] = W
    return A


def right_jacobians(x):
    """Row-wise :func:`right_jacobian`."""
    from scipy.linalg import expm

    x = np.asarray(x, dtype=np.float64)
    B = np.zeros((len(x), 14, 14))
    B[:, :7, :7] = ad_matrices(-x)
    B[:, :7, 7:] = np.eye(7)
    return expm(B)[:, :7, 7:]
