"""Quaternion, dual-quaternion, and axis-angle helpers.

Conventions: quaternions are (w, x, y, z) arrays, rigid transforms are 4x4
row-major matrices acting on column vectors, axis-angle vectors encode a
rotation of ``|v|`` radians about ``v/|v|``. All functions broadcast over
leading axes and work in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-normalize along ``axis``; zero vectors are returned unchanged."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.where(n > 0.0, v / np.where(n > 0.0, n, 1.0), v)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x with [v]x @ u = v x u."""
    v = np.asarray(v, dtype=np.float64)
    m = np.zeros(v.shape[:-1] + (3, 3))
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series-expanded near zero angle."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    k = skew(v)
    k2 = k @ k
    t2 = theta * theta
    small = theta < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def so3_left_jacobian(v: np.ndarray) -> np.ndarray:
    """Left Jacobian J_l of SO(3): exp((v+d)^) ~ exp((J_l d)^) exp(v^)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    k = skew(v)
    k2 = k @ k
    t2 = theta * theta
    small = theta < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
        b = np.where(
            small, 1.0 / 6.0 - t2 / 120.0,
            (theta - np.sin(theta)) / np.where(small, 1.0, t2 * theta),
        )
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def axis_angle_apply_jacobian(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """d(R(v) u)/dv as a (..., 3, 3) matrix, u held fixed.

    Uses R(v+d) u ~ R(v) u - [R(v) u]x J_l(v) d.
    """
    ru = rotate_axis_angle(v, u)
    return -skew(ru) @ so3_left_jacobian(v)


def rotate_axis_angle(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", axis_angle_to_matrix(v), np.asarray(u, dtype=np.float64))


# --- quaternions -----------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(small, 0.5 - theta * theta / 48.0, np.sin(theta / 2.0) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(theta / 2.0)[..., None], s[..., None] * v], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
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


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion, Shepperd branching, vectorized."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    n = m.shape[0]
    q = np.empty((n, 4))
    t = np.einsum("nii->n", m)
    # candidate squared components (up to sign/scale)
    c0 = 1.0 + t
    c1 = 1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2]
    c2 = 1.0 - m[:, 0, 0] + m[:, 1, 1] - m[:, 2, 2]
    c3 = 1.0 - m[:, 0, 0] - m[:, 1, 1] + m[:, 2, 2]
    choice = np.argmax(np.stack([c0, c1, c2, c3], axis=1), axis=1)

    idx = choice == 0
    if np.any(idx):
        s = np.sqrt(c0[idx]) * 2.0
        q[idx, 0] = 0.25 * s
        q[idx, 1] = (m[idx, 2, 1] - m[idx, 1, 2]) / s
        q[idx, 2] = (m[idx, 0, 2] - m[idx, 2, 0]) / s
        q[idx, 3] = (m[idx, 1, 0] - m[idx, 0, 1]) / s
    idx = choice == 1
    if np.any(idx):
        s = np.sqrt(c1[idx]) * 2.0
        q[idx, 0] = (m[idx, 2, 1] - m[idx, 1, 2]) / s
        q[idx, 1] = 0.25 * s
        q[idx, 2] = (m[idx, 0, 1] + m[idx, 1, 0]) / s
        q[idx, 3] = (m[idx, 0, 2] + m[idx, 2, 0]) / s
    idx = choice == 2
    if np.any(idx):
        s = np.sqrt(c2[idx]) * 2.0
        q[idx, 0] = (m[idx, 0, 2] - m[idx, 2, 0]) / s
        q[idx, 1] = (m[idx, 0, 1] + m[idx, 1, 0]) / s
        q[idx, 2] = 0.25 * s
        q[idx, 3] = (m[idx, 1, 2] + m[idx, 2, 1]) / s
    idx = choice == 3
    if np.any(idx):
        s = np.sqrt(c3[idx]) * 2.0
        q[idx, 0] = (m[idx, 1, 0] - m[idx, 0, 1]) / s
        q[idx, 1] = (m[idx, 0, 2] + m[idx, 2, 0]) / s
        q[idx, 2] = (m[idx, 1, 2] + m[idx, 2, 1]) / s
        q[idx, 3] = 0.25 * s
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(batch + (4,))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=np.float64))


# --- rigid transforms ------------------------------------------------------

def make_rigid(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    out = np.zeros(rotation.shape[:-2] + (4, 4))
    out[..., :3, :3] = rotation
    out[..., :3, 3] = translation
    out[..., 3, 3] = 1.0
    return out


def rigid_inverse(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    r = np.swapaxes(t[..., :3, :3], -1, -2)
    return make_rigid(r, -np.einsum("...ij,...j->...i", r, t[..., :3, 3]))


def transform_points(t: np.ndarray, p: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return np.einsum("...ij,...j->...i", t[..., :3, :3], p) + t[..., :3, 3]


def check_rigid(transforms: np.ndarray, tol: float = 1e-4) -> None:
    """Reject non-rigid 4x4 transforms (det(R) must be 1 within tol)."""
    t = np.asarray(transforms, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise NumericError("transform contains non-finite values")
    r = t[..., :3, :3]
    det = np.linalg.det(r)
    if np.any(np.abs(det - 1.0) > tol):
        raise ParameterError(f"non-rigid transform: det(R) deviates by {np.max(np.abs(det - 1.0)):.3g}")
    ortho = np.einsum("...ij,...kj->...ik", r, r) - np.eye(3)
    if np.any(np.abs(ortho) > 10 * tol):
        raise ParameterError("non-rigid transform: rotation block is not orthonormal")


# --- dual quaternions ------------------------------------------------------

def dualquat_from_rigid(transforms: np.ndarray) -> np.ndarray:
    """4x4 rigid transforms to unit dual quaternions (..., 8) = (real, dual)."""
    t = np.asarray(transforms, dtype=np.float64)
    qr = quat_from_matrix(t[..., :3, :3])
    tq = np.concatenate([np.zeros(t.shape[:-2] + (1,)), t[..., :3, 3]], axis=-1)
    qd = 0.5 * quat_multiply(tq, qr)
    return np.concatenate([qr, qd], axis=-1)


def dualquat_normalize(dq: np.ndarray) -> np.ndarray:
    dq = np.asarray(dq, dtype=np.float64)
    n = np.linalg.norm(dq[..., :4], axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise NumericError("dual quaternion blend collapsed to zero real part")
    return dq / n


def dualquat_to_rigid(dq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit dual quaternion to (rotation, translation)."""
    dq = dualquat_normalize(dq)
    qr = dq[..., :4]
    qd = dq[..., 4:]
    r = quat_to_matrix(qr)
    t = 2.0 * quat_multiply(qd, quat_conjugate(qr))[..., 1:]
    return r, t


def dualquat_apply(dq: np.ndarray, p: np.ndarray) -> np.ndarray:
    r, t = dualquat_to_rigid(dq)
    return np.einsum("...ij,...j->...i", r, np.asarray(p, dtype=np.float64)) + t
