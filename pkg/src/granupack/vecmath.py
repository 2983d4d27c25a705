"""Small quaternion and rotation helpers on plain numpy arrays.

Quaternions are scalar-first (w, x, y, z) unit quaternions mapping body
frame to world frame. Every function accepts either a single quaternion
of shape (4,) / vector of shape (3,) or a batch with a leading axis.
"""
from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
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


def quat_from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about `axis`.

    A zero axis yields the identity rotation.
    """
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    unit = axis / safe
    half = 0.5 * angle
    s = np.sin(half)[..., None] * np.where(norm > 0.0, 1.0, 0.0)
    w = np.cos(np.where(norm[..., 0] > 0.0, half, 0.0))
    return np.concatenate([w[..., None], unit * s], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (body -> world); batched input gives (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    row0 = np.stack([1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)], axis=-1)
    row1 = np.stack([2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)], axis=-1)
    row2 = np.stack([2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v from body to world frame."""
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=float))


def quat_rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v from world to body frame."""
    return np.einsum("...ji,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=float))


def random_unit_quats(n: int, rng: np.random.Generator) -> np.ndarray:
    """Quaternions uniform on the rotation group (normalized 4D Gaussians)."""
    q = rng.standard_normal((n, 4))
    # Measure-zero guard: a zero draw would not normalize.
    bad = np.linalg.norm(q, axis=1) < 1e-12
    q[bad] = IDENTITY_QUAT
    return quat_normalize(q)
