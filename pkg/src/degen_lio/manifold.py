"""SO(3) algebra used by every state operation.

Quaternions are Hamilton, stored ``(w, x, y, z)``. Perturbations are on the
right: ``R = R_hat @ exp(dtheta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Cross-product matrix, ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of cross-product matrices for an ``(N, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; pivots on the largest of trace and diagonal."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    diag = np.diag(m)
    k = int(np.argmax(diag))
    if tr >= diag[k]:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i, j, l = k, (k + 1) % 3, (k + 2) % 3
        s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[l, l])
        q = np.empty(4)
        q[0] = (m[l, j] - m[j, l]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + l] = (m[l, i] + m[i, l]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion rotation. Normalized on construction."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        object.__setattr__(self, "q", q / np.linalg.norm(q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(matrix_to_quat(m))

    @cached_property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.q, other.q))

    def inverse(self) -> "Rotation":
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def __repr__(self) -> str:
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


def exp_so3(phi) -> Rotation:
    """Axis-angle vector to rotation (Rodrigues, quaternion form)."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    if theta < SMALL_ANGLE:
        # second-order Taylor of cos(theta/2) and sin(theta/2)/theta
        w = 1.0 - theta * theta / 8.0
        v = 0.5 * phi * (1.0 - theta * theta / 24.0)
        return Rotation(np.concatenate(([w], v)))
    half = 0.5 * theta
    return Rotation(np.concatenate(([np.cos(half)], np.sin(half) / theta * phi)))


def log_so3(r: Rotation) -> np.ndarray:
    """Principal logarithm, norm in ``[0, pi]``.

    At exactly pi the axis sign is fixed so that its largest-magnitude
    component is positive (the largest-diagonal pivot of ``R + I``).
    """
    q = r.q if r.q[0] >= 0 else -r.q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    if s < SMALL_ANGLE:
        return 2.0 * v / w * (1.0 - s * s / (3.0 * w * w))
    theta = 2.0 * np.arctan2(s, w)
    axis = v / s
    if w < 1e-15:
        k = int(np.argmax(np.abs(axis)))
        if axis[k] < 0:
            axis = -axis
    return theta * axis


def exp_matrix(phi) -> np.ndarray:
    """Rodrigues formula straight to a 3x3 matrix."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * k @ k


def exp_matrix_batch(phi: np.ndarray) -> np.ndarray:
    """Vectorized Rodrigues for an ``(N, 3)`` array."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1 - np.cos(safe)) / safe**2)
    k = skew_batch(phi)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_matrix_batch(m: np.ndarray) -> np.ndarray:
    """Vectorized log for rotation matrices away from pi."""
    m = np.asarray(m, dtype=float)
    cos = np.clip((np.trace(m, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.stack([m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], axis=-1)
    small = theta < 1e-6
    safe = np.where(small, 1.0, np.sin(theta))
    scale = np.where(small, 0.5 + theta**2 / 12.0, 0.5 * theta / safe)
    return scale[..., None] * vee


def a_matrix(theta) -> np.ndarray:
    """Jacobian linking additive and multiplicative rotation increments.

    ``exp(theta + d) ~= exp(a_matrix(theta) @ d) * exp(theta)``; equivalently
    ``a_matrix(theta).T`` is the right Jacobian. The inverse transpose of
    this matrix is the derivative of ``log(exp(theta) * exp(d))`` at ``d = 0``.
    """
    theta = np.asarray(theta, dtype=float).reshape(3)
    t = np.linalg.norm(theta)
    k = skew(theta)
    if t < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    return np.eye(3) + (1 - np.cos(t)) / t**2 * k + (t - np.sin(t)) / t**3 * k @ k


def right_jacobian(theta) -> np.ndarray:
    return a_matrix(-np.asarray(theta, dtype=float))


def slerp(r0: Rotation, r1: Rotation, alpha: float) -> Rotation:
    """Constant-rate geodesic from ``r0`` (alpha=0) to ``r1`` (alpha=1)."""
    return r0 * exp_so3(alpha * log_so3(r0.inverse() * r1))
