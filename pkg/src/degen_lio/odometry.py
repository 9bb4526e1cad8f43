"""Relative-pose measurements from an auxiliary odometry source."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import state as st
from .manifold import Rotation, log_so3, skew, slerp
from .state import NavState


@dataclass(frozen=True, eq=False)
class OdomPose:
    t: float
    rot: Rotation
    pos: np.ndarray

    def compose(self, other: "OdomPose") -> "OdomPose":
        return OdomPose(other.t, self.rot * other.rot, self.pos + self.rot.apply(other.pos))

    def inverse(self) -> "OdomPose":
        inv = self.rot.inverse()
        return OdomPose(self.t, inv, -inv.apply(self.pos))


@dataclass(frozen=True, eq=False)
class OdomStream:
    t: np.ndarray  # (N,)
    quat: np.ndarray  # (N, 4) w, x, y, z
    pos: np.ndarray  # (N, 3)

    def __post_init__(self):
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("odometry timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> OdomPose:
        return OdomPose(float(self.t[i]), Rotation(self.quat[i]), self.pos[i].copy())


@dataclass(frozen=True, eq=False)
class RelPoseMeasurement:
    z_r: Rotation
    z_p: np.ndarray
    R_r: np.ndarray
    R_p: np.ndarray


@dataclass(frozen=True, eq=False)
class OdomResidual:
    r_r: np.ndarray
    r_p: np.ndarray
    H_Or: np.ndarray  # 3x30
    H_Op: np.ndarray  # 3x30


class OdomRangeError(ValueError):
    pass


def interpolate_pose(buffer: OdomStream, t: float, extrap_tol: float = 0.02) -> OdomPose:
    """Pose at ``t``: linear in translation, slerp in rotation.

    Within ``extrap_tol`` outside the buffer span the end segment is
    extended at constant velocity; further out is an error.
    """
    n = len(buffer)
    if n == 0:
        raise OdomRangeError("empty odometry buffer")
    t0, t1 = float(buffer.t[0]), float(buffer.t[-1])
    if t < t0 - extrap_tol or t > t1 + extrap_tol:
        raise OdomRangeError(f"t={t:.6f} outside odometry span [{t0:.6f}, {t1:.6f}]")
    if n == 1:
        if t != t0:
            raise OdomRangeError("cannot extrapolate from a single odometry pose")
        return buffer[0]
    i = int(np.searchsorted(buffer.t, t, side="right")) - 1
    i = min(max(i, 0), n - 2)
    a, b = buffer[i], buffer[i + 1]
    if t == a.t:
        return a
    if t == b.t:
        return b
    alpha = (t - a.t) / (b.t - a.t)
    return OdomPose(t, slerp(a.rot, b.rot, alpha), a.pos + alpha * (b.pos - a.pos))


@dataclass(frozen=True)
class OdomNoise:
    sigma_rot: float = np.deg2rad(0.5)  # rad per measurement
    sigma_pos_per_m: float = 0.02
    sigma_pos_floor: float = 0.01


def relative_measurement(pose_a: OdomPose, pose_b: OdomPose, noise: OdomNoise = OdomNoise()) -> RelPoseMeasurement:
    """``T_a^{-1} T_b`` with a distance-scaled translation covariance."""
    if not pose_a.t < pose_b.t:
        raise ValueError("relative measurement needs pose_a.t < pose_b.t")
    rel = pose_a.inverse().compose(pose_b)
    sp = max(noise.sigma_pos_per_m * float(np.linalg.norm(rel.pos)), noise.sigma_pos_floor)
    return RelPoseMeasurement(
        rel.rot, rel.pos, np.eye(3) * noise.sigma_rot**2, np.eye(3) * sp**2
    )


def predict(x_k: NavState, x_prev: NavState):
    """Predicted relative rotation matrix and translation of the odometry frame."""
    r_io = x_k.rot_IO.matrix
    r_prev = x_prev.rot_GI.matrix
    r_k = x_k.rot_GI.matrix
    a = (r_prev @ r_io).T
    z_r = a @ r_k @ r_io
    p1 = (r_k - r_prev) @ x_k.pos_IO + x_k.pos_GI - x_prev.pos_GI
    return z_r, a @ p1


def residual_and_jacobian(m: RelPoseMeasurement, x_k: NavState, x_prev: NavState) -> OdomResidual:
    """Rotation/translation residuals and Jacobians w.r.t. the current error state.

    ``x_prev`` is held fixed. Jacobians are those of the predicted
    measurement under right perturbations of ``x_k``.
    """
    r_io = x_k.rot_IO.matrix
    r_prev = x_prev.rot_GI.matrix
    r_k = x_k.rot_GI.matrix
    a = (r_prev @ r_io).T
    z_r_hat, z_p_hat = predict(x_k, x_prev)
    p1 = (r_k - r_prev) @ x_k.pos_IO + x_k.pos_GI - x_prev.pos_GI

    h_r = np.zeros((3, st.DIM))
    h_r[:, st.ROT] = r_io.T
    h_r[:, st.ROT_IO] = np.eye(3) - r_io.T @ r_k.T @ r_prev @ r_io

    h_p = np.zeros((3, st.DIM))
    h_p[:, st.ROT] = -a @ r_k @ skew(x_k.pos_IO)
    h_p[:, st.POS] = a
    h_p[:, st.ROT_IO] = skew(a @ p1)
    h_p[:, st.POS_IO] = a @ (r_k - r_prev)

    r_r = log_so3(Rotation.from_matrix(z_r_hat.T) * m.z_r)
    r_p = m.z_p - z_p_hat
    return OdomResidual(r_r, r_p, h_r, h_p)


def stream_from_poses(t, rots, pos) -> OdomStream:
    return OdomStream(np.asarray(t, dtype=float), np.array([r.q for r in rots]), np.asarray(pos, dtype=float))

