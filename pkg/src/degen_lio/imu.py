"""Strapdown propagation of the navigation state and its covariance.

Gravity is stored as the physical acceleration vector in the world frame
(pointing down), so a level, stationary IMU reads ``a_m = -R^T g``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import state as st
from .manifold import exp_matrix, exp_so3, right_jacobian, skew
from .state import NavState

MAX_DT = 0.1


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    acc: np.ndarray


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities (white noise and bias random walks)."""

    sigma_g: float = 2e-3
    sigma_a: float = 2e-2
    sigma_wg: float = 2e-5
    sigma_wa: float = 3e-4

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_wg", "sigma_wa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def q_diag(self) -> np.ndarray:
        """Diagonal of Q ordered as [n_g, n_wg, n_a, n_wa]."""
        return np.repeat(np.array([self.sigma_g, self.sigma_wg, self.sigma_a, self.sigma_wa]) ** 2, 3)


@dataclass(frozen=True)
class TransitionPair:
    phi: np.ndarray  # 30x30
    g: np.ndarray  # 30x12


def _check_dt(dt: float):
    if not (dt > 0.0):
        raise ValueError(f"propagation step must be positive, got dt={dt}")
    if dt > MAX_DT:
        raise ValueError(f"propagation step {dt} exceeds {MAX_DT} s")


def propagate_state(x: NavState, u: ImuSample, dt: float) -> NavState:
    """One zero-order-hold step.

    The attitude increment is exact for a constant rate; the specific force
    is rotated with the mid-step attitude, which makes velocity and position
    second-order accurate.
    """
    _check_dt(dt)
    w = np.asarray(u.gyro, dtype=float) - x.bias_gyro
    r_mid = x.rot_GI.matrix @ exp_matrix(0.5 * w * dt)
    acc = r_mid @ (np.asarray(u.acc, dtype=float) - x.bias_acc) + x.gravity
    return x.replace(
        rot_GI=x.rot_GI * exp_so3(w * dt),
        pos_GI=x.pos_GI + x.vel_GI * dt + 0.5 * acc * dt * dt,
        vel_GI=x.vel_GI + acc * dt,
    )


def transition_matrices(x: NavState, u: ImuSample, dt: float) -> TransitionPair:
    """Discrete error-state transition and noise-input matrices.

    Exact first-order Jacobian of ``propagate_state`` about ``x``; the
    odometry-extrinsic block is identity with no noise input.
    """
    if dt < 0:
        raise ValueError(f"negative dt={dt}")
    w = np.asarray(u.gyro, dtype=float) - x.bias_gyro
    a = np.asarray(u.acc, dtype=float) - x.bias_acc
    jr = right_jacobian(w * dt)
    r_mid = x.rot_GI.matrix @ exp_matrix(0.5 * w * dt)
    ra_skew = r_mid @ skew(a)
    # derivatives of the world-frame acceleration
    dacc_rot = -ra_skew @ exp_matrix(-0.5 * w * dt)
    dacc_bg = ra_skew @ right_jacobian(0.5 * w * dt) * (0.5 * dt)
    dt2 = 0.5 * dt * dt
    eye = np.eye(3)

    phi = np.eye(st.DIM)
    phi[st.ROT, st.ROT] = exp_matrix(-w * dt)
    phi[st.ROT, st.BG] = -jr * dt
    phi[st.POS, st.ROT] = dacc_rot * dt2
    phi[st.POS, st.VEL] = eye * dt
    phi[st.POS, st.BG] = dacc_bg * dt2
    phi[st.POS, st.BA] = -r_mid * dt2
    phi[st.POS, st.GRAV] = eye * dt2
    phi[st.VEL, st.ROT] = dacc_rot * dt
    phi[st.VEL, st.BG] = dacc_bg * dt
    phi[st.VEL, st.BA] = -r_mid * dt
    phi[st.VEL, st.GRAV] = eye * dt

    # white noise enters exactly where the biases do
    g = np.zeros((st.DIM, 12))
    g[st.ROT, 0:3] = -jr
    g[st.POS, 0:3] = dacc_bg * (0.5 * dt)
    g[st.VEL, 0:3] = dacc_bg
    g[st.BG, 3:6] = eye
    g[st.POS, 6:9] = -0.5 * r_mid * dt
    g[st.VEL, 6:9] = -r_mid
    g[st.BA, 9:12] = eye
    return TransitionPair(phi, g)


def propagate_covariance(p: np.ndarray, tp: TransitionPair, q: NoiseParams, dt: float) -> np.ndarray:
    gq = tp.g * (q.q_diag() * dt)
    out = tp.phi @ p @ tp.phi.T + gq @ tp.g.T
    return 0.5 * (out + out.T)


def integrate(x: NavState, p: np.ndarray, t0: float, t1: float, imu_t, gyro, acc, q: NoiseParams):
    """Propagate from ``t0`` to ``t1`` with zero-order-hold IMU samples.

    Sample ``i`` holds over ``[imu_t[i], imu_t[i+1])``; the step boundaries
    are ``t0``, every sample time inside ``(t0, t1)`` and ``t1``. Returns the
    final state, covariance and the list of ``(t, state)`` knots visited.
    """
    knots = [(t0, x)]
    if t1 <= t0:
        return x, p, knots
    lo = np.searchsorted(imu_t, t0, side="right") - 1
    if lo < 0:
        raise ValueError(f"no IMU sample at or before t={t0:.6f}")
    hi = np.searchsorted(imu_t, t1, side="left")
    bounds = [t0, *imu_t[lo + 1:hi], t1]
    for k in range(len(bounds) - 1):
        dt = bounds[k + 1] - bounds[k]
        if dt <= 0:
            continue
        u = ImuSample(bounds[k], gyro[lo + k], acc[lo + k])
        if p is not None:
            p = propagate_covariance(p, transition_matrices(x, u, dt), q, dt)
        x = propagate_state(x, u, dt)
        knots.append((bounds[k + 1], x))
    return x, p, knots
