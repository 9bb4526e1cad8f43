"""Deterministic synthetic world, trajectory and sensor streams.

Every random draw comes from ``numpy.random.default_rng([seed, stream, k])``
so a seed fully determines the data and different sensors never share a
stream. LiDAR range noise is drawn as unit normals and scaled by sigma,
so runs that differ only in sigma see the same noise pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imu import NoiseParams
from .lidar import LidarScan
from .manifold import Rotation, exp_matrix_batch, log_matrix_batch
from .odometry import OdomStream

GRAVITY = np.array([0.0, 0.0, -9.81])

STREAM_IMU, STREAM_BIAS, STREAM_ODOM, STREAM_SCAN = 1, 2, 3, 4


@dataclass(frozen=True, eq=False)
class Patch:
    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float


@dataclass(frozen=True, eq=False)
class World:
    patches: tuple

    def arrays(self):
        c = np.array([p.center for p in self.patches])
        n = np.array([p.normal for p in self.patches])
        u = np.array([p.axis_u for p in self.patches])
        v = np.array([p.axis_v for p in self.patches])
        hu = np.array([p.half_u for p in self.patches])
        hv = np.array([p.half_v for p in self.patches])
        return c, n, u, v, hu, hv


def _patch(center, normal, axis_u, half_u, half_v) -> Patch:
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    u = np.asarray(axis_u, float)
    u = u / np.linalg.norm(u)
    return Patch(np.asarray(center, float), n, u, np.cross(n, u), half_u, half_v)


def build_box(length: float, width: float, height: float, with_end_caps: bool, center_x: float = 0.0) -> World:
    """Floor at z=0, ceiling at z=height, side walls at y=+-width/2.

    The long axis is x, spanning ``center_x +- length/2``; end caps close it.
    """
    if min(length, width, height) <= 0:
        raise ValueError("dimensions must be positive")
    hl, hw, hh = length / 2, width / 2, height / 2
    cx = center_x
    ex, ey, ez = np.eye(3)
    patches = [
        _patch([cx, 0, 0], ez, ex, hl, hw),
        _patch([cx, 0, height], -ez, ex, hl, hw),
        _patch([cx, hw, hh], -ey, ex, hl, hh),
        _patch([cx, -hw, hh], ey, ex, hl, hh),
    ]
    if with_end_caps:
        patches += [_patch([cx + hl, 0, hh], -ex, ey, hw, hh), _patch([cx - hl, 0, hh], ex, ey, hw, hh)]
    return World(tuple(patches))


def build_corridor(length: float = 40.0, width: float = 4.0, height: float = 3.0, with_end_caps: bool = False) -> World:
    return build_box(length, width, height, with_end_caps)


def build_room(length: float = 8.0, width: float = 8.0, height: float = 3.0) -> World:
    return build_box(length, width, height, True)


# trajectory -----------------------------------------------------------------


def _smoothstep(t, t0, ramp):
    """Quintic 0->1 step and its first two time derivatives."""
    s = np.clip((np.asarray(t, float) - t0) / ramp, 0.0, 1.0)
    e = s**3 * (10 - 15 * s + 6 * s * s)
    de = 30 * s * s * (1 - s) ** 2 / ramp
    dde = 60 * s * (1 - s) * (1 - 2 * s) / ramp**2
    return s, e, de, dde


def _sway(t, t0, ramp, amp, omega):
    """``amp * e(t) * sin(omega (t - t0))`` and derivatives up to second order."""
    _, e, de, dde = _smoothstep(t, t0, ramp)
    tau = np.asarray(t, float) - t0
    sn, cs = np.sin(omega * tau), np.cos(omega * tau)
    f = amp * e * sn
    df = amp * (de * sn + e * omega * cs)
    ddf = amp * (dde * sn + 2 * de * omega * cs - e * omega**2 * sn)
    return f, df, ddf


def euler_zyx_matrix(roll, pitch, yaw) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    out = np.empty(np.shape(roll) + (3, 3))
    out[..., 0, 0] = cy * cp
    out[..., 0, 1] = cy * sp * sr - sy * cr
    out[..., 0, 2] = cy * sp * cr + sy * sr
    out[..., 1, 0] = sy * cp
    out[..., 1, 1] = sy * sp * sr + cy * cr
    out[..., 1, 2] = sy * sp * cr - cy * sr
    out[..., 2, 0] = -sp
    out[..., 2, 1] = cp * sr
    out[..., 2, 2] = cp * cr
    return out


@dataclass(frozen=True)
class TrajectorySpec:
    """Straight run along +x with smooth start and sinusoidal sway.

    Stationary until ``t_still``, then speed ramps to ``speed`` over
    ``ramp`` seconds (quintic, C2). Lateral/vertical position and all three
    Euler angles sway with amplitudes that ramp in with the same envelope.
    """

    start: tuple = (-10.0, 0.0, 1.0)
    speed: float = 1.0
    duration: float = 21.0
    t_still: float = 1.5
    ramp: float = 2.0
    sway_pos: float = 0.1
    sway_att_deg: float = 5.0
    omega_y: float = 0.9
    omega_z: float = 1.3
    omega_roll: float = 1.1
    omega_pitch: float = 0.7
    omega_yaw: float = 0.5

    def _x(self, t):
        s, e, de, _ = _smoothstep(t, self.t_still, self.ramp)
        t = np.asarray(t, float)
        integral = np.where(
            t <= self.t_still + self.ramp,
            self.ramp * (2.5 * s**4 - 3 * s**5 + s**6),
            0.5 * self.ramp + (t - self.t_still - self.ramp),
        )
        return self.speed * integral, self.speed * e, self.speed * de

    def _euler(self, t):
        a = np.deg2rad(self.sway_att_deg)
        roll = _sway(t, self.t_still, self.ramp, a, self.omega_roll)
        pitch = _sway(t, self.t_still, self.ramp, a, self.omega_pitch)
        yaw = _sway(t, self.t_still, self.ramp, a, self.omega_yaw)
        return roll, pitch, yaw

    def position(self, t) -> np.ndarray:
        x, _, _ = self._x(t)
        y = _sway(t, self.t_still, self.ramp, self.sway_pos, self.omega_y)[0]
        z = _sway(t, self.t_still, self.ramp, self.sway_pos, self.omega_z)[0]
        return np.stack([self.start[0] + x, self.start[1] + y, self.start[2] + z], axis=-1)

    def velocity(self, t) -> np.ndarray:
        _, vx, _ = self._x(t)
        vy = _sway(t, self.t_still, self.ramp, self.sway_pos, self.omega_y)[1]
        vz = _sway(t, self.t_still, self.ramp, self.sway_pos, self.omega_z)[1]
        return np.stack([vx, vy, vz], axis=-1)

    def acceleration(self, t) -> np.ndarray:
        _, _, ax = self._x(t)
        ay = _sway(t, self.t_still, self.ramp, self.sway_pos, self.omega_y)[2]
        az = _sway(t, self.t_still, self.ramp, self.sway_pos, self.omega_z)[2]
        return np.stack([ax, ay, az], axis=-1)

    def rotation(self, t) -> np.ndarray:
        (r, _, _), (p, _, _), (y, _, _) = self._euler(t)
        return euler_zyx_matrix(r, p, y)

    def angular_velocity(self, t) -> np.ndarray:
        """Body-frame angular rate from the ZYX Euler-angle rates."""
        (r, dr, _), (p, dp, _), (_, dy, _) = self._euler(t)
        return np.stack(
            [
                dr - dy * np.sin(p),
                dp * np.cos(r) + dy * np.cos(p) * np.sin(r),
                -dp * np.sin(r) + dy * np.cos(p) * np.cos(r),
            ],
            axis=-1,
        )


# sensors --------------------------------------------------------------------


@dataclass(frozen=True)
class SensorRig:
    rot_IL: Rotation = field(default_factory=lambda: Rotation.from_matrix(euler_zyx_matrix(0.0, 0.0, np.deg2rad(2.0))))
    pos_IL: tuple = (0.1, 0.0, 0.2)
    rot_IO: Rotation = field(default_factory=lambda: Rotation.from_matrix(euler_zyx_matrix(0.0, 0.0, np.deg2rad(-3.0))))
    pos_IO: tuple = (-0.15, 0.0, -0.3)
    n_beams: int = 16
    fov_deg: float = 15.0
    h_res_deg: float = 1.0
    lidar_rate: float = 10.0
    max_range: float = 20.0
    min_range: float = 0.3
    drop_prob: float = 0.0
    imu_rate: float = 200.0
    odom_rate: float = 50.0

    def __post_init__(self):
        for name in ("lidar_rate", "imu_rate", "odom_rate", "h_res_deg", "max_range"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def beam_directions(self) -> np.ndarray:
        """Unit ray directions in {L}, shape ``(n_azimuth, n_beams, 3)``, firing order."""
        elev = np.deg2rad(np.linspace(-self.fov_deg, self.fov_deg, self.n_beams))
        n_az = int(round(360.0 / self.h_res_deg))
        az = np.deg2rad(np.arange(n_az) * self.h_res_deg)
        ce, se = np.cos(elev), np.sin(elev)
        return np.stack(
            [np.outer(np.cos(az), ce), np.outer(np.sin(az), ce), np.broadcast_to(se, (n_az, self.n_beams))],
            axis=-1,
        )


def synth_imu(traj: TrajectorySpec, t, bias_gyro, bias_acc, noise: NoiseParams | None, rate: float, rng=None):
    """IMU readings at times ``t`` (true kinematics plus bias and white noise).

    ``a_m = R^T (a - g) + b_a + n_a`` with the physical gravity vector ``g``;
    white-noise std is the density times ``sqrt(rate)``.
    """
    t = np.asarray(t, float)
    r = traj.rotation(t)
    gyro = traj.angular_velocity(t) + bias_gyro
    acc = np.einsum("...ji,...j->...i", r, traj.acceleration(t) - GRAVITY) + bias_acc
    if noise is not None and rng is not None:
        gyro = gyro + rng.normal(size=gyro.shape) * noise.sigma_g * np.sqrt(rate)
        acc = acc + rng.normal(size=acc.shape) * noise.sigma_a * np.sqrt(rate)
    return gyro, acc


def synth_imu_stream(traj: TrajectorySpec, rate: float, noise: NoiseParams, seed: int, bias_gyro0, bias_acc0):
    """Full IMU stream with random-walk biases. Returns ``(t, gyro, acc, bg, ba)``."""
    n = int(np.floor(traj.duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    dt = 1.0 / rate
    brng = np.random.default_rng([seed, STREAM_BIAS])
    walk_g = np.cumsum(brng.normal(size=(n, 3)) * noise.sigma_wg * np.sqrt(dt), axis=0)
    walk_a = np.cumsum(brng.normal(size=(n, 3)) * noise.sigma_wa * np.sqrt(dt), axis=0)
    bg = np.asarray(bias_gyro0, float) + np.vstack([np.zeros(3), walk_g[:-1]])
    ba = np.asarray(bias_acc0, float) + np.vstack([np.zeros(3), walk_a[:-1]])
    gyro, acc = synth_imu(traj, t, bg, ba, noise, rate, np.random.default_rng([seed, STREAM_IMU]))
    return t, gyro, acc, bg, ba


def _sensor_poses(traj: TrajectorySpec, t, rot_I, pos_I):
    r_gi = traj.rotation(t)
    p_gi = traj.position(t)
    r = r_gi @ rot_I.matrix
    p = np.einsum("...ij,j->...i", r_gi, np.asarray(pos_I, float)) + p_gi
    return r, p


def raycast(world: World, origins: np.ndarray, dirs: np.ndarray, min_range: float, max_range: float) -> np.ndarray:
    """First-hit range per ray (``inf`` for a miss). ``origins``, ``dirs``: ``(N, 3)``."""
    c, n, u, v, hu, hv = world.arrays()
    denom = dirs @ n.T  # (N, P)
    num = np.einsum("pk,npk->np", n, c[None] - origins[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        rng = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        hit = origins[:, None] + rng[..., None] * dirs[:, None]
        rel = hit - c[None]
        inside = (np.abs(np.einsum("npk,pk->np", rel, u)) <= hu) & (np.abs(np.einsum("npk,pk->np", rel, v)) <= hv)
    ok = inside & (rng >= min_range) & (rng <= max_range)
    return np.min(np.where(ok, rng, np.inf), axis=1)


def raycast_scan(
    world: World, traj: TrajectorySpec, scan_end_t: float, rig: SensorRig, sigma_l: float, seed: int,
    distort: bool = True, index: int = 0,
) -> LidarScan:
    dirs = rig.beam_directions()
    n_az, n_b = dirs.shape[:2]
    period = 1.0 / rig.lidar_rate
    fire = -period + (np.arange(n_az) + 1) * period / n_az  # last column fires at scan end
    offsets = np.repeat(fire, n_b) if distort else np.zeros(n_az * n_b)
    d_l = dirs.reshape(-1, 3)
    r_gl, p_gl = _sensor_poses(traj, scan_end_t + offsets, rig.rot_IL, rig.pos_IL)
    d_g = np.einsum("nij,nj->ni", r_gl, d_l)
    rng = raycast(world, p_gl, d_g, rig.min_range, rig.max_range)
    noise_rng = np.random.default_rng([seed, STREAM_SCAN, index])
    z = noise_rng.normal(size=len(rng))
    keep_draw = noise_rng.random(len(rng))
    hit = np.isfinite(rng) & (keep_draw >= rig.drop_prob)
    measured = rng[hit] + sigma_l * z[hit]
    return LidarScan(scan_end_t, offsets[hit], d_l[hit] * measured[:, None], sigma_l)


def synth_odometry(
    traj: TrajectorySpec, rig: SensorRig, rate: float, noise_r: float, noise_p: float, drift: float, seed: int,
    origin=(Rotation.from_matrix(euler_zyx_matrix(0.0, 0.0, np.deg2rad(30.0))), (5.0, -3.0, 0.5)),
) -> OdomStream:
    """Dead-reckoned odometry-frame poses in an arbitrary origin frame {M}.

    Each step's true relative motion is corrupted by a right-multiplied
    rotation error (std ``noise_r`` rad per step) and a translation error
    with std ``noise_p`` per meter of that step, plus scale ``1 + drift``.
    """
    if rate <= 0:
        raise ValueError("odometry rate must be positive")
    n = int(np.floor(traj.duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    r_go, p_go = _sensor_poses(traj, t, rig.rot_IO, rig.pos_IO)
    d_r = np.einsum("nji,njk->nik", r_go[:-1], r_go[1:])
    d_p = np.einsum("nji,nj->ni", r_go[:-1], p_go[1:] - p_go[:-1])
    rng = np.random.default_rng([seed, STREAM_ODOM])
    n_r = rng.normal(size=(n - 1, 3)) * noise_r
    n_p = rng.normal(size=(n - 1, 3)) * noise_p * np.linalg.norm(d_p, axis=1, keepdims=True)
    d_r = d_r @ exp_matrix_batch(n_r)
    d_p = d_p * (1.0 + drift) + n_p

    r_mg, p_mg = origin[0].matrix, np.asarray(origin[1], float)
    rots = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    rots[0] = r_mg @ r_go[0]
    pos[0] = r_mg @ p_go[0] + p_mg
    for k in range(1, n):
        pos[k] = pos[k - 1] + rots[k - 1] @ d_p[k - 1]
        rots[k] = rots[k - 1] @ d_r[k - 1]
    quat = np.array([Rotation.from_matrix(r).q for r in rots])
    return OdomStream(t, quat, pos)


def relative_errors(stream: OdomStream, traj: TrajectorySpec, rig: SensorRig):
    """Per-step (rotation, translation) errors of an odometry stream vs. truth."""
    r_go, p_go = _sensor_poses(traj, stream.t, rig.rot_IO, rig.pos_IO)
    rm = np.array([Rotation(q).matrix for q in stream.quat])
    true_dr = np.einsum("nji,njk->nik", r_go[:-1], r_go[1:])
    true_dp = np.einsum("nji,nj->ni", r_go[:-1], p_go[1:] - p_go[:-1])
    est_dr = np.einsum("nji,njk->nik", rm[:-1], rm[1:])
    est_dp = np.einsum("nji,nj->ni", rm[:-1], stream.pos[1:] - stream.pos[:-1])
    rot_err = log_matrix_batch(np.einsum("nji,njk->nik", true_dr, est_dr))
    return rot_err, est_dp - true_dp, true_dp
