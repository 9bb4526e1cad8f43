"""Composite navigation state, its 30-dim error state and boxplus/boxminus."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .manifold import Rotation, a_matrix, exp_so3, log_so3

DIM = 30

# error-state layout
ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
GRAV = slice(15, 18)
ROT_IL = slice(18, 21)
POS_IL = slice(21, 24)
ROT_IO = slice(24, 27)
POS_IO = slice(27, 30)

POSE = np.r_[0:6]
LIDAR_EXTRINSIC = np.r_[18:24]
ODOM_EXTRINSIC = np.r_[24:30]
EXTRINSICS = np.r_[18:30]

GRAVITY_BAND = (9.0, 10.6)

CSV_COLUMNS = (
    "qw,qx,qy,qz,px,py,pz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz,gx,gy,gz,"
    "il_qw,il_qx,il_qy,il_qz,il_px,il_py,il_pz,"
    "io_qw,io_qx,io_qy,io_qz,io_px,io_py,io_pz"
).split(",")


def _zeros():
    return np.zeros(3)


@dataclass(frozen=True, eq=False)
class NavState:
    rot_GI: Rotation = field(default_factory=Rotation.identity)
    pos_GI: np.ndarray = field(default_factory=_zeros)
    vel_GI: np.ndarray = field(default_factory=_zeros)
    bias_gyro: np.ndarray = field(default_factory=_zeros)
    bias_acc: np.ndarray = field(default_factory=_zeros)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    rot_IL: Rotation = field(default_factory=Rotation.identity)
    pos_IL: np.ndarray = field(default_factory=_zeros)
    rot_IO: Rotation = field(default_factory=Rotation.identity)
    pos_IO: np.ndarray = field(default_factory=_zeros)

    def __post_init__(self):
        for name in ("pos_GI", "vel_GI", "bias_gyro", "bias_acc", "gravity", "pos_IL", "pos_IO"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    def replace(self, **changes) -> "NavState":
        return replace(self, **changes)

    def gravity_ok(self) -> bool:
        lo, hi = GRAVITY_BAND
        return lo <= float(np.linalg.norm(self.gravity)) <= hi

    def to_row(self) -> list[float]:
        """Flat values in ``CSV_COLUMNS`` order."""
        return [
            *self.rot_GI.q, *self.pos_GI, *self.vel_GI, *self.bias_gyro, *self.bias_acc,
            *self.gravity, *self.rot_IL.q, *self.pos_IL, *self.rot_IO.q, *self.pos_IO,
        ]

    @classmethod
    def from_row(cls, row) -> "NavState":
        v = np.asarray(row, dtype=float)
        if v.size != len(CSV_COLUMNS):
            raise ValueError(f"expected {len(CSV_COLUMNS)} values, got {v.size}")
        return cls(
            rot_GI=Rotation(v[0:4]), pos_GI=v[4:7], vel_GI=v[7:10], bias_gyro=v[10:13],
            bias_acc=v[13:16], gravity=v[16:19], rot_IL=Rotation(v[19:23]), pos_IL=v[23:26],
            rot_IO=Rotation(v[26:30]), pos_IO=v[30:33],
        )


def boxplus(x: NavState, dx) -> NavState:
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (DIM,):
        raise ValueError(f"error state must have shape ({DIM},), got {dx.shape}")
    return NavState(
        rot_GI=x.rot_GI * exp_so3(dx[ROT]),
        pos_GI=x.pos_GI + dx[POS],
        vel_GI=x.vel_GI + dx[VEL],
        bias_gyro=x.bias_gyro + dx[BG],
        bias_acc=x.bias_acc + dx[BA],
        gravity=x.gravity + dx[GRAV],
        rot_IL=x.rot_IL * exp_so3(dx[ROT_IL]),
        pos_IL=x.pos_IL + dx[POS_IL],
        rot_IO=x.rot_IO * exp_so3(dx[ROT_IO]),
        pos_IO=x.pos_IO + dx[POS_IO],
    )


def boxminus(x1: NavState, x2: NavState) -> np.ndarray:
    """Error ``dx`` such that ``boxplus(x2, dx) == x1``."""
    dx = np.empty(DIM)
    dx[ROT] = log_so3(x2.rot_GI.inverse() * x1.rot_GI)
    dx[POS] = x1.pos_GI - x2.pos_GI
    dx[VEL] = x1.vel_GI - x2.vel_GI
    dx[BG] = x1.bias_gyro - x2.bias_gyro
    dx[BA] = x1.bias_acc - x2.bias_acc
    dx[GRAV] = x1.gravity - x2.gravity
    dx[ROT_IL] = log_so3(x2.rot_IL.inverse() * x1.rot_IL)
    dx[POS_IL] = x1.pos_IL - x2.pos_IL
    dx[ROT_IO] = log_so3(x2.rot_IO.inverse() * x1.rot_IO)
    dx[POS_IO] = x1.pos_IO - x2.pos_IO
    return dx


def m_matrix(x_kappa: NavState, x_hat: NavState) -> np.ndarray:
    """Jacobian of ``boxminus(boxplus(x_kappa, d), x_hat)`` at ``d = 0``.

    Block-diagonal: inverse-transposed ``a_matrix`` on the three rotation
    blocks, identity elsewhere.
    """
    dx = boxminus(x_kappa, x_hat)
    m = np.eye(DIM)
    for sl in (ROT, ROT_IL, ROT_IO):
        m[sl, sl] = np.linalg.inv(a_matrix(dx[sl])).T
    return m


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def cov_health(p: np.ndarray) -> tuple[float, float]:
    """(relative asymmetry, eigmin / trace) of a covariance matrix."""
    scale = max(float(np.max(np.abs(p))), 1e-300)
    asym = float(np.max(np.abs(p - p.T))) / scale
    tr = float(np.trace(p))
    eigmin = float(np.linalg.eigvalsh(symmetrize(p))[0])
    return asym, eigmin / (tr if tr > 0 else scale)


def is_valid_cov(p: np.ndarray, sym_tol: float = 1e-9, psd_tol: float = 1e-10) -> bool:
    asym, ratio = cov_health(p)
    return asym <= sym_tol and ratio >= -psd_tol
