"""LiDAR motion compensation, plane correspondences and point-to-plane rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import state as st
from .local_map import PlaneFit, PointMap, fit_planes
from .manifold import exp_matrix, exp_matrix_batch, log_matrix_batch
from .state import NavState


@dataclass(frozen=True, eq=False)
class LidarScan:
    t: float  # scan end time
    offsets: np.ndarray  # (N,) seconds, <= 0
    points: np.ndarray  # (N, 3) LiDAR frame
    sigma: float = 0.05

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        off = np.asarray(self.offsets, dtype=float).reshape(-1)
        if len(off) != len(pts):
            raise ValueError("offsets and points differ in length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(off))):
            raise ValueError("non-finite scan data")
        if np.any(off > 1e-12):
            raise ValueError("point offsets must be <= 0 relative to scan end")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "offsets", off)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PlaneCorrespondence:
    point_L: np.ndarray
    plane: PlaneFit
    noise_var: float


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Array-of-structs view of the correspondences of one scan."""

    points_L: np.ndarray
    normals: np.ndarray
    anchors: np.ndarray
    rms: np.ndarray
    noise_var: np.ndarray

    def __len__(self) -> int:
        return len(self.points_L)

    def __iter__(self):
        for i in range(len(self)):
            yield PlaneCorrespondence(
                self.points_L[i], PlaneFit(self.normals[i], self.anchors[i], True, float(self.rms[i])),
                float(self.noise_var[i]),
            )

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        z = np.empty((0, 3))
        return cls(z, z, z, np.empty(0), np.empty(0))

    @classmethod
    def from_list(cls, items) -> "CorrespondenceSet":
        items = list(items)
        if not items:
            return cls.empty()
        return cls(
            np.array([c.point_L for c in items]), np.array([c.plane.normal for c in items]),
            np.array([c.plane.anchor for c in items]), np.array([c.plane.rms for c in items]),
            np.array([c.noise_var for c in items]),
        )


@dataclass(frozen=True)
class LidarResidualRow:
    residual: float
    jacobian: np.ndarray  # (30,)


class ImuCoverageError(ValueError):
    pass


def undistort(scan: LidarScan, imu_t, gyro, acc, x_end: NavState) -> LidarScan:
    """Re-express every point in the LiDAR frame at scan end.

    Poses inside the scan are recovered by integrating the IMU backwards
    from ``x_end`` (zero-order hold, the exact inverse of forward
    propagation) and interpolated to each point time.
    """
    if len(scan) == 0 or not np.any(scan.offsets < 0):
        return LidarScan(scan.t, np.zeros(len(scan)), scan.points.copy(), scan.sigma)
    imu_t = np.asarray(imu_t, dtype=float)
    t_end = scan.t
    t_start = t_end + float(scan.offsets.min())
    first = np.searchsorted(imu_t, t_start, side="right") - 1
    if first < 0 or len(imu_t) == 0:
        have = imu_t[0] if len(imu_t) else float("nan")
        raise ImuCoverageError(f"IMU starts at {have:.6f} s but scan needs data from {t_start:.6f} s")

    r = x_end.rot_GI.matrix
    p = x_end.pos_GI.copy()
    v = x_end.vel_GI.copy()
    times, rots, poss = [t_end], [r], [p]
    t = t_end
    i = np.searchsorted(imu_t, t_end, side="left") - 1
    i = max(i, first)
    while t > t_start + 1e-12:
        t_lo = max(imu_t[i], t_start)
        h = t - t_lo
        if h > 0:
            w = gyro[i] - x_end.bias_gyro
            r = r @ exp_matrix(-w * h)
            a = r @ exp_matrix(0.5 * w * h) @ (acc[i] - x_end.bias_acc) + x_end.gravity
            v = v - a * h
            p = p - v * h - 0.5 * a * h * h
            times.append(t_lo)
            rots.append(r)
            poss.append(p)
        t = t_lo
        i -= 1
        if i < first and t > t_start + 1e-12:
            raise ImuCoverageError(f"IMU gap before {t:.6f} s while undistorting scan at {t_end:.6f} s")

    times = np.array(times[::-1])
    rots = np.array(rots[::-1])
    poss = np.array(poss[::-1])
    tp = t_end + scan.offsets
    k = np.clip(np.searchsorted(times, tp, side="right") - 1, 0, len(times) - 2)
    span = times[k + 1] - times[k]
    alpha = np.where(span > 0, (tp - times[k]) / np.where(span > 0, span, 1.0), 0.0)
    r0 = rots[k]
    rel = log_matrix_batch(np.einsum("nji,njk->nik", r0, rots[k + 1]))
    r_pt = r0 @ exp_matrix_batch(alpha[:, None] * rel)
    p_pt = poss[k] + alpha[:, None] * (poss[k + 1] - poss[k])

    r_il = x_end.rot_IL.matrix
    p_i = scan.points @ r_il.T + x_end.pos_IL
    p_g = np.einsum("nij,nj->ni", r_pt, p_i) + p_pt
    p_iend = (p_g - x_end.pos_GI) @ x_end.rot_GI.matrix
    p_lend = (p_iend - x_end.pos_IL) @ r_il
    return LidarScan(t_end, np.zeros(len(scan)), p_lend, scan.sigma)


def to_world(points_L: np.ndarray, x: NavState) -> np.ndarray:
    r_gl = x.rot_GI.matrix @ x.rot_IL.matrix
    return points_L @ r_gl.T + (x.rot_GI.matrix @ x.pos_IL + x.pos_GI)


def find_correspondences(
    points_L: np.ndarray,
    pmap: PointMap,
    x: NavState,
    noise_var: float,
    k: int = 5,
    plane_tol: float = 0.1,
    corr_gate: float = 1.0,
    max_neighbor_dist: float = 1.0,
) -> CorrespondenceSet:
    """Pair each point with a plane fitted to its map neighbors.

    A match is kept when all ``k`` neighbors lie within ``max_neighbor_dist``,
    the fit is valid and the point-to-plane distance is below ``corr_gate``.
    """
    points_L = np.asarray(points_L, dtype=float).reshape(-1, 3)
    if len(pmap) < k or len(points_L) == 0:
        return CorrespondenceSet.empty()
    pw = to_world(points_L, x)
    dist, idx = pmap.knn(pw, k)
    near = dist[:, -1] <= max_neighbor_dist
    normals, anchors, valid, rms = fit_planes(pmap.points[idx], plane_tol)
    h = np.einsum("ni,ni->n", normals, pw - anchors)
    keep = near & valid & (np.abs(h) < corr_gate)
    return CorrespondenceSet(
        points_L[keep], normals[keep], anchors[keep], rms[keep], np.full(int(keep.sum()), noise_var)
    )


def predict(c: CorrespondenceSet, x: NavState) -> np.ndarray:
    """Signed point-to-plane distances ``h`` at state ``x``."""
    pw = to_world(c.points_L, x)
    return np.einsum("ni,ni->n", c.normals, pw - c.anchors)


def rows(c: CorrespondenceSet, x: NavState):
    """Batched ``(h, H)``: predicted distances and their 1x30 Jacobian rows.

    ``H`` is the derivative of ``h(boxplus(x, d))`` at ``d = 0``. The
    residual of the measurement ``0 = h`` is ``-h``.
    """
    m = len(c)
    r_gi = x.rot_GI.matrix
    r_il = x.rot_IL.matrix
    p_i = c.points_L @ r_il.T + x.pos_IL
    u_i = c.normals @ r_gi  # R^T u per row
    u_l = u_i @ r_il  # R_IL^T R^T u per row
    h = np.einsum("ni,ni->n", c.normals, p_i @ r_gi.T + x.pos_GI - c.anchors)
    jac = np.zeros((m, st.DIM))
    jac[:, st.ROT] = np.cross(p_i, u_i)
    jac[:, st.POS] = c.normals
    jac[:, st.ROT_IL] = np.cross(c.points_L, u_l)
    jac[:, st.POS_IL] = u_i
    return h, jac


def residual_and_jacobian(c: PlaneCorrespondence, x: NavState) -> LidarResidualRow:
    h, jac = rows(CorrespondenceSet.from_list([c]), x)
    return LidarResidualRow(float(-h[0]), jac[0])
