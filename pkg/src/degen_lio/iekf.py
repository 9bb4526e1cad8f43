"""Iterated Kalman update with degeneration-gated odometry fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lidar, odometry
from . import state as st
from .degeneracy import DegeneracyReport, detect, pose_hessian
from .local_map import PointMap
from .manifold import log_so3
from .state import NavState, boxminus, boxplus, m_matrix

log = logging.getLogger(__name__)

FUSION_MODES = ("lidar_only", "degeneration_gated", "always_fused")

__all__ = [
    "IekfConfig", "MeasurementStack", "UpdateResult", "build_stack", "correspondences", "iterated_update",
    "m_matrix", "plane_tolerance",
]


@dataclass(frozen=True)
class IekfConfig:
    max_iter: int = 4
    step_tol: float = 1e-6
    joseph: bool = False
    fusion_mode: str = "degeneration_gated"
    freeze_extrinsics: bool = True
    threshold_rot: float = 100.0
    threshold_trans: float = 100.0
    knn: int = 5
    plane_tol: float = 0.1
    plane_tol_sigmas: float = 3.0
    corr_gate: float = 1.0
    max_neighbor_dist: float = 1.0
    reuse_trans: float = 1e-3
    reuse_rot_deg: float = 0.01

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class MeasurementStack:
    """Stacked linearized measurements ``z + H dx``.

    ``z`` holds predicted-minus-measured values (LiDAR: the signed plane
    distance; odometry: the negated residual). ``R`` is block diagonal:
    per-point LiDAR variances followed by an optional 6x6 odometry block.
    """

    z: np.ndarray
    H: np.ndarray
    lidar_var: np.ndarray
    odom_R: np.ndarray | None = None
    used_odometry: bool = False

    def __len__(self) -> int:
        return len(self.z)

    @property
    def n_lidar(self) -> int:
        return len(self.lidar_var)

    def R(self) -> np.ndarray:
        """Dense noise matrix (for inspection; the solver never forms it)."""
        r = np.diag(self.lidar_var)
        if self.odom_R is not None:
            r = np.block([[r, np.zeros((len(r), 6))], [np.zeros((6, len(r))), self.odom_R]])
        return r

    def _weighted(self, a: np.ndarray) -> np.ndarray:
        """``R^-1 a`` for a vector or a matrix with one row per measurement."""
        m = self.n_lidar
        out = np.empty_like(a, dtype=float)
        w = 1.0 / self.lidar_var
        out[:m] = a[:m] * (w if a.ndim == 1 else w[:, None])
        if self.odom_R is not None:
            out[m:] = np.linalg.solve(self.odom_R, a[m:])
        return out

    def information(self, cols=slice(None)) -> np.ndarray:
        h = self.H[:, cols]
        out = h.T @ self._weighted(h)
        return 0.5 * (out + out.T)

    def weighted_residual(self, cols=slice(None)) -> np.ndarray:
        return self.H[:, cols].T @ self._weighted(self.z)

    def cost(self) -> float:
        return float(self.z @ self._weighted(self.z))


@dataclass(frozen=True, eq=False)
class UpdateResult:
    state: NavState
    cov: np.ndarray
    iterations: int
    converged: bool
    final_cost: float
    report: DegeneracyReport | None = None
    used_odometry: bool = False
    odom_fallback: bool = False
    n_points: int = 0
    cost_trace: list = field(default_factory=list)  # (before, after) per accepted step
    skipped: bool = False


def _odom_block(res: odometry.OdomResidual, meas: odometry.RelPoseMeasurement):
    z = -np.concatenate([res.r_r, res.r_p])
    h = np.vstack([res.H_Or, res.H_Op])
    r = np.zeros((6, 6))
    r[:3, :3] = meas.R_r
    r[3:, 3:] = meas.R_p
    return z, h, r


def build_stack(
    h_lidar: np.ndarray,
    jac_lidar: np.ndarray,
    lidar_var,
    odom: tuple | None,
    report: DegeneracyReport,
    fusion_mode: str = "degeneration_gated",
) -> MeasurementStack:
    """Assemble the measurement stack for one iteration.

    ``odom`` is ``(OdomResidual, RelPoseMeasurement)`` or None. Odometry
    rows are appended only when the mode allows it: always for
    ``always_fused``, on degeneration for ``degeneration_gated``.
    """
    var = np.broadcast_to(np.asarray(lidar_var, dtype=float), (len(h_lidar),)).copy()
    fuse = odom is not None and (
        fusion_mode == "always_fused" or (fusion_mode == "degeneration_gated" and report.degenerate)
    )
    if not fuse:
        return MeasurementStack(np.asarray(h_lidar, float), np.asarray(jac_lidar, float), var)
    z_o, h_o, r_o = _odom_block(*odom)
    return MeasurementStack(
        np.concatenate([h_lidar, z_o]), np.vstack([jac_lidar, h_o]), var, r_o, used_odometry=True
    )


def _prior_cost(x: NavState, x_pred: NavState, p_inv: np.ndarray, act) -> float:
    d = boxminus(x, x_pred)[act]
    return float(d @ p_inv @ d)


def _stack_at(x, corr, odom_input, report, mode, rows=None):
    h, jac = rows if rows is not None else lidar.rows(corr, x)
    odom = None
    if odom_input is not None:
        meas, x_prev = odom_input
        odom = (odometry.residual_and_jacobian(meas, x, x_prev), meas)
    return build_stack(h, jac, corr.noise_var, odom, report, mode)


def iterated_update(
    x_pred: NavState,
    P_pred: np.ndarray,
    points_L: np.ndarray,
    pmap: PointMap,
    lidar_var: float,
    odom_input: tuple | None = None,
    cfg: IekfConfig = IekfConfig(),
) -> UpdateResult:
    """Gauss-Newton iterations on the prior-plus-measurement MAP cost.

    ``odom_input`` is ``(RelPoseMeasurement, x_prev)`` with ``x_prev`` the
    posterior of the previous scan, held fixed. Degeneracy is decided at
    the first linearization and kept for the whole update.
    """
    act = np.r_[0:18] if cfg.freeze_extrinsics else np.r_[0:st.DIM]
    p_act = P_pred[np.ix_(act, act)]
    p_inv = np.linalg.inv(p_act)
    p_inv = 0.5 * (p_inv + p_inv.T)

    x = x_pred
    report = None
    corr = None
    corr_pose = None
    trace = []
    converged = False
    used_odom = False
    it = 0
    last = None  # (info, Pk) of the latest linearization

    for it in range(1, cfg.max_iter + 1):
        if corr is None or not _close(x, corr_pose, cfg):
            corr = correspondences(points_L, pmap, x, lidar_var, cfg)
            corr_pose = x
        if len(corr) == 0:
            if report is None:
                log.debug("no valid correspondences; update skipped")
                return UpdateResult(x_pred, P_pred, 0, False, float("nan"), skipped=True)
            break
        h, jac = lidar.rows(corr, x)
        if report is None:
            report = detect(pose_hessian(jac, corr.noise_var), cfg.threshold_rot, cfg.threshold_trans)
        stack = _stack_at(x, corr, odom_input, report, cfg.fusion_mode, (h, jac))
        used_odom = stack.used_odometry

        m = m_matrix(x, x_pred)[np.ix_(act, act)]
        m_inv = np.linalg.inv(m)
        pk = m_inv @ p_act @ m_inv.T
        pk_inv = m.T @ p_inv @ m
        d = boxminus(x, x_pred)[act]

        info = stack.information(act)
        lhs = info + pk_inv
        rhs = -(stack.weighted_residual(act) + m.T @ p_inv @ d)
        step_a = np.linalg.solve(lhs, rhs)
        last = (info, pk, lhs, stack)

        cost_before = float(d @ p_inv @ d) + stack.cost()
        step = np.zeros(st.DIM)
        step[act] = step_a
        x_new = boxplus(x, step)
        after_stack = _stack_at(x_new, corr, odom_input, report, cfg.fusion_mode)
        cost_after = _prior_cost(x_new, x_pred, p_inv, act) + after_stack.cost()
        if cost_after > cost_before * (1.0 + 1e-12):
            converged = float(np.linalg.norm(step_a)) < 1e3 * cfg.step_tol
            it -= 1
            break
        trace.append((cost_before, cost_after))
        x = x_new
        if np.linalg.norm(step_a) < cfg.step_tol:
            converged = True
            break

    fallback = bool(
        report is not None and report.degenerate and odom_input is None and cfg.fusion_mode != "lidar_only"
    )
    if fallback:
        log.info("degeneration detected without odometry; LiDAR-only update")
    if last is None:
        return UpdateResult(x_pred, P_pred, 0, False, float("nan"), report, n_points=len(corr))

    info, pk, lhs, stack = last
    kh = np.linalg.solve(lhs, info)
    ikh = np.eye(len(act)) - kh
    if cfg.joseph:
        k = np.linalg.solve(lhs, stack._weighted(stack.H[:, act]).T)
        kr = k[:, : stack.n_lidar] * stack.lidar_var
        krk = kr @ k[:, : stack.n_lidar].T
        if stack.odom_R is not None:
            ko = k[:, stack.n_lidar:]
            krk += ko @ stack.odom_R @ ko.T
        p_post = ikh @ pk @ ikh.T + krk
    else:
        p_post = ikh @ pk
    cov = P_pred.copy()
    cov[np.ix_(act, act)] = 0.5 * (p_post + p_post.T)

    final_cost = trace[-1][1] if trace else _prior_cost(x, x_pred, p_inv, act) + stack.cost()
    return UpdateResult(
        x, cov, it, converged, final_cost, report, used_odom, fallback, len(corr), trace
    )


def plane_tolerance(cfg: IekfConfig, lidar_var: float) -> float:
    """Largest neighbor-to-plane distance accepted: ``plane_tol`` or so many noise sigmas."""
    return max(cfg.plane_tol, cfg.plane_tol_sigmas * float(np.sqrt(lidar_var)))


def correspondences(points_L, pmap: PointMap, x: NavState, lidar_var: float, cfg: IekfConfig):
    return lidar.find_correspondences(
        points_L, pmap, x, lidar_var, cfg.knn, plane_tolerance(cfg, lidar_var), cfg.corr_gate,
        cfg.max_neighbor_dist,
    )


def _close(x: NavState, ref: NavState | None, cfg: IekfConfig) -> bool:
    if ref is None:
        return False
    dp = np.linalg.norm(x.pos_GI - ref.pos_GI)
    dr = np.linalg.norm(log_so3(ref.rot_GI.inverse() * x.rot_GI))
    return dp < cfg.reuse_trans and np.rad2deg(dr) < cfg.reuse_rot_deg
