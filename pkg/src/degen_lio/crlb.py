"""Fisher-information blocks, Schur-complement CRLBs and the ordering check.

Column layout throughout: ``[pose(6), lidar_extrinsic(6), odom_extrinsic(6)]``
with pose = attitude then position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import state as st

COND_LIMIT = 1e12
CROSS_TOL = 1e-9


class LayoutError(ValueError):
    pass


class SingularBlockError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class FisherBlocks:
    U: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F: np.ndarray
    D: np.ndarray
    E: np.ndarray


@dataclass(frozen=True, eq=False)
class CrlbResult:
    crlb_li: np.ndarray
    crlb_pf: np.ndarray
    psd_gap_eigmin: float


def fisher(H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``H^T R^-1 H``; ``R`` may be a full matrix or a vector of variances."""
    H = np.asarray(H, dtype=float)
    R = np.asarray(R, dtype=float)
    wh = H / R[:, None] if R.ndim == 1 else np.linalg.solve(R, H)
    j = H.T @ wh
    return 0.5 * (j + j.T)


def split_blocks(J: np.ndarray) -> FisherBlocks:
    """Partition a 12x12 (LiDAR-only) or 18x18 (pose-fusion) information matrix.

    For 18x18 input the pose block is ``U + F``; ``F`` is not separable
    from ``U`` without the LiDAR-only matrix, so it is reported as zero
    and ``U`` carries the sum. Use ``blocks_from_parts`` to keep them apart.
    """
    J = np.asarray(J, dtype=float)
    z = np.zeros((6, 6))
    if J.shape == (12, 12):
        return FisherBlocks(J[:6, :6], J[:6, 6:], J[6:, 6:], z, z, z)
    if J.shape == (18, 18):
        cross = J[6:12, 12:18]
        if np.max(np.abs(cross)) > CROSS_TOL:
            raise LayoutError(
                f"LiDAR-extrinsic x odometry-extrinsic block must vanish, max |.| = {np.max(np.abs(cross)):.3e}"
            )
        return FisherBlocks(J[:6, :6], J[:6, 6:12], J[6:12, 6:12], z, J[:6, 12:], J[12:, 12:])
    raise LayoutError(f"expected a 12x12 or 18x18 matrix, got {J.shape}")


def blocks_from_parts(J_li: np.ndarray, J_op: np.ndarray) -> FisherBlocks:
    """Blocks from the LiDAR information (12x12, pose + LiDAR extrinsic) and
    the odometry information (12x12, pose + odometry extrinsic)."""
    li = split_blocks(J_li)
    J_op = np.asarray(J_op, dtype=float)
    return FisherBlocks(li.U, li.B, li.C, J_op[:6, :6], J_op[:6, 6:], J_op[6:, 6:])


def assemble_pose_fusion(b: FisherBlocks) -> np.ndarray:
    z = np.zeros((6, 6))
    return np.block([[b.U + b.F, b.B, b.D], [b.B.T, b.C, z], [b.D.T, z, b.E]])


def _checked_inv(a: np.ndarray, name: str) -> np.ndarray:
    c = np.linalg.cond(a)
    if not np.isfinite(c) or c >= COND_LIMIT:
        raise SingularBlockError(f"{name} is singular (condition number {c:.3e})")
    return np.linalg.inv(a)


def _sym(a):
    return 0.5 * (a + a.T)


def schur_lidar(b: FisherBlocks) -> np.ndarray:
    return _sym(b.U - b.B @ _checked_inv(b.C, "C") @ b.B.T)


def schur_odom(b: FisherBlocks) -> np.ndarray:
    return _sym(b.F - b.D @ _checked_inv(b.E, "E") @ b.D.T)


def crlb_pure_lidar(b: FisherBlocks) -> np.ndarray:
    return _sym(np.linalg.inv(schur_lidar(b)))


def crlb_pose_fusion(b: FisherBlocks) -> np.ndarray:
    return _sym(np.linalg.inv(schur_lidar(b) + schur_odom(b)))


def compare(b: FisherBlocks) -> CrlbResult:
    li = crlb_pure_lidar(b)
    pf = crlb_pose_fusion(b)
    return CrlbResult(li, pf, float(np.linalg.eigvalsh(_sym(li - pf))[0]))


def certify_ordering(r: CrlbResult) -> bool:
    return r.psd_gap_eigmin >= -1e-9 * float(np.trace(r.crlb_li))


# instance generators -------------------------------------------------------


def random_instance(rng: np.random.Generator, n_lidar: int = 40, n_odom: int = 12):
    """Random Jacobians with the pose-fusion sparsity pattern.

    Returns ``(H_pf, R_diag)``: ``n_lidar`` LiDAR rows over pose and LiDAR
    extrinsic, then ``n_odom`` odometry rows over pose and odometry
    extrinsic. With ``n_odom > 6`` the odometry keeps pose information after
    its extrinsic is marginalized; with exactly 6 it keeps none.
    """
    h = np.zeros((n_lidar + n_odom, 18))
    h[:n_lidar, :12] = rng.normal(size=(n_lidar, 12))
    h[n_lidar:, :6] = rng.normal(size=(n_odom, 6))
    h[n_lidar:, 12:] = rng.normal(size=(n_odom, 6))
    r = rng.uniform(0.5, 2.0, size=n_lidar + n_odom) ** 2
    return h, r


def pose_fusion_jacobian(jac_lidar: np.ndarray, jac_odom: np.ndarray) -> np.ndarray:
    """Restrict 30-column filter Jacobians to the 18-column CRLB layout."""
    cols_li = np.r_[st.POSE, st.LIDAR_EXTRINSIC]
    cols_op = np.r_[st.POSE, st.ODOM_EXTRINSIC]
    m = len(jac_lidar)
    h = np.zeros((m + len(jac_odom), 18))
    h[:m, :12] = jac_lidar[:, cols_li]
    h[m:, :6] = jac_odom[:, cols_op[:6]]
    h[m:, 12:] = jac_odom[:, cols_op[6:]]
    return h


def blocks_from_jacobians(H_pf: np.ndarray, R_diag_or_full, n_lidar: int, extrinsic_prior=None) -> FisherBlocks:
    """Fisher blocks from an 18-column pose-fusion Jacobian.

    ``extrinsic_prior`` (two 6x6 information matrices, LiDAR then odometry)
    is added to ``C`` and ``E``; it leaves the sparsity pattern intact.
    """
    R = np.asarray(R_diag_or_full, dtype=float)
    if R.ndim == 1:
        r_li, r_op = R[:n_lidar], R[n_lidar:]
    else:
        r_li, r_op = R[:n_lidar, :n_lidar], R[n_lidar:, n_lidar:]
    j_li = fisher(H_pf[:n_lidar, :12], r_li)
    j_op = fisher(H_pf[n_lidar:, np.r_[0:6, 12:18]], r_op)
    if extrinsic_prior is not None:
        j_li[6:, 6:] += extrinsic_prior[0]
        j_op[6:, 6:] += extrinsic_prior[1]
    return blocks_from_parts(j_li, j_op)
