"""Eigenvalue test for geometric degeneration of the LiDAR constraints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class DegeneracyReport:
    eig_rot: np.ndarray  # ascending
    eig_trans: np.ndarray  # ascending
    dir_rot: np.ndarray  # columns are eigenvectors
    dir_trans: np.ndarray
    degenerate: bool
    threshold_rot: float
    threshold_trans: float

    @property
    def weakest_translation(self) -> np.ndarray:
        return self.dir_trans[:, 0]

    @property
    def weakest_rotation(self) -> np.ndarray:
        return self.dir_rot[:, 0]

    def constrained_directions(self) -> list[np.ndarray]:
        """Pose-space (6-dim) unit directions whose eigenvalue clears the threshold."""
        out = []
        for evals, vecs, thr, off in (
            (self.eig_rot, self.dir_rot, self.threshold_rot, 0),
            (self.eig_trans, self.dir_trans, self.threshold_trans, 3),
        ):
            for lam, v in zip(evals, vecs.T):
                if lam >= thr:
                    u = np.zeros(6)
                    u[off:off + 3] = v
                    out.append(u)
        return out


def pose_hessian(jacobian, noise_var) -> np.ndarray:
    """Noise-weighted information ``H^T R^-1 H`` on the attitude and position columns.

    ``jacobian`` is an ``(m, 30)`` array or a sequence of rows with a
    ``jacobian`` attribute; ``noise_var`` a scalar or per-row variances.
    """
    if not isinstance(jacobian, np.ndarray):
        jacobian = [r.jacobian for r in jacobian]
    jac = np.asarray(jacobian, dtype=float).reshape(-1, 30)
    if len(jac) == 0:
        return np.zeros((6, 6))
    w = 1.0 / np.broadcast_to(np.asarray(noise_var, dtype=float), (len(jac),))
    hp = jac[:, :6]
    out = (hp * w[:, None]).T @ hp
    return 0.5 * (out + out.T)


def detect(h: np.ndarray, threshold_rot: float, threshold_trans: float) -> DegeneracyReport:
    """Eigen-decompose the rotation and translation diagonal blocks separately.

    Degenerate when any eigenvalue falls below its block threshold.
    """
    h = np.asarray(h, dtype=float)
    er, vr = np.linalg.eigh(h[:3, :3])
    et, vt = np.linalg.eigh(h[3:6, 3:6])
    degenerate = bool(er[0] < threshold_rot or et[0] < threshold_trans)
    return DegeneracyReport(er, et, vr, vt, degenerate, threshold_rot, threshold_trans)
