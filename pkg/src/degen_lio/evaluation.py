"""Trajectory association, rigid alignment, ATE and box-plot aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    t: np.ndarray  # (N,)
    pos: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4) w, x, y, z

    def __post_init__(self):
        t = np.asarray(self.t, float).reshape(-1)
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise EvaluationError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "pos", np.asarray(self.pos, float).reshape(-1, 3))
        object.__setattr__(self, "quat", np.asarray(self.quat, float).reshape(-1, 4))

    def __len__(self) -> int:
        return len(self.t)


def write_tum(traj: Trajectory, path) -> None:
    """``t x y z qx qy qz qw`` per line."""
    with open(path, "w") as fh:
        for t, p, q in zip(traj.t, traj.pos, traj.quat):
            fh.write(f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n")


def read_tum(path) -> Trajectory:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise EvaluationError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise EvaluationError(f"{path}:{lineno}: {exc}") from None
    a = np.array(rows).reshape(-1, 8)
    return Trajectory(a[:, 0], a[:, 1:4], a[:, [7, 4, 5, 6]])


@dataclass(frozen=True, eq=False)
class PosePairs:
    t: np.ndarray
    est: np.ndarray  # (N, 3)
    gt: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.t)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.01) -> PosePairs:
    """Greedy nearest-timestamp matching; each ground-truth pose used once."""
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("empty trajectory")
    j = np.searchsorted(gt.t, est.t)
    cand = np.stack([np.clip(j - 1, 0, len(gt) - 1), np.clip(j, 0, len(gt) - 1)], axis=1)
    dt = np.abs(gt.t[cand] - est.t[:, None])
    best = cand[np.arange(len(est)), np.argmin(dt, axis=1)]
    diff = np.abs(gt.t[best] - est.t)
    order = np.argsort(diff, kind="stable")
    used: set[int] = set()
    keep = []
    for i in order:
        if diff[i] <= max_dt and int(best[i]) not in used:
            used.add(int(best[i]))
            keep.append(i)
    if not keep:
        raise EvaluationError(f"no poses within {max_dt} s of each other")
    keep = np.sort(np.array(keep))
    return PosePairs(est.t[keep], est.pos[keep], gt.pos[best[keep]])


def align_se3(pairs: PosePairs):
    """Rotation ``R`` and translation ``t`` minimizing ``sum |R p_est + t - p_gt|^2``."""
    if len(pairs) < 3:
        raise EvaluationError("need at least 3 pose pairs for alignment")
    mu_e = pairs.est.mean(axis=0)
    mu_g = pairs.gt.mean(axis=0)
    e = pairs.est - mu_e
    g = pairs.gt - mu_g
    sv = np.linalg.svd(e, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise EvaluationError("degenerate (collinear or coincident) positions; alignment undefined")
    cov = g.T @ e / len(pairs)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return r, mu_g - r @ mu_e


@dataclass(frozen=True, eq=False)
class AteStats:
    max: float
    mean: float
    rmse: float
    errors: np.ndarray


def ate(pairs: PosePairs, transform) -> AteStats:
    r, t = transform
    err = np.linalg.norm(pairs.est @ r.T + t - pairs.gt, axis=1)
    return AteStats(float(err.max()), float(err.mean()), float(np.sqrt(np.mean(err**2))), err)


def evaluate(est: Trajectory, gt: Trajectory, max_dt: float = 0.01) -> AteStats:
    pairs = associate(est, gt, max_dt)
    return ate(pairs, align_se3(pairs))


@dataclass(frozen=True)
class BoxStats:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    min: float
    max: float


def aggregate(values) -> BoxStats:
    """Quartiles by linear interpolation, whiskers at the most extreme data within 1.5 IQR."""
    v = np.sort(np.asarray([x.mean if isinstance(x, AteStats) else x for x in values], dtype=float))
    if v.size == 0:
        raise EvaluationError("nothing to aggregate")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return BoxStats(int(v.size), float(v.mean()), float(med), float(q1), float(q3), float(lo), float(hi),
                    float(v[0]), float(v[-1]))
