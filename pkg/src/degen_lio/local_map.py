"""World-frame point map with exact kNN queries and local plane fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

_OFFSET = 1 << 20
_MASK = (1 << 21) - 1


def voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    """Pack integer voxel coordinates into one int64 per point."""
    ijk = np.floor(points / resolution).astype(np.int64) + _OFFSET
    if np.any(ijk < 0) or np.any(ijk > _MASK):
        raise ValueError("point outside the addressable voxel range")
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


def voxel_downsample(points: np.ndarray, resolution: float) -> np.ndarray:
    """Keep the first point that falls in each voxel, in input order."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0 or resolution <= 0:
        return points
    _, first = np.unique(voxel_keys(points, resolution), return_index=True)
    return points[np.sort(first)]


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    anchor: np.ndarray
    valid: bool
    rms: float


def fit_planes(neighbors: np.ndarray, plane_tol: float):
    """Batch least-squares plane fit over an ``(N, K, 3)`` neighbor array.

    Returns ``(normals, anchors, valid, rms)``. The anchor is the centroid,
    the normal the smallest-eigenvalue eigenvector of the scatter matrix.
    Collinear or coincident neighborhoods are invalid.
    """
    nb = np.asarray(neighbors, dtype=float)
    anchors = nb.mean(axis=1)
    d = nb - anchors[:, None, :]
    scatter = np.einsum("nki,nkj->nij", d, d)
    evals, evecs = np.linalg.eigh(scatter)
    normals = evecs[:, :, 0]
    dist = np.einsum("nki,ni->nk", d, normals)
    rms = np.sqrt(np.mean(dist**2, axis=1))
    spread = evals[:, 2]
    planar = (spread > 1e-20) & (evals[:, 1] > 1e-8 * spread)
    valid = planar & np.all(np.abs(dist) <= plane_tol, axis=1)
    return normals, anchors, valid, rms


def fit_plane(neighbors, plane_tol: float = 0.1) -> PlaneFit:
    nb = np.asarray(neighbors, dtype=float)
    if nb.ndim != 2 or nb.shape[0] < 5 or nb.shape[1] != 3:
        raise ValueError(f"need at least 5 neighbor points, got shape {nb.shape}")
    n, a, v, r = fit_planes(nb[None], plane_tol)
    return PlaneFit(n[0], a[0], bool(v[0]), float(r[0]))


class PointMap:
    """Accumulated point cloud; single writer.

    Points are voxel-filtered on insertion (one point per voxel, first come
    wins). The kd-tree is rebuilt once more than ``rebuild_threshold``
    points are pending; pending points are searched through a small
    secondary tree so queries stay exact.
    """

    def __init__(self, resolution: float = 0.25, rebuild_threshold: int = 4096):
        self.resolution = resolution
        self.rebuild_threshold = rebuild_threshold
        self._points = np.empty((0, 3))
        self._keys: set[int] = set()
        self._n_indexed = 0
        self._tree: cKDTree | None = None
        self._pending_tree: cKDTree | None = None

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def insert_scan(self, points) -> int:
        """Insert world-frame points; returns how many were added."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point in scan")
        if len(pts) == 0:
            return 0
        keys = voxel_keys(pts, self.resolution)
        _, first = np.unique(keys, return_index=True)
        first = np.sort(first)
        fresh = [i for i in first if int(keys[i]) not in self._keys]
        if not fresh:
            return 0
        self._keys.update(int(keys[i]) for i in fresh)
        self._points = np.vstack([self._points, pts[fresh]])
        if len(self._points) - self._n_indexed > self.rebuild_threshold or self._tree is None:
            self._tree = cKDTree(self._points)
            self._n_indexed = len(self._points)
            self._pending_tree = None
        else:
            self._pending_tree = cKDTree(self._points[self._n_indexed:])
        return len(fresh)

    def knn(self, query, k: int):
        """Exact ``k`` nearest neighbors for one query or an ``(N, 3)`` batch.

        Returns ``(distances, indices)`` sorted by distance, ties by
        insertion order. ``k`` larger than the map returns every point.
        """
        if len(self) == 0:
            raise ValueError("knn on an empty map")
        q = np.asarray(query, dtype=float)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        k = min(k, len(self))
        dist, idx = self._query(self._tree, q, min(k, self._n_indexed), 0)
        if self._pending_tree is not None:
            n_pending = len(self) - self._n_indexed
            d2, i2 = self._query(self._pending_tree, q, min(k, n_pending), self._n_indexed)
            dist = np.hstack([dist, d2])
            idx = np.hstack([idx, i2])
        order = np.lexsort((idx, dist), axis=-1)[:, :k]
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        if single:
            return dist[0], idx[0]
        return dist, idx

    @staticmethod
    def _query(tree, q, k, offset):
        d, i = tree.query(q, k=k)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i + offset

    def to_csv(self, path):
        np.savetxt(path, self._points, delimiter=",", header="x,y,z", comments="", fmt="%.6f")
