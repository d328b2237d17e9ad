"""Exact k-nearest-neighbour queries over a point cloud.

The tree itself is scipy's ``cKDTree`` (median splits, balanced). On top of it
the results are made fully deterministic: neighbours are ordered by
``(distance, index)``, and any tie straddling the k-th position is resolved
toward the smaller index by re-collecting every point on the k-th distance
shell.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from qreg.core import PointCloud, as_points

# Relative slack when gathering the k-th distance shell; covers round-off
# between the tree's distances and the ones recomputed here.
_SHELL_SLACK = 1e-9


def _euclid(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


class SpatialIndex:
    """Immutable kd-tree over one :class:`PointCloud`. Safe for concurrent queries."""

    def __init__(self, cloud: PointCloud, leafsize: int = 16):
        cloud.require_nonempty()
        self.cloud = cloud
        self._points = cloud.points
        self._tree = cKDTree(self._points, leafsize=leafsize, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self._points.shape[0]

    def knn(self, query: ArrayLike, k: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        """Indices and distances of the ``min(k, n)`` nearest points to one query."""
        idx, dist = self.knn_batch(as_points(query), k)
        return idx[0], dist[0]

    def knn_batch(self, queries: ArrayLike, k: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        """Vectorised :meth:`knn`; returns ``(Q, min(k, n))`` index and distance arrays."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = as_points(queries)
        n = len(self)
        k_eff = min(int(k), n)
        # One extra neighbour tells us whether the k-th distance is tied.
        probe = min(k_eff + 1, n)
        _, idx = self._tree.query(q, k=probe)
        idx = np.asarray(idx, dtype=np.int64).reshape(q.shape[0], probe)
        dist = _euclid(self._points[idx], q[:, None, :])

        order = np.lexsort((idx, dist), axis=-1) if dist.size else np.empty_like(idx)
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)

        out_idx = idx[:, :k_eff].copy()
        out_dist = dist[:, :k_eff].copy()
        if probe > k_eff:
            kth = dist[:, k_eff - 1]
            tied = dist[:, k_eff] <= kth * (1 + _SHELL_SLACK) + 1e-300
            for row in np.flatnonzero(tied):
                out_idx[row], out_dist[row] = self._resolve_shell(q[row], k_eff, kth[row])
        return out_idx, out_dist

    def _resolve_shell(self, query: NDArray[np.float64], k: int, radius: float) -> tuple[NDArray, NDArray]:
        cand = np.asarray(self._tree.query_ball_point(query, radius * (1 + 4 * _SHELL_SLACK) + 1e-300), dtype=np.int64)
        d = _euclid(self._points[cand], query)
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def knn(index: SpatialIndex, query: ArrayLike, k: int) -> list[tuple[int, float]]:
    """``(point_index, distance)`` pairs sorted by distance then index."""
    idx, dist = index.knn(query, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def brute_force_knn(points: ArrayLike, query: ArrayLike, k: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Linear-scan reference with the same ordering rules; used as a test oracle."""
    pts = as_points(points)
    d = _euclid(pts, np.asarray(query, dtype=np.float64))
    order = np.lexsort((np.arange(pts.shape[0]), d))[: min(k, pts.shape[0])]
    return order.astype(np.int64), d[order]
