"""Balanced k-d tree over a static point set, stored as flat arrays."""
import numpy as np

from . import kernels


class KdTree:
    """Median-split k-d tree with per-node bounding boxes.

    Nodes split on the widest coordinate of their bounding box; leaves hold
    at most ``leaf_size`` points. Queries return indices into the original
    ``points`` array.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("KdTree needs a non-empty (N, d) array")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.n, self.dim = pts.shape
        perm = np.arange(self.n)
        starts, ends, lefts, rights, los, his = [], [], [], [], [], []

        def new_node(s, e):
            block = pts[perm[s:e]]
            starts.append(s)
            ends.append(e)
            lefts.append(-1)
            rights.append(-1)
            los.append(block.min(axis=0))
            his.append(block.max(axis=0))
            return len(starts) - 1

        root = new_node(0, self.n)
        todo = [root]
        while todo:
            node = todo.pop()
            s, e = starts[node], ends[node]
            if e - s <= leaf_size:
                continue
            spread = his[node] - los[node]
            axis = int(np.argmax(spread))
            if spread[axis] == 0.0:
                continue  # all points coincide
            mid = (s + e) // 2
            seg = perm[s:e]
            order = np.argpartition(pts[seg, axis], mid - s, kind="introselect")
            perm[s:e] = seg[order]
            lefts[node] = new_node(s, mid)
            rights[node] = new_node(mid, e)
            todo.append(rights[node])
            todo.append(lefts[node])

        self.perm = perm
        self.points = pts[perm]
        self.start = np.array(starts, dtype=np.int64)
        self.end = np.array(ends, dtype=np.int64)
        self.left = np.array(lefts, dtype=np.int64)
        self.right = np.array(rights, dtype=np.int64)
        self.node_lo = np.array(los, dtype=np.float64)
        self.node_hi = np.array(his, dtype=np.float64)

    @property
    def arrays(self):
        return (self.points, self.start, self.end, self.left, self.right, self.node_lo, self.node_hi)

    def __len__(self):
        return self.n

    def query_box(self, lo, hi) -> np.ndarray:
        """Indices of points with ``lo <= x <= hi`` coordinatewise, sorted."""
        lo = np.ascontiguousarray(np.broadcast_to(lo, (self.dim,)), dtype=np.float64)
        hi = np.ascontiguousarray(np.broadcast_to(hi, (self.dim,)), dtype=np.float64)
        buf = np.empty(self.n, dtype=np.int64)
        cnt = kernels.kd_box_query(*self.arrays, lo, hi, buf)
        return np.sort(self.perm[buf[:cnt]])

    def query_knn(self, x, k: int):
        """``(distances, indices)`` of the ``k`` nearest points, nearest first."""
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(int(k), self.n)
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(self.dim)
        best_d = np.empty(k)
        best_p = np.empty(k, dtype=np.int64)
        cnt = kernels.kd_knn(*self.arrays, x, k, best_d, best_p)
        return np.sqrt(best_d[:cnt]), self.perm[best_p[:cnt]]

    def query_knn_many(self, X, k: int):
        """Row-wise :meth:`query_knn`; returns ``(N, k)`` distance and index arrays."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k = min(int(k), self.n)
        dist = np.empty((X.shape[0], k))
        idx = np.empty((X.shape[0], k), dtype=np.int64)
        for r in range(X.shape[0]):
            dist[r], idx[r] = self.query_knn(X[r], k)
        return dist, idx
