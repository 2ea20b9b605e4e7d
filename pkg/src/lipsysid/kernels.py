"""Hot inner loops.

Each kernel has a loop form decorated with :func:`lipsysid._accel.njit`
(compiled when numba is enabled, interpreted otherwise) and, where a
vectorized equivalent exists, a ``*_numpy`` form. The public dispatchers
pick the loop form under numba and the numpy form otherwise.
"""
import itertools

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# ---------------------------------------------------------------------------
# pairwise Lipschitz quotient


@njit
def max_pair_quotient_loop(X, Y, min_dist):
    n = X.shape[0]
    best = -1.0  # so a qualifying pair with quotient 0 is still reported
    bi = -1
    bj = -1
    for i in range(n):
        for j in range(i + 1, n):
            dx = 0.0
            for k in range(X.shape[1]):
                t = X[i, k] - X[j, k]
                dx += t * t
            dx = np.sqrt(dx)
            if dx < min_dist:
                continue
            dy = 0.0
            for k in range(Y.shape[1]):
                t = Y[i, k] - Y[j, k]
                dy += t * t
            r = np.sqrt(dy) / dx
            if r > best:
                best = r
                bi = i
                bj = j
    if bi < 0:
        return 0.0, -1, -1
    return best, bi, bj


def max_pair_quotient_numpy(X, Y, min_dist):
    n = X.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    if iu.size == 0:
        return 0.0, -1, -1
    dx = np.linalg.norm(X[iu] - X[ju], axis=1)
    dy = np.linalg.norm(Y[iu] - Y[ju], axis=1)
    ok = dx >= min_dist
    if not np.any(ok):
        return 0.0, -1, -1
    r = np.full_like(dx, -1.0)
    r[ok] = dy[ok] / dx[ok]
    k = int(np.argmax(r))
    return float(r[k]), int(iu[k]), int(ju[k])


def max_pair_quotient(X, Y, min_dist=1e-12):
    """Largest ``‖Y_i − Y_j‖ / ‖X_i − X_j‖`` over pairs ``i < j``.

    Returns ``(quotient, i, j)``; ``i = j = -1`` when no pair qualifies.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if NUMBA_ENABLED:
        q, i, j = max_pair_quotient_loop(X, Y, min_dist)
        return float(q), int(i), int(j)
    return max_pair_quotient_numpy(X, Y, min_dist)


# ---------------------------------------------------------------------------
# lattice vertex distance


@njit
def vertex_max_dist_loop(x, blo, bhi):
    d = x.shape[0]
    best = 0.0
    for mask in range(1 << d):
        s = 0.0
        for k in range(d):
            v = bhi[k] if (mask >> k) & 1 else blo[k]
            t = x[k] - v
            s += t * t
        if s > best:
            best = s
    return np.sqrt(best)


def box_vertices(blo, bhi):
    """All 2ⁿ corners of the box [blo, bhi]."""
    blo = np.asarray(blo, dtype=np.float64)
    bhi = np.asarray(bhi, dtype=np.float64)
    pick = np.array(list(itertools.product((False, True), repeat=blo.size)))
    return np.where(pick, bhi, blo)


def vertex_max_dist_numpy(points, blo, bhi):
    """Max distance from each row of ``points`` to the box's 2ⁿ vertices."""
    verts = box_vertices(blo, bhi)
    diff = np.asarray(points, dtype=np.float64)[:, None, :] - verts[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).max(axis=1)


# ---------------------------------------------------------------------------
# k-d tree traversal over flat arrays (see kdtree.KdTree for layout)


@njit
def _box_overlaps(nlo, nhi, node, qlo, qhi):
    for k in range(qlo.shape[0]):
        if nhi[node, k] < qlo[k] or nlo[node, k] > qhi[k]:
            return False
    return True


@njit
def _box_contains(nlo, nhi, node, qlo, qhi):
    for k in range(qlo.shape[0]):
        if nlo[node, k] < qlo[k] or nhi[node, k] > qhi[k]:
            return False
    return True


@njit
def kd_box_query(pts, start, end, left, right, nlo, nhi, qlo, qhi, out):
    """Write sorted-order positions of points inside the closed box into ``out``.

    Returns the count. Positions index the tree's reordered point array.
    """
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    count = 0
    d = qlo.shape[0]
    while top > 0:
        top -= 1
        node = stack[top]
        if not _box_overlaps(nlo, nhi, node, qlo, qhi):
            continue
        if _box_contains(nlo, nhi, node, qlo, qhi):
            for p in range(start[node], end[node]):
                out[count] = p
                count += 1
            continue
        if left[node] < 0:
            for p in range(start[node], end[node]):
                inside = True
                for k in range(d):
                    if pts[p, k] < qlo[k] or pts[p, k] > qhi[k]:
                        inside = False
                        break
                if inside:
                    out[count] = p
                    count += 1
            continue
        stack[top] = right[node]
        top += 1
        stack[top] = left[node]
        top += 1
    return count


@njit
def _min_dist2_to_box(nlo, nhi, node, q):
    s = 0.0
    for k in range(q.shape[0]):
        if q[k] < nlo[node, k]:
            t = nlo[node, k] - q[k]
            s += t * t
        elif q[k] > nhi[node, k]:
            t = q[k] - nhi[node, k]
            s += t * t
    return s


@njit
def kd_knn(pts, start, end, left, right, nlo, nhi, q, k, best_d, best_p):
    """k nearest (squared-ℓ₂) neighbours of ``q``; ties broken by position.

    Fills ``best_d``/``best_p`` in ascending order and returns how many were found.
    """
    for i in range(k):
        best_d[i] = np.inf
        best_p[i] = -1
    found = 0
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    d = q.shape[0]
    while top > 0:
        top -= 1
        node = stack[top]
        if found == k and _min_dist2_to_box(nlo, nhi, node, q) > best_d[k - 1]:
            continue
        if left[node] < 0:
            for p in range(start[node], end[node]):
                s = 0.0
                for c in range(d):
                    t = pts[p, c] - q[c]
                    s += t * t
                if found == k and (s > best_d[k - 1] or (s == best_d[k - 1] and p > best_p[k - 1])):
                    continue
                # insertion into the sorted buffer
                pos = found if found < k else k - 1
                while pos > 0 and (
                    best_d[pos - 1] > s or (best_d[pos - 1] == s and best_p[pos - 1] > p)
                ):
                    if pos < k:
                        best_d[pos] = best_d[pos - 1]
                        best_p[pos] = best_p[pos - 1]
                    pos -= 1
                best_d[pos] = s
                best_p[pos] = p
                if found < k:
                    found += 1
            continue
        a = left[node]
        b = right[node]
        da = _min_dist2_to_box(nlo, nhi, a, q)
        db = _min_dist2_to_box(nlo, nhi, b, q)
        # push the farther child first so the nearer one is popped next
        if da <= db:
            stack[top] = b
            top += 1
            stack[top] = a
            top += 1
        else:
            stack[top] = a
            top += 1
            stack[top] = b
            top += 1
    return found


@njit
def lattice_errors_loop(pts, start, end, left, right, nlo, nhi, resid, box_lo, box_hi, lip, q):
    """Per-lattice certified error: min over candidates of resid + lip·vertex distance.

    Lattice ``i`` is the closed box [box_lo[i], box_hi[i]]. Candidates are the
    points inside it, or the ``q`` nearest to its centre when it is empty.
    Returns ``(errors, best_pos, in_box)``.
    """
    m = box_lo.shape[0]
    d = box_lo.shape[1]
    errors = np.empty(m)
    best_pos = np.empty(m, dtype=np.int64)
    in_box = np.empty(m, dtype=np.bool_)
    buf = np.empty(pts.shape[0], dtype=np.int64)
    kd = np.empty(q)
    kp = np.empty(q, dtype=np.int64)
    center = np.empty(d)
    for i in range(m):
        cnt = kd_box_query(pts, start, end, left, right, nlo, nhi, box_lo[i], box_hi[i], buf)
        if cnt > 0:
            in_box[i] = True
        else:
            in_box[i] = False
            for c in range(d):
                center[c] = 0.5 * (box_lo[i, c] + box_hi[i, c])
            cnt = kd_knn(pts, start, end, left, right, nlo, nhi, center, q, kd, kp)
            for t in range(cnt):
                buf[t] = kp[t]
        e = np.inf
        bp = -1
        for t in range(cnt):
            p = buf[t]
            eps = resid[p] + lip * vertex_max_dist_loop(pts[p], box_lo[i], box_hi[i])
            if eps < e or (eps == e and p < bp):
                e = eps
                bp = p
        errors[i] = e
        best_pos[i] = bp
    return errors, best_pos, in_box
