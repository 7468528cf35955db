"""Axis-aligned bounding-volume hierarchy over triangles with closest-point queries."""

import numpy as np
from numba import njit

_LEAF_SIZE = 4


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point to ``p`` on triangle ``abc`` (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()
    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


def build_bvh(tris):
    """Median-split BVH over an (F, 3, 3) triangle array.

    Returns flat arrays ``(lo, hi, left, right, start, count, order)``; a
    node is a leaf when ``count > 0`` and then covers
    ``order[start:start + count]``.
    """
    n = len(tris)
    tmin = tris.min(axis=1)
    tmax = tris.max(axis=1)
    cent = tris.mean(axis=1)
    order = np.arange(n)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node():
        lo.append(None); hi.append(None)
        left.append(-1); right.append(-1); start.append(0); count.append(0)
        return len(lo) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        lo[node] = tmin[idx].min(axis=0)
        hi[node] = tmax[idx].max(axis=0)
        if e - s <= _LEAF_SIZE:
            start[node] = s
            count[node] = e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (e - s) // 2
        part = np.argpartition(c[:, axis], mid)
        order[s:e] = idx[part]
        l_node = new_node()
        r_node = new_node()
        left[node] = l_node
        right[node] = r_node
        stack.append((r_node, s + mid, e))
        stack.append((l_node, s, s + mid))
    return (np.array(lo), np.array(hi), np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
            np.array(count, dtype=np.int64), order.astype(np.int64))


@njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            t = lo[k] - p[k]
            d2 += t * t
        elif p[k] > hi[k]:
            t = p[k] - hi[k]
            d2 += t * t
    return d2


@njit(cache=True, nogil=True)
def query_closest(points, tris, lo, hi, left, right, start, count, order):
    """For each point return (squared distance, closest point, triangle index)."""
    n = points.shape[0]
    out_d2 = np.empty(n)
    out_cp = np.empty((n, 3))
    out_tri = np.empty(n, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for q in range(n):
        p = points[q]
        best = np.inf
        best_cp = np.zeros(3)
        best_t = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, lo[node], hi[node]) > best:
                continue
            if count[node] > 0:
                for j in range(start[node], start[node] + count[node]):
                    t = order[j]
                    cp = closest_point_triangle(p, tris[t, 0], tris[t, 1], tris[t, 2])
                    dx = p[0] - cp[0]
                    dy = p[1] - cp[1]
                    dz = p[2] - cp[2]
                    d2 = dx * dx + dy * dy + dz * dz
                    # ties resolve to the lowest triangle index for determinism
                    if d2 < best or (d2 == best and t < best_t):
                        best = d2
                        best_cp = cp
                        best_t = t
            else:
                l = left[node]
                r = right[node]
                dl = _box_dist2(p, lo[l], hi[l])
                dr = _box_dist2(p, lo[r], hi[r])
                # push the farther child first so the nearer one is visited first
                if dl <= dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out_d2[q] = best
        out_cp[q] = best_cp
        out_tri[q] = best_t
    return out_d2, out_cp, out_tri


class TriangleBVH:
    """Exact nearest-triangle queries for a triangle soup."""

    def __init__(self, vertices, faces):
        self.tris = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64)[np.asarray(faces)])
        if len(self.tris) == 0:
            raise ValueError("cannot build a BVH over zero triangles")
        self._nodes = build_bvh(self.tris)

    def query(self, points):
        points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d2, cp, tri = query_closest(points, self.tris, *self._nodes)
        return np.sqrt(d2), cp, tri
