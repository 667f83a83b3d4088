"""Slow, independent reference implementations used by the tests.

Nothing here imports the package's algorithms; each oracle is a direct scalar
reading of the behaviour it checks.
"""
from __future__ import annotations

import math

import numpy as np

FREE, OCCUPIED, OCCLUDED, UNKNOWN = 0, 1, 2, 3


def linear_scan_nn(points, q) -> tuple[int, float]:
    """Nearest point by a full scan; ties go to the smallest index."""
    pts = np.asarray(points, float)
    qx, qy, qz = (float(v) for v in q)
    best_i, best_sq = -1, math.inf
    for i, (x, y, z) in enumerate(pts.tolist()):
        sq = (x - qx) * (x - qx) + (y - qy) * (y - qy) + (z - qz) * (z - qz)
        if sq < best_sq:
            best_i, best_sq = i, sq
    if best_i < 0:
        return best_i, math.inf
    diff = pts[best_i] - np.asarray(q, float)
    return best_i, math.sqrt(float(np.einsum("i,i->", diff, diff)))


def union_find_partition(points, tolerance) -> set[frozenset]:
    """Connected components of the graph linking point pairs within ``tolerance``."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(points[i] - points[j]) <= tolerance:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, set] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def brute_merge(prev_points, prev_labels, current, min_distance, ratio_threshold, iterate_previous=False):
    """Double-loop vote count and merge decision.

    ``prev_labels[k]`` is the segment of previous point ``k`` (-1 for none).
    With ``iterate_previous`` the loop runs over the previous cloud against the
    current one instead (the other reading of the loop bound); votes then go to
    the segment of the previous point itself.

    Returns ``{segment: (near, far, merged)}``.
    """
    ids = sorted({int(l) for l in prev_labels if l >= 0})
    near = {i: 0 for i in ids}
    far = {i: 0 for i in ids}
    if iterate_previous:
        for k, p in enumerate(prev_points):
            if prev_labels[k] < 0 or len(current) == 0:
                continue
            _, d = linear_scan_nn(current, p)
            (near if d < min_distance else far)[int(prev_labels[k])] += 1
    else:
        for p in current:
            k, d = linear_scan_nn(prev_points, p)
            t = int(prev_labels[k])
            if t < 0:
                continue
            if d < min_distance:
                near[t] += 1
            else:
                far[t] += 1
    out = {}
    for i in ids:
        if near[i] == 0 and far[i] == 0:
            merged = True
        elif near[i] == 0:
            merged = False
        else:
            merged = far[i] / near[i] < ratio_threshold
        out[i] = (near[i], far[i], merged)
    return out


def _cell_of(p, origin, cell, dims):
    ijk = tuple(int(math.floor((p[a] - origin[a]) / cell)) for a in range(3))
    inside = all(0 <= ijk[a] < dims[a] for a in range(3))
    return ijk, inside


def in_view(sensor_R, sensor_t, p, hfov, vfov, min_range, max_range) -> bool:
    c = sensor_R.T @ (np.asarray(p, float) - sensor_t)
    if c[2] <= 0:
        return False
    r = float(np.linalg.norm(c))
    return (
        abs(c[0] / c[2]) <= math.tan(hfov / 2)
        and abs(c[1] / c[2]) <= math.tan(vfov / 2)
        and min_range <= r <= max_range
    )


def march_blocked(origin, cell, dims, occupied, sensor_t, target) -> bool:
    """March from the sensor toward the centre of cell ``target`` at step ``cell / 10``.

    True when a sample before the centre falls in an occupied cell other than
    the target itself.
    """
    origin = np.asarray(origin, float)
    c = origin + (np.asarray(target) + 0.5) * cell
    d = c - sensor_t
    L = float(np.linalg.norm(d))
    u = d / L
    step = cell / 10
    m = 1
    while m * step < L:
        ijk, inside = _cell_of(sensor_t + m * step * u, origin, cell, dims)
        if inside and ijk != tuple(target) and occupied[ijk]:
            return True
        m += 1
    return False


def ray_march_states(origin, cell, dims, points, sensor_R, sensor_t, fov, ranges, min_points, prior=None):
    """Cell states from a scalar march at step ``cell / 10`` toward every cell centre.

    A cell is occupied when it holds ``min_points`` points; otherwise it is
    occluded when a march sample before its centre lies in another occupied
    cell, free when unobstructed and inside the view, else it keeps ``prior``.
    """
    origin = np.asarray(origin, float)
    counts = np.zeros(dims, dtype=int)
    for p in points:
        ijk, inside = _cell_of(p, origin, cell, dims)
        if inside:
            counts[ijk] += 1
    occ = counts >= min_points
    states = np.full(dims, UNKNOWN, dtype=int) if prior is None else np.array(prior, dtype=int)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                if occ[i, j, k]:
                    states[i, j, k] = OCCUPIED
                    continue
                c = origin + (np.array([i, j, k]) + 0.5) * cell
                blocked = march_blocked(origin, cell, dims, occ, sensor_t, (i, j, k))
                if blocked:
                    states[i, j, k] = OCCLUDED
                elif in_view(sensor_R, sensor_t, c, fov[0], fov[1], ranges[0], ranges[1]):
                    states[i, j, k] = FREE
    return states


def segment_crosses_wall(o, c, lo, hi) -> bool:
    """Whether the segment ``o -> c`` passes through one of the four side walls of the box."""
    for axis in (0, 1):
        other = 1 - axis
        for plane in (lo[axis], hi[axis]):
            a, b = o[axis] - plane, c[axis] - plane
            if a * b >= 0:
                continue
            s = a / (a - b)
            p = o + s * (c - o)
            if lo[2] <= p[2] <= hi[2] and lo[other] <= p[other] <= hi[other]:
                return True
    return False


def ray_triangle(o, d, a, b, c):
    """Möller-Trumbore; returns the hit distance or ``inf``."""
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = float(e1 @ h)
    if abs(det) < 1e-15:
        return math.inf
    f = 1.0 / det
    s = o - a
    u = f * float(s @ h)
    if u < 0 or u > 1:
        return math.inf
    q = np.cross(s, e1)
    v = f * float(d @ q)
    if v < 0 or u + v > 1:
        return math.inf
    t = f * float(e2 @ q)
    return t if t > 1e-9 else math.inf
