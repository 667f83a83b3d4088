"""Vectorised ray / triangle-mesh intersection (Moller-Trumbore, two-sided)."""
from __future__ import annotations

import numpy as np

_EPS = 1e-12
_CHUNK = 250_000  # rays x triangles per batch


def ray_aabb_mask(origins, dirs, lo, hi) -> np.ndarray:
    """Rays (with t >= 0) that touch the box ``[lo, hi]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    return (tmax >= np.maximum(tmin, 0.0))


def intersect(origins: np.ndarray, dirs: np.ndarray, tris: np.ndarray, t_min: float = 1e-9):
    """First hit of each ray against triangles ``tris`` of shape (T, 3, 3).

    Returns ``(t, tri_index)``; misses have ``t = inf`` and index -1. Directions
    need not be unit length; ``t`` is in units of the direction vector.
    """
    n_rays = len(origins)
    best_t = np.full(n_rays, np.inf)
    best_i = np.full(n_rays, -1, dtype=np.int64)
    if n_rays == 0 or len(tris) == 0:
        return best_t, best_i
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    step = max(1, _CHUNK // len(tris))
    for s in range(0, n_rays, step):
        O = origins[s : s + step, None, :]
        D = dirs[s : s + step, None, :]
        p = np.cross(D, e2[None])
        det = np.einsum("rtk,tk->rt", p, e1)
        ok = np.abs(det) > _EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = O - v0[None]
        u = np.einsum("rtk,rtk->rt", tv, p) * inv
        q = np.cross(tv, e1[None])
        v = np.einsum("rtk,rtk->rt", D, q) * inv
        t = np.einsum("tk,rtk->rt", e2, q) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min)
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        tt = t[np.arange(len(idx)), idx]
        better = tt < best_t[s : s + step]
        best_t[s : s + step] = np.where(better, tt, best_t[s : s + step])
        best_i[s : s + step] = np.where(better, idx, best_i[s : s + step])
    return best_t, best_i


def intersect_meshes(origins, dirs, meshes, t_min: float = 1e-9):
    """First hit over several triangle soups, each culled by its own bounding box.

    ``meshes`` is a sequence of (T, 3, 3) arrays. Returns ``(t, mesh_index)``.
    """
    best_t = np.full(len(origins), np.inf)
    best_m = np.full(len(origins), -1, dtype=np.int64)
    for m, tris in enumerate(meshes):
        flat = tris.reshape(-1, 3)
        sel = np.nonzero(ray_aabb_mask(origins, dirs, flat.min(axis=0) - 1e-9, flat.max(axis=0) + 1e-9))[0]
        if len(sel) == 0:
            continue
        t, _ = intersect(origins[sel], dirs[sel], tris, t_min)
        better = t < best_t[sel]
        best_t[sel[better]] = t[better]
        best_m[sel[better]] = m
    return best_t, best_m


def point_triangle_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Minimum distance from each point to a set of triangles (brute force)."""
    return closest_points_on_mesh(points, tris)[2]


def closest_points_on_mesh(points: np.ndarray, tris: np.ndarray):
    """Closest surface point of each query over all triangles (brute force).

    Returns ``(closest, tri_index, distance)``; ties go to the lowest triangle index.
    """
    points = np.asarray(points, dtype=float)
    best_d = np.full(len(points), np.inf)
    best_p = np.zeros_like(points)
    best_i = np.full(len(points), -1, dtype=np.int64)
    for i, (a, b, c) in enumerate(tris):
        q = _closest_on_triangle(points, a, b, c)
        d = np.linalg.norm(points - q, axis=1)
        better = d < best_d
        best_d[better], best_p[better], best_i[better] = d[better], q[better], i
    return best_p, best_i, best_d


def _closest_on_triangle(p, a, b, c):
    # closest point on triangle, Ericson "Real-Time Collision Detection" 5.1.5
    ab, ac = b - a, c - a
    ap = p - a
    d1, d2 = ap @ ab, ap @ ac
    bp = p - b
    d3, d4 = bp @ ab, bp @ ac
    cp = p - c
    d5, d6 = cp @ ab, cp @ ac
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        closest = a + ab * v[:, None] + ac * w[:, None]
        # edge AB
        vab = d1 / (d1 - d3)
        e_ab = a + ab * vab[:, None]
        wac = d2 / (d2 - d6)
        e_ac = a + ac * wac[:, None]
        wbc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        e_bc = b + (c - b) * wbc[:, None]
    closest = np.where(((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[:, None], e_bc, closest)
    closest = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[:, None], e_ac, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    closest = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[:, None], e_ab, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    return closest
