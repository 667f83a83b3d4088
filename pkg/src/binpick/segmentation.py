"""Plane removal and Euclidean cluster extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import Aabb, PointCloud

RANSAC_ITERATIONS = 200


@dataclass(frozen=True)
class ClusterParams:
    tolerance: float = 0.008
    min_size: int = 30
    max_size: Optional[int] = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("cluster tolerance must be positive")
        if self.min_size < 1 or (self.max_size is not None and self.max_size < self.min_size):
            raise ValidationError("need 1 <= min_size <= max_size")


@dataclass(frozen=True, eq=False)
class Segment:
    parent: PointCloud
    indices: np.ndarray
    segment_id: int
    clump: bool = False

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.intp).reshape(-1)
        if len(idx) == 0:
            raise ValidationError("segment must contain at least one point")
        if np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= len(self.parent):
            raise ValidationError("segment indices must be sorted, unique and in range")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def points(self) -> np.ndarray:
        return self.parent.points[self.indices]

    @property
    def cloud(self) -> PointCloud:
        return self.parent.subset(self.indices)

    @property
    def aabb(self) -> Aabb:
        pts = self.points
        return Aabb(pts.min(axis=0), pts.max(axis=0))

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def distance(self, points) -> np.ndarray:
        return np.abs(np.asarray(points) @ self.normal + self.offset)


def fit_plane(points: np.ndarray) -> Plane:
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    if n[2] < 0 or (n[2] == 0 and (n[1] < 0 or (n[1] == 0 and n[0] < 0))):
        n = -n
    return Plane(n, float(-n @ c))


def plane_inliers(
    cloud: PointCloud,
    inlier_tol: float,
    min_inlier_fraction: float,
    seed: int = 0,
    iterations: int = RANSAC_ITERATIONS,
) -> tuple[np.ndarray, Optional[Plane]]:
    """RANSAC plane search; returns the inlier mask (all False if no dominant plane)."""
    if not inlier_tol > 0:
        raise ValidationError("inlier_tol must be positive")
    pts = cloud.points
    n = len(pts)
    none = np.zeros(n, dtype=bool)
    if n < 3:
        return none, None
    rng = np.random.default_rng(seed)
    best_count, best_plane = -1, None
    for _ in range(iterations):
        a, b, c = pts[rng.choice(n, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        count = int(np.count_nonzero(np.abs((pts - a) @ normal) <= inlier_tol))
        if count > best_count:
            best_count, best_plane = count, Plane(normal, float(-normal @ a))
    if best_plane is None:
        return none, None
    mask = best_plane.distance(pts) <= inlier_tol
    # least-squares refit, then re-select so every removed point is within tol of the returned plane
    if mask.sum() >= 3:
        refit = fit_plane(pts[mask])
        remask = refit.distance(pts) <= inlier_tol
        if remask.sum() >= mask.sum():
            best_plane, mask = refit, remask
    if mask.sum() < min_inlier_fraction * n:
        return none, None
    return mask, best_plane


def remove_plane(
    cloud: PointCloud,
    inlier_tol: float = 0.002,
    min_inlier_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[PointCloud, Optional[Plane]]:
    """Strip the dominant plane from ``cloud`` if it holds enough of the points."""
    mask, plane = plane_inliers(cloud, inlier_tol, min_inlier_fraction, seed)
    if plane is None:
        return cloud, None
    return cloud.subset(np.nonzero(~mask)[0]), plane


def cluster_labels(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Connected-component label per point of the graph linking points within ``tolerance``."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(tolerance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def euclidean_cluster(
    cloud: PointCloud,
    params: ClusterParams = ClusterParams(),
    subset: Optional[np.ndarray] = None,
) -> list[Segment]:
    """Euclidean clusters of ``cloud`` (or of the points ``subset`` of it).

    Segments are sorted by descending size, ties by lowest point index, and
    numbered in that order. Indices always refer to ``cloud``.
    """
    idx = np.arange(len(cloud)) if subset is None else np.asarray(subset, dtype=np.intp)
    labels = cluster_labels(cloud.points[idx], params.tolerance)
    if len(labels) == 0:
        return []
    order = np.argsort(labels, kind="stable")
    groups = np.split(idx[order], np.nonzero(np.diff(labels[order]))[0] + 1)
    groups = [np.sort(g) for g in groups]
    groups = [g for g in groups if len(g) >= params.min_size and (params.max_size is None or len(g) <= params.max_size)]
    groups.sort(key=lambda g: (-len(g), g[0]))
    return [Segment(cloud, g, sid) for sid, g in enumerate(groups)]


def segment_scene(
    cloud: PointCloud,
    params: ClusterParams = ClusterParams(),
    inlier_tol: float = 0.002,
    min_inlier_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[list[Segment], Optional[Plane]]:
    """Plane removal followed by clustering; segments index into ``cloud`` itself."""
    mask, plane = plane_inliers(cloud, inlier_tol, min_inlier_fraction, seed)
    return euclidean_cluster(cloud, params, np.nonzero(~mask)[0]), plane


def classify_extents(
    extents, model_extents, tolerance: float, clump_factor: float = 2.5
) -> Optional[bool]:
    """Bounding-box gate on sorted extents.

    Returns False for a single-object match, True for a kept oversize clump and
    None for a rejected segment.
    """
    s = np.sort(np.asarray(extents, dtype=float))
    m = np.sort(np.asarray(model_extents, dtype=float))
    if np.all(s >= (1 - tolerance) * m) and np.all(s <= (1 + tolerance) * m):
        return False
    # smaller than the model: the longest side does not reach the model's middle side
    if s[-1] < (1 - tolerance) * m[1]:
        return None
    if np.all(s <= clump_factor * m[-1]):
        return True
    return None


def gate_by_bounding_box(
    segments: Sequence[Segment],
    model_aabb_extents,
    tolerance: float = 0.3,
    keep_clumps: bool = True,
    clump_factor: float = 2.5,
) -> list[Segment]:
    """Keep segments whose size is plausible for one object (or, optionally, a clump)."""
    if tolerance < 0:
        raise ValidationError("tolerance must be non-negative")
    out = []
    for seg in segments:
        verdict = classify_extents(seg.aabb.extents, model_aabb_extents, tolerance, clump_factor)
        if verdict is None or (verdict and not keep_clumps):
            continue
        out.append(Segment(seg.parent, seg.indices, seg.segment_id, clump=verdict))
    return out


def segments_to_json(segments: Sequence[Segment]) -> list[dict]:
    return [
        {
            "segment_id": s.segment_id,
            "indices": s.indices.tolist(),
            "aabb": {"min": s.aabb.min.tolist(), "max": s.aabb.max.tolist()},
            "clump": s.clump,
        }
        for s in segments
    ]


def segments_from_json(data: Sequence[dict], parent: PointCloud) -> list[Segment]:
    return [Segment(parent, d["indices"], int(d["segment_id"]), bool(d.get("clump", False))) for d in data]
