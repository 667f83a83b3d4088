"""Next-best-view selection over an occupancy grid of the storage box.

Candidate sensor poses sit on the face normals of a regular polyhedron centred
on the box-bottom centre, at several stand-off distances. First-trial poses
are scored by how many bottom cells they see past the box walls; later poses
by how many previously occluded cells they would see.

Occlusion is decided by marching the ray from the sensor towards a cell centre
in fixed steps (default ``cell_size / 10``) and checking the cell hit by each
sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyCandidates,
    FrameMismatch,
    GridUnmarked,
    NoFeasibleCandidate,
    NonPositiveParam,
    ValidationError,
)
from .geometry import Aabb, PointCloud, RigidTransform, look_at
from .scene import SensorIntrinsics

PHI = (1 + 5**0.5) / 2


class CellState(IntEnum):
    FREE = 0
    OCCUPIED = 1
    OCCLUDED = 2
    UNKNOWN = 3


def polyhedron_face_normals(n_faces: int) -> np.ndarray:
    """Unit outward face normals of the regular polyhedron with ``n_faces`` faces."""
    if n_faces == 4:
        v = -np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    elif n_faces == 6:
        v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    elif n_faces == 8:
        v = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
    elif n_faces == 12:
        # dodecahedron face normals = icosahedron vertices
        v = icosahedron_vertices()
    elif n_faces == 20:
        # icosahedron face normals = dodecahedron vertices
        ip = 1 / PHI
        v = [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
        for a in (1, -1):
            for b in (1, -1):
                v += [[0, a * ip, b * PHI], [a * ip, b * PHI, 0], [a * PHI, 0, b * ip]]
        v = np.array(v, dtype=float)
    else:
        raise ValidationError(f"n_faces must be one of 4, 6, 8, 12, 20 (got {n_faces})")
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def icosahedron_vertices() -> np.ndarray:
    v = []
    for a in (1, -1):
        for b in (1, -1):
            v += [[0, a, b * PHI], [a, b * PHI, 0], [a * PHI, 0, b]]
    v = np.array(v, dtype=float)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class ViewPlanParams:
    n_faces: int = 20
    distances: tuple = (0.45, 0.60, 0.75)
    cell_size: float = 0.01

    def __post_init__(self):
        if self.n_faces not in (4, 6, 8, 12, 20):
            raise ValidationError("n_faces must be one of 4, 6, 8, 12, 20")
        d = np.asarray(self.distances, dtype=float)
        if len(d) == 0 or np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ValidationError("distances must be positive and strictly increasing")
        if not self.cell_size > 0:
            raise ValidationError("cell_size must be positive")
        object.__setattr__(self, "distances", tuple(float(x) for x in d))


@dataclass(frozen=True)
class SensorPoseCandidate:
    pose: RigidTransform
    face_index: int
    distance_index: int

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation


def candidate_poses(box: Aabb, params: ViewPlanParams) -> list[SensorPoseCandidate]:
    center = box.bottom_center
    out = []
    for fi, n in enumerate(polyhedron_face_normals(params.n_faces)):
        for di, dist in enumerate(params.distances):
            out.append(SensorPoseCandidate(look_at(center + dist * n, center), fi, di))
    return out


@dataclass(frozen=True)
class FeasibilityPredicate:
    """Three independent checks on a sensor pose; all must hold."""

    above_bottom: Callable[[RigidTransform], bool]
    reachable: Callable[[RigidTransform], bool] = lambda pose: True
    collision_free: Callable[[RigidTransform], bool] = lambda pose: True

    def __call__(self, pose: RigidTransform) -> bool:
        return bool(self.above_bottom(pose) and self.reachable(pose) and self.collision_free(pose))


def always_feasible() -> FeasibilityPredicate:
    return FeasibilityPredicate(lambda pose: True)


def default_feasibility(
    box: Aabb,
    base=None,
    reach: float = 1.1,
    sensor_half: float = 0.04,
    wall_thickness: float = 0.01,
) -> FeasibilityPredicate:
    """Geometric stand-ins: height above the floor, a workspace sphere, wall clearance."""
    base = box.bottom_center + np.array([-0.45, 0.0, 0.25]) if base is None else np.asarray(base, float)
    w = wall_thickness
    lo, hi = box.min, box.max
    walls = [
        Aabb([lo[0] - w, lo[1] - w, lo[2] - w], [lo[0], hi[1] + w, hi[2]]),
        Aabb([hi[0], lo[1] - w, lo[2] - w], [hi[0] + w, hi[1] + w, hi[2]]),
        Aabb([lo[0] - w, lo[1] - w, lo[2] - w], [hi[0] + w, lo[1], hi[2]]),
        Aabb([lo[0] - w, hi[1], lo[2] - w], [hi[0] + w, hi[1] + w, hi[2]]),
        Aabb([lo[0] - w, lo[1] - w, lo[2] - w], [hi[0] + w, hi[1] + w, lo[2]]),
    ]

    def above_bottom(pose):
        return pose.translation[2] >= box.min[2]

    def reachable(pose):
        return np.linalg.norm(pose.translation - base) <= reach

    def collision_free(pose):
        body = Aabb(pose.translation - sensor_half, pose.translation + sensor_half)
        return not any(body.intersects(wall) for wall in walls)

    return FeasibilityPredicate(above_bottom, reachable, collision_free)


def filter_feasible(cands: Sequence[SensorPoseCandidate], pred: FeasibilityPredicate) -> list[SensorPoseCandidate]:
    out = [c for c in cands if pred(c.pose)]
    if not out:
        raise NoFeasibleCandidate("no candidate pose satisfies the feasibility conditions")
    return out


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    origin: np.ndarray
    cell_size: float
    states: np.ndarray  # int8, shape (nx, ny, nz)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.array(self.origin, dtype=float).reshape(3))
        st = np.array(self.states, dtype=np.int8)
        if st.ndim != 3 or min(st.shape) < 1:
            raise ValidationError("grid needs at least one cell per axis")
        st.setflags(write=False)
        object.__setattr__(self, "states", st)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.states.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell_size * np.asarray(self.dims)

    def centers(self) -> np.ndarray:
        """Cell centres in C order of ``states`` (z fastest)."""
        i, j, k = np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij")
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.origin + (ijk + 0.5) * self.cell_size

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Integer cell coordinates of each point and whether it lies inside the grid."""
        ijk = np.floor((np.asarray(points, float) - self.origin) / self.cell_size).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=-1)
        return ijk, inside

    def count(self, state: CellState) -> int:
        return int(np.count_nonzero(self.states == state))

    def with_states(self, states) -> "OccupancyGrid":
        return OccupancyGrid(self.origin, self.cell_size, states)

    def translated(self, offset) -> "OccupancyGrid":
        return OccupancyGrid(self.origin + offset, self.cell_size, self.states)


def build_grid(box: Aabb, cell_size: float, height: float) -> OccupancyGrid:
    """Cells covering the box footprint from the floor up to ``height``.

    Footprint extents that are not a multiple of ``cell_size`` round up, and the
    grid overhangs the box equally on both sides.
    """
    if not (cell_size > 0 and height > 0):
        raise NonPositiveParam("cell_size and height must be positive")
    ext = np.array([box.extents[0], box.extents[1], height])
    dims = np.maximum(1, np.ceil(ext / cell_size - 1e-9).astype(int))
    origin = np.array(
        [
            box.center[0] - dims[0] * cell_size / 2,
            box.center[1] - dims[1] * cell_size / 2,
            box.min[2],
        ]
    )
    return OccupancyGrid(origin, cell_size, np.full(tuple(dims), CellState.UNKNOWN, dtype=np.int8))


def _slab_interval(o, u, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / u
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    return np.minimum(t1, t2).max(axis=1), np.maximum(t1, t2).min(axis=1)


def rays_blocked(
    grid: OccupancyGrid,
    sensor_origin,
    targets: np.ndarray,
    occupied: np.ndarray,
    step: Optional[float] = None,
    chunk_samples: int = 2_000_000,
) -> np.ndarray:
    """For each target point, whether the sampled ray from the sensor hits an occupied cell.

    Samples lie at ``o + k * step * u`` for ``k >= 1`` and stop before the
    target; samples falling in the target's own cell are ignored.
    """
    step = grid.cell_size / 10 if step is None else step
    o = np.asarray(sensor_origin, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    n = len(targets)
    blocked = np.zeros(n, dtype=bool)
    if n == 0 or not occupied.any():
        return blocked
    d = targets - o
    L = np.sqrt(np.einsum("ij,ij->i", d, d))
    u = d / L[:, None]
    t_in, t_out = _slab_interval(o[None, :], u, grid.origin, grid.upper)
    k_lo = np.maximum(1, np.ceil(t_in / step)).astype(np.int64)
    k_hi = np.minimum(np.ceil(L / step) - 1, np.floor(t_out / step)).astype(np.int64)
    tgt_ijk, _ = grid.cell_index(targets)
    dims = np.asarray(grid.dims)
    occ_flat = occupied.reshape(-1)
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    tgt_flat = tgt_ijk @ strides
    todo = np.nonzero(k_hi >= k_lo)[0]
    if len(todo) == 0:
        return blocked
    # group rays of similar sample count to limit padding
    todo = todo[np.argsort(k_hi[todo] - k_lo[todo], kind="stable")]
    spans = k_hi[todo] - k_lo[todo] + 1
    rows = max(1, chunk_samples // int(spans[-1]))
    pos = 0
    while pos < len(todo):
        sel = todo[pos : pos + rows]
        K = int((k_hi[sel] - k_lo[sel]).max() + 1)
        ks = k_lo[sel, None] + np.arange(K)[None, :]
        valid = ks <= k_hi[sel, None]
        t = ks * step
        p = o + t[..., None] * u[sel, None, :]
        ijk = np.floor((p - grid.origin) / grid.cell_size).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < dims), axis=-1) & valid
        flat = np.where(inside, ijk @ strides, 0)
        hit = inside & occ_flat[flat] & (flat != tgt_flat[sel, None])
        blocked[sel] = hit.any(axis=1)
        pos += len(sel)
    return blocked


def mark_cells(
    grid: OccupancyGrid,
    cloud: PointCloud,
    sensor: RigidTransform,
    intrinsics: SensorIntrinsics = SensorIntrinsics(),
    min_points_per_cell: int = 3,
    step: Optional[float] = None,
) -> OccupancyGrid:
    """New grid with occupied / occluded / free marks from one capture.

    Cells holding at least ``min_points_per_cell`` points become occupied. Any
    other cell whose sensor ray crosses an occupied cell becomes occluded; an
    unobstructed cell inside the sensor frustum becomes free. Cells with no
    verdict keep their previous state.
    """
    if cloud.frame != "world":
        raise FrameMismatch(f"cloud must be in the world frame, got {cloud.frame!r}")
    dims = grid.dims
    counts = np.zeros(dims, dtype=np.int64)
    if len(cloud):
        ijk, inside = grid.cell_index(cloud.points)
        ijk = ijk[inside]
        np.add.at(counts, (ijk[:, 0], ijk[:, 1], ijk[:, 2]), 1)
    occupied = counts >= min_points_per_cell
    centers = grid.centers()
    blocked = rays_blocked(grid, sensor.translation, centers, occupied, step).reshape(dims)
    visible = intrinsics.in_frustum(sensor, centers).reshape(dims)
    states = grid.states.copy()
    states[~occupied & ~blocked & visible] = CellState.FREE
    states[~occupied & blocked] = CellState.OCCLUDED
    states[occupied] = CellState.OCCUPIED
    return grid.with_states(states)


def walls_block(box: Aabb, origin, targets) -> np.ndarray:
    """Whether the segment from ``origin`` to each target crosses a side wall of ``box``.

    Walls are the four vertical faces of the box from floor to rim.
    """
    o = np.asarray(origin, dtype=float)
    c = np.asarray(targets, dtype=float).reshape(-1, 3)
    blocked = np.zeros(len(c), dtype=bool)
    for axis in (0, 1):
        other = 1 - axis
        for plane in (box.min[axis], box.max[axis]):
            so = o[axis] - plane
            sc = c[:, axis] - plane
            crosses = (so * sc) < 0
            with np.errstate(divide="ignore", invalid="ignore"):
                s = so / (so - sc)
            p = o + s[:, None] * (c - o)
            on_wall = (
                (p[:, 2] >= box.min[2])
                & (p[:, 2] <= box.max[2])
                & (p[:, other] >= box.min[other])
                & (p[:, other] <= box.max[other])
            )
            blocked |= crosses & on_wall
    return blocked


def bottom_cell_centers(grid: OccupancyGrid) -> np.ndarray:
    nx, ny, _ = grid.dims
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ijk = np.stack([i.ravel(), j.ravel(), np.zeros(i.size)], axis=1)
    return grid.origin + (ijk + 0.5) * grid.cell_size


def score_first_trial(
    cand: SensorPoseCandidate,
    grid: OccupancyGrid,
    box: Aabb,
    intrinsics: SensorIntrinsics = SensorIntrinsics(),
) -> int:
    """Number of bottom-layer cells the candidate sees past the box walls."""
    centers = bottom_cell_centers(grid)
    vis = intrinsics.in_frustum(cand.pose, centers) & ~walls_block(box, cand.position, centers)
    return int(np.count_nonzero(vis))


def score_next_trial(
    cand: SensorPoseCandidate,
    grid: OccupancyGrid,
    intrinsics: SensorIntrinsics = SensorIntrinsics(),
    box: Optional[Aabb] = None,
    step: Optional[float] = None,
) -> int:
    """Number of occluded cells that would be visible from the candidate.

    With ``box`` given the side walls block rays as well as occupied cells.
    """
    occupied = grid.states == CellState.OCCUPIED
    occluded = grid.states == CellState.OCCLUDED
    if not occupied.any() and not occluded.any():
        raise GridUnmarked("grid carries no occupied or occluded cells")
    centers = grid.centers()[occluded.reshape(-1)]
    if len(centers) == 0:
        return 0
    vis = intrinsics.in_frustum(cand.pose, centers)
    if box is not None:
        vis &= ~walls_block(box, cand.position, centers)
    idx = np.nonzero(vis)[0]
    if len(idx):
        vis[idx] = ~rays_blocked(grid, cand.position, centers[idx], occupied, step)
    return int(np.count_nonzero(vis))


def select_pose(
    cands: Sequence[SensorPoseCandidate],
    grid: Optional[OccupancyGrid],
    box: Aabb,
    intrinsics: SensorIntrinsics = SensorIntrinsics(),
    cell_size: float = 0.01,
    height: Optional[float] = None,
    walls: bool = True,
) -> tuple[SensorPoseCandidate, list[int]]:
    """Pick the best-scoring candidate; returns it with every candidate's score.

    ``grid=None`` means first trial (bottom visibility); otherwise later-trial
    scoring on the marked grid. Ties go to the smaller distance index, then
    the smaller face index.
    """
    if not cands:
        raise EmptyCandidates("no candidates to choose from")
    if grid is None:
        geom = build_grid(box, cell_size, height or box.extents[2])
        scores = [score_first_trial(c, geom, box, intrinsics) for c in cands]
    else:
        wall_box = box if walls else None
        scores = [score_next_trial(c, grid, intrinsics, wall_box) for c in cands]
    best = min(range(len(cands)), key=lambda i: (-scores[i], cands[i].distance_index, cands[i].face_index))
    return cands[best], scores


def grid_to_json(grid: OccupancyGrid) -> dict:
    flat = grid.states.reshape(-1)
    runs = []
    if len(flat):
        change = np.nonzero(np.diff(flat))[0] + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(flat)]])
        runs = [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]
    return {
        "dims": list(grid.dims),
        "origin": grid.origin.tolist(),
        "cell_size": grid.cell_size,
        "order": "C (z fastest)",
        "states": {s.name.lower(): int(s) for s in CellState},
        "rle": runs,
    }


def grid_from_json(data: dict) -> OccupancyGrid:
    flat = np.concatenate([np.full(n, s, dtype=np.int8) for s, n in data["rle"]])
    return OccupancyGrid(data["origin"], float(data["cell_size"]), flat.reshape(data["dims"]))


def grid_cells_cloud(grid: OccupancyGrid) -> tuple[PointCloud, np.ndarray]:
    """Centres of occupied and occluded cells with their state codes, for PLY export."""
    flat = grid.states.reshape(-1)
    keep = (flat == CellState.OCCUPIED) | (flat == CellState.OCCLUDED)
    return PointCloud(grid.centers()[keep]), flat[keep].astype(np.uint8)
