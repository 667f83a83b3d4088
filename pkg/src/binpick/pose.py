"""Two-stage 6-DoF pose estimation: view-template matching, then ICP refinement.

Offline, 42 partial views of the model are rendered from the vertices of a
once-subdivided icosahedron and described by a viewpoint feature histogram
and a camera-roll histogram. Online, a segment's viewpoint histogram ranks the
templates, the roll histogram recovers the in-plane rotation, and
point-to-point ICP against the full model sample cloud polishes each coarse
hypothesis. The hypothesis with the most inliers wins.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import io as bio
from .errors import DegenerateModel, NoCorrespondences, TooFewPoints, ValidationError
from .geometry import NnIndex, PointCloud, RigidTransform, estimate_normals, orthonormalize, voxel_downsample
from .raycast import closest_points_on_mesh, intersect
from .scene import ObjectModel
from .segmentation import Segment
from .viewplan import icosahedron_vertices

log = logging.getLogger(__name__)

N_TEMPLATES = 42
VP_BINS = 45
ROLL_BINS = 90
MIN_POINTS = 20
NORMAL_K = 10


def viewpoint_sphere() -> np.ndarray:
    """42 unit directions: icosahedron vertices plus normalised edge midpoints."""
    v = icosahedron_vertices()
    d = np.linalg.norm(v[:, None] - v[None], axis=2)
    edge_len = d[d > 1e-9].min()
    i, j = np.nonzero(np.triu(np.abs(d - edge_len) < 1e-9))
    mids = (v[i] + v[j]) / 2
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    out = np.vstack([v, mids])
    assert len(out) == N_TEMPLATES
    return out


def view_frame(view_dir) -> np.ndarray:
    """Right-handed basis with ``view_dir`` as third column.

    The first axis is world x projected off ``view_dir`` (world y when the two
    are nearly parallel); it is the zero of the roll angle.
    """
    v = np.asarray(view_dir, dtype=float)
    v = v / np.linalg.norm(v)
    ref = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = ref - (ref @ v) * v
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(v, x), v])


@dataclass(frozen=True, eq=False)
class ViewTemplate:
    template_id: int
    viewpoint_dir: np.ndarray
    partial_cloud: PointCloud
    vp_histogram: np.ndarray
    roll_histogram: np.ndarray
    canonical_pose: RigidTransform
    voxel: Optional[float] = None


@dataclass(frozen=True)
class CoarseMatch:
    template_id: int
    histogram_distance: float
    roll_angle: float
    init_pose: RigidTransform


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 60
    trans_eps: float = 1e-6
    max_correspondence_dist: float = 0.01
    outlier_dist: float = 0.005

    def __post_init__(self):
        if self.max_iterations < 1 or min(self.trans_eps, self.max_correspondence_dist, self.outlier_dist) <= 0:
            raise ValidationError("ICP parameters must be positive")


@dataclass(frozen=True)
class PoseEstimate:
    segment_id: int
    pose: RigidTransform
    fitness: int
    outliers: int
    rms_error: float
    provenance: str = "fresh"
    template_id: Optional[int] = None

    def as_reused(self) -> "PoseEstimate":
        return replace(self, provenance="reused")


def _ensure_normals(cloud: PointCloud, view_dir) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    return estimate_normals(cloud, NORMAL_K, view_dir=view_dir)


def _angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0))


def compute_vp_histogram(cloud: PointCloud, view_dir) -> np.ndarray:
    """Viewpoint feature histogram: four 45-bin blocks, L1-normalised as a whole.

    Per point: normal vs view direction, normal vs centroid-to-point direction,
    centroid distance over the largest centroid distance, and
    centroid-to-point direction vs view direction. ``view_dir`` points from the
    object towards the viewer; missing normals are estimated facing it.
    """
    if len(cloud) < MIN_POINTS:
        raise TooFewPoints(f"need {MIN_POINTS} points, got {len(cloud)}")
    v = np.asarray(view_dir, dtype=float)
    v = v / np.linalg.norm(v)
    cloud = _ensure_normals(cloud, v)
    pts, nrm = cloud.points, cloud.normals
    rel = pts - pts.mean(axis=0)
    dist = np.linalg.norm(rel, axis=1)
    dmax = dist.max()
    radial = np.divide(rel, dist[:, None], out=np.zeros_like(rel), where=dist[:, None] > 0)
    vv = np.broadcast_to(v, pts.shape)
    feats = [
        (_angle(nrm, vv), np.pi),
        (_angle(nrm, radial), np.pi),
        (dist / dmax if dmax > 0 else np.zeros_like(dist), 1.0),
        (_angle(radial, vv), np.pi),
    ]
    hist = np.concatenate(
        [np.bincount(np.minimum((f / top * VP_BINS).astype(int), VP_BINS - 1), minlength=VP_BINS) for f, top in feats]
    ).astype(float)
    return hist / hist.sum()


def compute_roll_histogram(cloud: PointCloud, view_dir) -> np.ndarray:
    """90-bin histogram of point angles about ``view_dir`` around the projected centroid."""
    if len(cloud) < MIN_POINTS:
        raise TooFewPoints(f"need {MIN_POINTS} points, got {len(cloud)}")
    B = view_frame(view_dir)
    q = (cloud.points - cloud.points.mean(axis=0)) @ B
    ang = np.mod(np.arctan2(q[:, 1], q[:, 0]), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * ROLL_BINS).astype(int), ROLL_BINS - 1)
    hist = np.bincount(bins, minlength=ROLL_BINS).astype(float)
    return hist / hist.sum()


def circular_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[s] = sum_k a[k] * b[k - s]``: how well ``a`` matches ``b`` shifted by ``s`` bins."""
    return np.array([a @ np.roll(b, s) for s in range(len(a))])


def roll_peaks(segment_hist: np.ndarray, template_hist: np.ndarray, count: int = 1) -> list[float]:
    """Best ``count`` rotations (radians, [0, 2pi)) taking the template roll histogram onto the segment's.

    Peaks are local maxima of the circular cross-correlation, strongest first,
    refined to sub-bin precision by a parabola through the neighbours.
    """
    c = circular_correlation(segment_hist, template_hist)
    n = len(c)
    left, right = np.roll(c, 1), np.roll(c, -1)
    is_peak = (c >= left) & (c >= right)
    order = [int(i) for i in np.argsort(-c, kind="stable") if is_peak[i]]
    out = []
    for s in order[:count]:
        l, m, r = c[(s - 1) % n], c[s], c[(s + 1) % n]
        denom = l - 2 * m + r
        off = 0.5 * (l - r) / denom if denom < 0 else 0.0
        out.append(float(np.mod((s + off) * 2 * np.pi / n, 2 * np.pi)))
    return out


def recover_roll(segment_hist: np.ndarray, template_hist: np.ndarray) -> float:
    """Rotation (radians, [0, 2pi)) taking the template's roll histogram onto the segment's."""
    return roll_peaks(segment_hist, template_hist, 1)[0]


def render_partial_view(model: ObjectModel, view_dir, resolution: float = 0.0008) -> PointCloud:
    """Model-frame surface points hit by parallel rays arriving from ``view_dir``."""
    B = view_frame(view_dir)
    v = B[:, 2]
    verts = model.vertices
    center = (verts.max(axis=0) + verts.min(axis=0)) / 2
    radius = np.linalg.norm(verts - center, axis=1).max()
    n = int(np.ceil(2 * radius / resolution)) + 1
    g = (np.arange(n) - (n - 1) / 2) * resolution
    gx, gy = np.meshgrid(g, g, indexing="ij")
    origins = center + 2 * radius * v + gx.reshape(-1, 1) * B[:, 0] + gy.reshape(-1, 1) * B[:, 1]
    dirs = np.broadcast_to(-v, origins.shape)
    t, _ = intersect(origins, np.ascontiguousarray(dirs), model.triangles)
    hit = np.isfinite(t)
    return PointCloud(origins[hit] + t[hit, None] * dirs[hit], frame="model")


def generate_view_templates(
    model: ObjectModel,
    resolution: float = 0.0008,
    voxel: Optional[float] = 0.004,
) -> list[ViewTemplate]:
    """Render and describe the 42 partial views of ``model``.

    ``voxel`` downsamples each view before description so that templates share
    the point density of voxelised captures; ``None`` keeps the raw rendering.
    """
    out = []
    for tid, v in enumerate(viewpoint_sphere()):
        partial = render_partial_view(model, v, resolution)
        if voxel:
            partial = voxel_downsample(partial, voxel)
        if len(partial) < MIN_POINTS:
            raise DegenerateModel(f"view {tid} of {model.model_id} has only {len(partial)} points")
        partial = estimate_normals(partial, NORMAL_K, view_dir=v)
        Rc = view_frame(v).T
        canonical = RigidTransform(Rc, -Rc @ partial.points.mean(axis=0))
        out.append(
            ViewTemplate(
                tid,
                v,
                partial,
                compute_vp_histogram(partial, v),
                compute_roll_histogram(partial, v),
                canonical,
                voxel,
            )
        )
    return out


def _segment_cloud(segment: Union[Segment, PointCloud]) -> PointCloud:
    return segment.cloud if isinstance(segment, Segment) else segment


def coarse_match(
    segment: Union[Segment, PointCloud],
    templates: Sequence[ViewTemplate],
    sensor_pose: RigidTransform,
    k: int = 5,
    rolls: int = 1,
) -> list[CoarseMatch]:
    """Rank templates by viewpoint-histogram L1 distance and build initial poses.

    Returns ``k`` matches in ascending distance order; with ``rolls > 1`` each
    template contributes up to that many roll hypotheses (strongest first).
    The segment is voxelised like the templates before it is described.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    cloud = _segment_cloud(segment)
    if len(cloud) < MIN_POINTS:
        raise TooFewPoints(f"need {MIN_POINTS} points, got {len(cloud)}")
    voxel = templates[0].voxel if templates else None
    if voxel:
        cloud = voxel_downsample(PointCloud(cloud.points, frame=cloud.frame), voxel)
        if len(cloud) < MIN_POINTS:
            raise TooFewPoints(f"need {MIN_POINTS} points after voxelisation, got {len(cloud)}")
    centroid = cloud.points.mean(axis=0)
    u = sensor_pose.translation - centroid
    u /= np.linalg.norm(u)
    cloud = estimate_normals(PointCloud(cloud.points, frame=cloud.frame), NORMAL_K, toward=sensor_pose.translation)
    vp = compute_vp_histogram(cloud, u)
    roll = compute_roll_histogram(cloud, u)
    dists = np.array([np.abs(vp - t.vp_histogram).sum() for t in templates])
    order = sorted(range(len(templates)), key=lambda i: (dists[i], templates[i].template_id))[:k]
    B = view_frame(u)
    out = []
    for i in order:
        tpl = templates[i]
        for theta in roll_peaks(roll, tpl.roll_histogram, rolls):
            c, s = np.cos(theta), np.sin(theta)
            Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            R = orthonormalize(B @ Rz @ tpl.canonical_pose.rotation)
            t = centroid + B @ Rz @ tpl.canonical_pose.translation
            out.append(CoarseMatch(tpl.template_id, float(dists[i]), theta, RigidTransform(R, t)))
    return out


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` onto ``dst`` (SVD of the cross-covariance)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def _as_index(model_cloud) -> NnIndex:
    if isinstance(model_cloud, NnIndex):
        return model_cloud
    if isinstance(model_cloud, ObjectModel):
        return model_cloud.index
    return NnIndex(model_cloud.points)


def pose_residuals(segment_points: np.ndarray, index: NnIndex, pose: RigidTransform) -> np.ndarray:
    """Distance from each segment point to the nearest posed model point."""
    _, d = index.query(pose.inverse().apply(segment_points))
    return d


def _score(pts, index, pose, params, segment_id, template_id=None) -> PoseEstimate:
    d = pose_residuals(pts, index, pose)
    inl = d <= params.outlier_dist
    fitness = int(inl.sum())
    sel = d[inl] if fitness else d
    rms = float(np.sqrt(np.mean(sel**2))) if len(sel) else 0.0
    return PoseEstimate(segment_id, pose, fitness, len(pts) - fitness, rms, "fresh", template_id)


def icp_refine(
    segment_cloud: Union[PointCloud, Segment],
    model_cloud: Union[PointCloud, NnIndex, ObjectModel],
    init: RigidTransform,
    params: IcpParams = IcpParams(),
    segment_id: int = -1,
    trace: Optional[list] = None,
) -> PoseEstimate:
    """Point-to-point ICP of the model (model frame) onto the segment (world frame).

    ``trace``, if given, receives the correspondence RMS of every iteration.
    """
    pts = _segment_cloud(segment_cloud).points
    index = _as_index(model_cloud)
    if len(pts) == 0 or len(index) == 0:
        raise ValidationError("ICP needs non-empty clouds")
    model_pts = index.points
    radius = float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).max())
    pose = init
    for it in range(params.max_iterations):
        ids, d = index.query(pose.inverse().apply(pts))
        mask = d <= params.max_correspondence_dist
        if it == 0 and not mask.any():
            raise NoCorrespondences("no correspondences within max_correspondence_dist at the initial pose")
        if trace is not None:
            trace.append(float(np.sqrt(np.mean(d[mask] ** 2))) if mask.any() else float("inf"))
        if mask.sum() < 3:
            break
        new = kabsch(model_pts[ids[mask]], pts[mask])
        change = np.linalg.norm(new.translation - pose.translation) + pose.rotation_angle_to(new) * radius
        pose = new
        if change < params.trans_eps:
            break
    return _score(pts, index, pose, params, segment_id)


def _plane_step(p, q, n, point_weight):
    """Linearised rigid update (rotation vector, translation) about the origin.

    Point-to-plane rows for the pairs ``(p, q)`` with normals ``n``, plus the
    same pairs as point-to-point rows weighted by ``point_weight``.
    """
    A = np.hstack([np.cross(q, n), n])
    b = np.einsum("ij,ij->i", p - q, n)
    rows, rhs = [A], [b]
    if point_weight > 0:
        w = np.sqrt(point_weight)
        # rows of  omega x q + tau = p - q
        Q = np.zeros((len(q), 3, 6))
        Q[:, 0, 1], Q[:, 0, 2] = q[:, 2], -q[:, 1]
        Q[:, 1, 0], Q[:, 1, 2] = -q[:, 2], q[:, 0]
        Q[:, 2, 0], Q[:, 2, 1] = q[:, 1], -q[:, 0]
        Q[:, :, 3:] = np.eye(3)
        rows.append(w * Q.reshape(-1, 6))
        rhs.append(w * (p - q).reshape(-1))
    x, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return x[:3], x[3:]


def visible_model_points(
    pose: RigidTransform, model: ObjectModel, sensor_position, max_points: int = 2000
) -> np.ndarray:
    """World positions of (a regular subset of) model samples in line of sight of the sensor."""
    samples = model.sample_cloud.points
    step = max(1, len(samples) // max_points)
    world = pose.apply(samples[::step])
    s = np.asarray(sensor_position, dtype=float)
    dirs = world - s
    tris = pose.apply(model.triangles.reshape(-1, 3)).reshape(-1, 3, 3)
    t, _ = intersect(np.broadcast_to(s, dirs.shape).copy(), dirs, tris)
    return world[t >= 1.0 - 1e-6]


def unexplained_surface(
    pose: RigidTransform,
    model: ObjectModel,
    segment_points: np.ndarray,
    sensor_position,
    gate: float,
) -> int:
    """Model samples the sensor should see at ``pose`` with no segment point within ``gate``.

    A wrong hypothesis that tucks a small visible patch inside a larger model
    face leaves much of that face unexplained; the true pose leaves little.
    """
    vis = visible_model_points(pose, model, sensor_position)
    if len(vis) == 0:
        return 0
    _, d = NnIndex(segment_points).query(vis)
    return int(np.count_nonzero(d > gate))


MESH_REFINE_MAX_FACES = 500


def icp_mesh_refine(
    segment_cloud: Union[PointCloud, Segment],
    model: ObjectModel,
    init: RigidTransform,
    params: IcpParams = IcpParams(),
    segment_id: int = -1,
    point_weight: float = 0.001,
) -> PoseEstimate:
    """Point-to-plane polish against the exact model surface.

    Correspondences are true closest points on the mesh triangles, so the
    result carries none of the slack of a sampled surface. A lightly weighted
    point-to-point term keeps directions the planes leave free (sliding
    within a single visible face) from drifting. Cost grows with points
    times faces, so this is meant for small meshes.
    """
    pts = _segment_cloud(segment_cloud).points
    tris = model.triangles
    e = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    lengths = np.linalg.norm(e, axis=1, keepdims=True)
    face_normals = np.divide(e, lengths, out=np.zeros_like(e), where=lengths > 0)
    c = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - c, axis=1).max())
    pose = init
    for _ in range(params.max_iterations):
        closest, tri, d = closest_points_on_mesh(pose.inverse().apply(pts), tris)
        mask = d <= params.max_correspondence_dist
        if mask.sum() < 6:
            break
        p = pts[mask] - c
        q = pose.apply(closest[mask]) - c
        n = face_normals[tri[mask]] @ pose.rotation.T
        omega, tau = _plane_step(p, q, n, point_weight)
        dR = RigidTransform.from_rotvec(omega).rotation
        step = RigidTransform(dR, c + tau - dR @ c)
        new = RigidTransform(orthonormalize(dR @ pose.rotation), step.apply(pose.translation))
        change = np.linalg.norm(new.translation - pose.translation) + pose.rotation_angle_to(new) * radius
        pose = new
        if change < params.trans_eps:
            break
    return _score(pts, model.index, pose, params, segment_id)


def _selection_key(est: PoseEstimate, unexplained: int, order: int):
    return (-est.fitness, est.outliers, unexplained, est.rms_error, order)


def detect_segment(
    segment: Union[Segment, PointCloud],
    templates: Sequence[ViewTemplate],
    model: ObjectModel,
    sensor_pose: RigidTransform,
    params: IcpParams = IcpParams(),
    k: int = 5,
    accept_min_fitness: float = 0.5,
    coarse_factor: float = 2.0,
    rolls: int = 2,
    polish: bool = True,
) -> Optional[PoseEstimate]:
    """Best refined pose for one segment, or ``None`` if nothing fits well enough.

    Each coarse hypothesis (``k`` templates times ``rolls`` roll peaks) is
    refined by a wide ICP pass (correspondence gate scaled by
    ``coarse_factor``) followed by a pass at ``params``. Selection: most
    inliers, then fewest outliers, then least unexplained visible model
    surface, then lowest RMS. The winner is finally polished against the
    mesh itself when ``polish`` is set and the mesh is small.
    """
    full = _segment_cloud(segment)
    sid = segment.segment_id if isinstance(segment, Segment) else -1
    voxel = templates[0].voxel if templates else None
    # hypotheses are ranked on a cloud thinned like the templates; the winner is polished on all points
    cloud = voxel_downsample(PointCloud(full.points, frame=full.frame), voxel) if voxel else full
    try:
        matches = coarse_match(cloud, templates, sensor_pose, k, rolls)
    except TooFewPoints:
        return None
    wide = replace(params, max_correspondence_dist=params.max_correspondence_dist * coarse_factor)
    refined = []
    for order, m in enumerate(matches):
        try:
            est = icp_refine(cloud, model, m.init_pose, wide, sid)
            est = icp_refine(cloud, model, est.pose, params, sid)
        except NoCorrespondences:
            continue
        refined.append((order, replace(est, template_id=m.template_id)))
    if not refined:
        return None
    top = min((-e.fitness, e.outliers) for _, e in refined)
    results = []
    for order, est in refined:
        # the visibility check only matters among hypotheses tied on the inlier counts
        extra = (
            unexplained_surface(est.pose, model, cloud.points, sensor_pose.translation, params.outlier_dist)
            if (-est.fitness, est.outliers) == top
            else 0
        )
        results.append((_selection_key(est, extra, order), est))
    best = min(results, key=lambda r: r[0])[1]
    tid = best.template_id
    if polish and len(model.faces) <= MESH_REFINE_MAX_FACES:
        best = icp_mesh_refine(full, model, best.pose, params, sid)
    elif len(full) != len(cloud):
        best = icp_refine(full, model, best.pose, params, sid)
    best = replace(best, template_id=tid)
    if best.fitness < accept_min_fitness * len(full):
        return None
    return best


def detect_all(
    segments: Sequence[Segment],
    templates: Sequence[ViewTemplate],
    model: ObjectModel,
    sensor_pose: RigidTransform,
    params: IcpParams = IcpParams(),
    k: int = 5,
    accept_min_fitness: float = 0.5,
    workers: int = 1,
) -> list[tuple[int, Optional[PoseEstimate]]]:
    """``detect_segment`` over many segments, optionally on a thread pool.

    The output is ordered by segment id and independent of ``workers``.
    """
    def run(seg):
        return seg.segment_id, detect_segment(seg, templates, model, sensor_pose, params, k, accept_min_fitness)

    model.index  # build the shared index before fanning out
    if workers <= 1 or len(segments) <= 1:
        results = [run(s) for s in segments]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, segments))
    return sorted(results, key=lambda r: r[0])


def symmetric_pose_error(model: ObjectModel, estimate: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(rotation degrees, translation meters) of ``estimate`` against ``truth``, minimised over model symmetries.

    A symmetry ``S`` maps the model onto itself, so ``truth`` and ``truth * S``
    describe the same physical placement; the translation error is measured
    at the model's bounding-box centre, which every symmetry keeps fixed.
    """
    lo, hi = model.vertices.min(axis=0), model.vertices.max(axis=0)
    center = (lo + hi) / 2
    trans = float(np.linalg.norm(estimate.apply(center) - truth.apply(center)))
    rot = min(
        float(np.degrees(np.arccos(np.clip((np.trace(estimate.rotation.T @ truth.rotation @ S) - 1) / 2, -1.0, 1.0))))
        for S in model.symmetries
    )
    return rot, trans


def estimate_to_json(est: PoseEstimate) -> dict:
    return {
        "segment_id": est.segment_id,
        **bio.transform_to_json(est.pose),
        "fitness": est.fitness,
        "outliers": est.outliers,
        "rms_error": est.rms_error,
        "provenance": est.provenance,
        "template_id": est.template_id,
    }


def estimate_from_json(d: dict) -> PoseEstimate:
    return PoseEstimate(
        int(d["segment_id"]),
        bio.transform_from_json(d),
        int(d["fitness"]),
        int(d["outliers"]),
        float(d["rms_error"]),
        d.get("provenance", "fresh"),
        d.get("template_id"),
    )


MANIFEST = "manifest.json"


def save_templates(
    directory, templates: Sequence[ViewTemplate], model: ObjectModel, settings: Optional[dict] = None
) -> None:
    """One PLY per partial view plus a JSON manifest keyed by the model hash and generation settings."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in templates:
        name = f"view_{t.template_id:02d}.ply"
        bio.write_ply(d / name, t.partial_cloud)
        entries.append(
            {
                "template_id": t.template_id,
                "file": name,
                "viewpoint_dir": t.viewpoint_dir.tolist(),
                "vp_histogram": t.vp_histogram.tolist(),
                "roll_histogram": t.roll_histogram.tolist(),
                "canonical_pose": bio.transform_to_json(t.canonical_pose),
                "canonical_matrix": t.canonical_pose.matrix().tolist(),
                "voxel": t.voxel,
            }
        )
    manifest = {
        "model_id": model.model_id,
        "model_hash": model.content_hash,
        "settings": settings or {},
        "templates": entries,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))


def load_templates(
    directory, model: Optional[ObjectModel] = None, settings: Optional[dict] = None
) -> Optional[list[ViewTemplate]]:
    """Templates stored in ``directory``; ``None`` if missing or built for another model or settings."""
    path = Path(directory) / MANIFEST
    if not path.exists():
        return None
    manifest = json.loads(path.read_text())
    if model is not None and manifest.get("model_hash") != model.content_hash:
        return None
    if settings is not None and manifest.get("settings") != settings:
        return None
    out = []
    for e in manifest["templates"]:
        out.append(
            ViewTemplate(
                int(e["template_id"]),
                np.asarray(e["viewpoint_dir"]),
                bio.read_ply(Path(directory) / e["file"]),
                np.asarray(e["vp_histogram"]),
                np.asarray(e["roll_histogram"]),
                RigidTransform.from_matrix(np.asarray(e["canonical_matrix"])),
                e.get("voxel"),
            )
        )
    return out


def load_or_generate_templates(directory, model: ObjectModel, **kwargs) -> list[ViewTemplate]:
    """Use a cached template set when its hash matches ``model``; regenerate otherwise."""
    settings = {"resolution": kwargs.get("resolution", 0.0008), "voxel": kwargs.get("voxel", 0.004)}
    if directory is not None:
        cached = load_templates(directory, model, settings)
        if cached is not None:
            return cached
    templates = generate_view_templates(model, **kwargs)
    if directory is not None:
        save_templates(directory, templates, model, settings)
    return templates
