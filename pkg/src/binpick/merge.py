"""Carry unchanged segments of the previous capture into the current one.

Every current point votes for the segment of its nearest previous point, as
"near" or "far" depending on the distance. Previous segments that collected
few far votes per near vote (or no votes at all, because they are hidden from
the new viewpoint) are appended to the current cloud. After re-segmentation,
each merged segment either inherits a previous pose estimate or is queued for
detection.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NoPreviousSegments, ValidationError
from .geometry import ORIGIN_CARRIED, ORIGIN_CURRENT, NnIndex, PointCloud, concatenate
from .pose import IcpParams, PoseEstimate, ViewTemplate, detect_all, estimate_to_json
from .scene import ObjectModel
from .segmentation import ClusterParams, Plane, Segment, gate_by_bounding_box, segment_scene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MergeParams:
    min_distance: float = 0.005
    ratio_threshold: float = 0.5
    reuse_distance: float = 0.01

    def __post_init__(self):
        if min(self.min_distance, self.ratio_threshold, self.reuse_distance) <= 0:
            raise ValidationError("merge parameters must be positive")


@dataclass(frozen=True)
class SegmentVotes:
    segment_id: int
    near_count: int
    far_count: int
    merged: bool

    @property
    def ratio(self) -> float:
        """far / near; ``inf`` for far-only and ``nan`` for a segment with no votes."""
        if self.near_count:
            return self.far_count / self.near_count
        return math.inf if self.far_count else math.nan


@dataclass(frozen=True)
class MergeReport:
    segments: tuple[SegmentVotes, ...]
    unattributed_votes: int
    merged_cloud_size: int

    @property
    def merged_ids(self) -> list[int]:
        return [s.segment_id for s in self.segments if s.merged]

    @property
    def rejected_ids(self) -> list[int]:
        return [s.segment_id for s in self.segments if not s.merged]

    def votes(self, segment_id: int) -> SegmentVotes:
        for s in self.segments:
            if s.segment_id == segment_id:
                return s
        raise KeyError(segment_id)


def merge_rule(near: int, far: int, ratio_threshold: float) -> bool:
    """Merge decision for one previous segment from its vote counts."""
    if near == 0:
        # unseen from the new viewpoint: carry it over to fill the occlusion
        return far == 0
    return far / near < ratio_threshold


def segment_labels(segments: Sequence[Segment], size: int) -> np.ndarray:
    """Per-point segment id over the parent cloud, -1 where no segment claims the point."""
    labels = np.full(size, -1, dtype=np.int64)
    for s in segments:
        if np.any(labels[s.indices] != -1):
            raise ValidationError("previous segments overlap")
        labels[s.indices] = s.segment_id
    return labels


def merge_clouds(
    prev_segments: Sequence[Segment],
    current: PointCloud,
    params: MergeParams = MergeParams(),
) -> tuple[PointCloud, MergeReport]:
    """Append the previous segments that still agree with ``current`` to it.

    The output holds the current points first (origin tag current) and then
    the points of each merged segment in segment order (origin tag carried).
    """
    if not prev_segments:
        raise NoPreviousSegments("no previous segments; use the first-trial path")
    parent = prev_segments[0].parent
    if any(s.parent is not parent for s in prev_segments):
        raise ValidationError("previous segments must share one parent cloud")
    ids = [s.segment_id for s in prev_segments]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate previous segment ids")
    if current.frame != parent.frame:
        raise ValidationError("current and previous clouds are in different frames")

    labels = segment_labels(prev_segments, len(parent))
    near = dict.fromkeys(ids, 0)
    far = dict.fromkeys(ids, 0)
    unattributed = 0
    if len(current):
        nn, dist = NnIndex(parent.points).query(current.points)
        owner = labels[nn]
        unattributed = int(np.count_nonzero(owner < 0))
        voted = owner >= 0
        is_near = dist < params.min_distance
        for sid, cnt in zip(*np.unique(owner[voted & is_near], return_counts=True)):
            near[int(sid)] = int(cnt)
        for sid, cnt in zip(*np.unique(owner[voted & ~is_near], return_counts=True)):
            far[int(sid)] = int(cnt)

    entries = []
    carried = []
    for s in sorted(prev_segments, key=lambda s: s.segment_id):
        ok = merge_rule(near[s.segment_id], far[s.segment_id], params.ratio_threshold)
        entries.append(SegmentVotes(s.segment_id, near[s.segment_id], far[s.segment_id], ok))
        if ok:
            carried.append(s.points)

    parts = [PointCloud(current.points, frame=current.frame, origin=np.full(len(current), ORIGIN_CURRENT))]
    for pts in carried:
        parts.append(PointCloud(pts, frame=current.frame, origin=np.full(len(pts), ORIGIN_CARRIED)))
    merged = concatenate(parts)
    return merged, MergeReport(tuple(entries), unattributed, len(merged))


ACTIONS = ("reuse", "redetect", "unchanged")


@dataclass(frozen=True)
class SegmentDecision:
    segment_id: int
    action: str  # "reuse" | "redetect" | "unchanged"
    matched_previous_estimate: Optional[PoseEstimate] = None
    median_distance: Optional[float] = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValidationError(f"unknown action {self.action!r}")
        if (self.action == "reuse") != (self.matched_previous_estimate is not None):
            raise ValidationError("a reuse decision carries exactly one previous estimate")


def median_model_distance(points: np.ndarray, estimate: PoseEstimate, model: ObjectModel) -> float:
    """Median distance from ``points`` to the model cloud placed at ``estimate.pose``."""
    _, d = model.index.query(estimate.pose.inverse().apply(points))
    return float(np.median(d))


def decide_reuse(
    merged_segments: Sequence[Segment],
    prev_estimates: Sequence[PoseEstimate],
    model: ObjectModel,
    params: MergeParams = MergeParams(),
) -> list[SegmentDecision]:
    """Reuse or redetect, per segment, in segment order.

    All (segment, estimate) pairs with a median distance under
    ``reuse_distance`` are assigned greedily by ascending distance (ties by
    segment id, then estimate position), so each estimate serves at most one
    segment.
    """
    pairs = []
    for s in merged_segments:
        pts = s.points
        for j, est in enumerate(prev_estimates):
            d = median_model_distance(pts, est, model)
            if d < params.reuse_distance:
                pairs.append((d, s.segment_id, j))
    pairs.sort()
    taken_seg: dict[int, tuple[int, float]] = {}
    taken_est: set[int] = set()
    for d, sid, j in pairs:
        if sid in taken_seg or j in taken_est:
            continue
        taken_seg[sid] = (j, d)
        taken_est.add(j)
    out = []
    for s in merged_segments:
        if s.segment_id in taken_seg:
            j, d = taken_seg[s.segment_id]
            out.append(SegmentDecision(s.segment_id, "reuse", prev_estimates[j], d))
        else:
            out.append(SegmentDecision(s.segment_id, "redetect"))
    return out


def same_points(a: np.ndarray, b: np.ndarray, tolerance: float) -> bool:
    """Whether two point sets cover each other: median NN distance below ``tolerance`` both ways."""
    if len(a) == 0 or len(b) == 0:
        return False
    _, ab = NnIndex(b).query(a)
    if np.median(ab) >= tolerance:
        return False
    _, ba = NnIndex(a).query(b)
    return bool(np.median(ba) < tolerance)


def mark_unchanged(
    decisions: Sequence[SegmentDecision],
    segments: Sequence[Segment],
    unresolved: Sequence[Segment],
    params: MergeParams = MergeParams(),
) -> list[SegmentDecision]:
    """Turn redetect decisions into ``unchanged`` for segments that repeat an unresolved one.

    Detection is deterministic, so running it again on the same points could
    only fail the same way.
    """
    by_id = {s.segment_id: s for s in segments}
    left = list(unresolved)
    out = []
    for d in decisions:
        if d.action == "redetect" and left:
            pts = by_id[d.segment_id].points
            hit = next((i for i, u in enumerate(left) if same_points(pts, u.points, params.min_distance)), None)
            if hit is not None:
                left.pop(hit)
                d = SegmentDecision(d.segment_id, "unchanged")
        out.append(d)
    return out


@dataclass(frozen=True)
class DetectionSetup:
    """Everything a trial needs besides the clouds themselves."""

    templates: Sequence[ViewTemplate]
    model: ObjectModel
    icp: IcpParams = IcpParams()
    cluster: ClusterParams = ClusterParams()
    k: int = 5
    accept_min_fitness: float = 0.5
    gate_tolerance: float = 0.3
    keep_clumps: bool = True
    plane_tolerance: float = 0.002
    plane_min_fraction: float = 0.2
    workers: int = 1
    seed: int = 0


@dataclass(frozen=True, eq=False)
class TrialState:
    """What one trial hands to the next: its cloud, gated segments and their estimates."""

    cloud: PointCloud
    segments: tuple[Segment, ...]
    detections: tuple[tuple[int, PoseEstimate], ...]

    @property
    def estimates(self) -> list[PoseEstimate]:
        return [e for _, e in self.detections]

    @property
    def unresolved(self) -> list[Segment]:
        """Segments that went through detection without an accepted estimate."""
        done = {sid for sid, _ in self.detections}
        return [s for s in self.segments if s.segment_id not in done]

    def without_segment(self, segment_id: int) -> "TrialState":
        """The state with one segment (and its estimate, if any) removed, e.g. after picking it."""
        return TrialState(
            self.cloud,
            tuple(s for s in self.segments if s.segment_id != segment_id),
            tuple((sid, e) for sid, e in self.detections if sid != segment_id),
        )


@dataclass(frozen=True, eq=False)
class TrialResult:
    """Outcome of one recognition pass.

    ``detections`` pairs each gated segment id (into ``cloud``) with its
    estimate; reused estimates are the previous objects with only the
    provenance changed, so their own ``segment_id`` still names the segment of
    the trial they were computed in.
    """

    cloud: PointCloud
    segments: tuple[Segment, ...]
    detections: tuple[tuple[int, PoseEstimate], ...]
    redetect_count: int
    report: Optional[MergeReport] = None
    decisions: tuple[SegmentDecision, ...] = ()
    plane: Optional[Plane] = None
    rejected_segments: int = 0

    @property
    def estimates(self) -> list[PoseEstimate]:
        return [e for _, e in self.detections]

    def segment(self, segment_id: int) -> Segment:
        for s in self.segments:
            if s.segment_id == segment_id:
                return s
        raise KeyError(segment_id)

    def state(self) -> TrialState:
        return TrialState(self.cloud, self.segments, self.detections)


def _segment_and_gate(cloud: PointCloud, setup: DetectionSetup) -> tuple[list[Segment], list[Segment], Optional[Plane]]:
    segs, plane = segment_scene(cloud, setup.cluster, setup.plane_tolerance, setup.plane_min_fraction, setup.seed)
    gated = gate_by_bounding_box(segs, setup.model.extents, setup.gate_tolerance, setup.keep_clumps)
    return segs, gated, plane


def _detect(segments: Sequence[Segment], sensor_pose, setup: DetectionSetup):
    return detect_all(
        segments, setup.templates, setup.model, sensor_pose, setup.icp, setup.k, setup.accept_min_fitness, setup.workers
    )


def iterate_trial(
    prev_state: Optional[TrialState],
    current: PointCloud,
    sensor_pose,
    setup: DetectionSetup,
    params: MergeParams = MergeParams(),
) -> TrialResult:
    """One recognition pass, reusing what the previous pass established where possible.

    Without a previous state (or with one holding no segments) every gated
    segment of ``current`` is detected. Otherwise the previous segments are
    merged in, the merged cloud is re-segmented, and only segments that no
    previous estimate explains are detected; a segment that repeats one the
    previous pass could not recognise is left alone.
    """
    if prev_state is None or not prev_state.segments:
        segs, gated, plane = _segment_and_gate(current, setup)
        found = _detect(gated, sensor_pose, setup)
        detections = tuple((sid, e) for sid, e in found if e is not None)
        return TrialResult(current, tuple(gated), detections, len(gated), plane=plane,
                           rejected_segments=len(segs) - len(gated))

    merged, report = merge_clouds(prev_state.segments, current, params)
    segs, gated, plane = _segment_and_gate(merged, setup)
    decisions = decide_reuse(gated, prev_state.estimates, setup.model, params)
    decisions = mark_unchanged(decisions, gated, prev_state.unresolved, params)
    redo = [s for s, d in zip(gated, decisions) if d.action == "redetect"]
    fresh = {sid: e for sid, e in _detect(redo, sensor_pose, setup)}
    detections = []
    for d in decisions:
        if d.action == "reuse":
            detections.append((d.segment_id, d.matched_previous_estimate.as_reused()))
        elif fresh.get(d.segment_id) is not None:
            detections.append((d.segment_id, fresh[d.segment_id]))
    log.debug("merged %s of %s previous segments; %s redetections", len(report.merged_ids), len(report.segments), len(redo))
    return TrialResult(merged, tuple(gated), tuple(detections), len(redo), report, tuple(decisions), plane,
                       len(segs) - len(gated))


def _finite(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


def report_to_json(report: MergeReport) -> dict:
    return {
        "segments": [
            {
                "segment_id": s.segment_id,
                "near_count": s.near_count,
                "far_count": s.far_count,
                "ratio": _finite(s.ratio),
                "merged": s.merged,
            }
            for s in report.segments
        ],
        "unattributed_votes": report.unattributed_votes,
        "merged_cloud_size": report.merged_cloud_size,
        "merged_ids": report.merged_ids,
        "rejected_ids": report.rejected_ids,
    }


def report_from_json(d: dict) -> MergeReport:
    segs = tuple(SegmentVotes(int(s["segment_id"]), int(s["near_count"]), int(s["far_count"]), bool(s["merged"]))
                 for s in d["segments"])
    return MergeReport(segs, int(d["unattributed_votes"]), int(d["merged_cloud_size"]))


def decision_to_json(d: SegmentDecision) -> dict:
    return {
        "segment_id": d.segment_id,
        "action": d.action,
        "median_distance": d.median_distance,
        "previous_segment_id": None if d.matched_previous_estimate is None else d.matched_previous_estimate.segment_id,
    }


def trial_to_json(result: TrialResult) -> dict:
    """Estimates, decisions and merge report of a trial (clouds are written separately as PLY)."""
    return {
        "redetect_count": result.redetect_count,
        "detections": [{"segment": sid, **estimate_to_json(e)} for sid, e in result.detections],
        "decisions": [decision_to_json(d) for d in result.decisions],
        "report": None if result.report is None else report_to_json(result.report),
    }
