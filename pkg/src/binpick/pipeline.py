"""End-to-end picking series on a simulated bin.

One series: drop a pile, then repeat {plan a view, capture, recognise, pick}
with the previous capture carried into each later recognition. Results go to
an output tree; the metrics file holds only deterministic quantities so two
runs of the same configuration produce identical bytes.
"""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import io as bio
from .geometry import Aabb, NnIndex, PointCloud, RigidTransform, voxel_downsample
from .merge import DetectionSetup, MergeParams, TrialResult, TrialState, iterate_trial, trial_to_json
from .pose import IcpParams, PoseEstimate, load_or_generate_templates, symmetric_pose_error
from .scene import (
    ObjectModel,
    PickDisturbance,
    Scene,
    SensorIntrinsics,
    apply_pick,
    contact_neighbors,
    generate_pile,
    load_model,
    render_depth,
    scene_to_json,
)
from .segmentation import ClusterParams, plane_inliers
from .viewplan import (
    ViewPlanParams,
    build_grid,
    candidate_poses,
    default_feasibility,
    filter_feasible,
    grid_to_json,
    mark_cells,
    select_pose,
)

log = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BoxConfig(_Section):
    size: tuple[float, float, float] = (0.30, 0.22, 0.10)
    center: tuple[float, float] = (0.0, 0.0)
    floor_z: float = 0.0

    @field_validator("size")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("box size must be positive")
        return v

    def aabb(self) -> Aabb:
        lo = [self.center[0] - self.size[0] / 2, self.center[1] - self.size[1] / 2, self.floor_z]
        hi = [self.center[0] + self.size[0] / 2, self.center[1] + self.size[1] / 2, self.floor_z + self.size[2]]
        return Aabb(lo, hi)


class TemplateConfig(_Section):
    resolution: float = Field(0.0008, gt=0)
    voxel: Optional[float] = Field(0.004, gt=0)
    cache_dir: Optional[str] = None


class ViewConfig(_Section):
    n_faces: int = 20
    distances: tuple[float, ...] = (0.45, 0.60, 0.75)
    cell_size: float = Field(0.01, gt=0)
    min_points_per_cell: int = Field(3, ge=1)
    robot_base_offset: tuple[float, float, float] = (-0.45, 0.0, 0.25)
    reach: float = Field(1.1, gt=0)

    def params(self) -> ViewPlanParams:
        return ViewPlanParams(self.n_faces, self.distances, self.cell_size)


class SegmentationConfig(_Section):
    voxel_size: float = Field(0.004, gt=0)
    wall_margin: float = Field(0.006, ge=0)
    plane_tolerance: float = Field(0.002, gt=0)
    plane_min_fraction: float = Field(0.2, gt=0, le=1)
    cluster_tolerance: float = Field(0.008, gt=0)
    min_cluster_size: int = Field(30, ge=1)
    max_cluster_size: Optional[int] = None
    gate_tolerance: float = Field(0.3, ge=0)
    keep_clumps: bool = True

    def cluster(self) -> ClusterParams:
        return ClusterParams(self.cluster_tolerance, self.min_cluster_size, self.max_cluster_size)


class IcpConfig(_Section):
    max_iterations: int = Field(60, ge=1)
    trans_eps: float = Field(1e-6, gt=0)
    max_correspondence_dist: float = Field(0.01, gt=0)
    outlier_dist: float = Field(0.005, gt=0)
    k: int = Field(5, ge=1)
    accept_min_fitness: float = Field(0.5, ge=0, le=1)

    def params(self) -> IcpParams:
        return IcpParams(self.max_iterations, self.trans_eps, self.max_correspondence_dist, self.outlier_dist)


class MergeConfig(_Section):
    min_distance: float = Field(0.005, gt=0)
    ratio_threshold: float = Field(0.5, gt=0)
    reuse_distance: float = Field(0.01, gt=0)

    def params(self) -> MergeParams:
        return MergeParams(self.min_distance, self.ratio_threshold, self.reuse_distance)


class SensorConfig(_Section):
    horizontal_fov_deg: float = Field(58.0, gt=0, lt=180)
    vertical_fov_deg: float = Field(45.0, gt=0, lt=180)
    width: int = Field(320, ge=1)
    height: int = Field(240, ge=1)
    min_range: float = Field(0.2, ge=0)
    max_range: float = Field(2.0, gt=0)
    noise_sigma: float = Field(0.0, ge=0)

    def intrinsics(self) -> SensorIntrinsics:
        return SensorIntrinsics(
            np.deg2rad(self.horizontal_fov_deg),
            np.deg2rad(self.vertical_fov_deg),
            self.width,
            self.height,
            self.min_range,
            self.max_range,
            self.noise_sigma,
        )


class DisturbanceConfig(_Section):
    enabled: bool = True
    contact_radius: float = Field(0.02, ge=0)
    max_translation: float = Field(0.01, ge=0)
    max_rotation_deg: float = Field(10.0, ge=0)

    def params(self) -> PickDisturbance:
        return PickDisturbance(self.contact_radius, self.max_translation, np.deg2rad(self.max_rotation_deg))


class PipelineConfig(_Section):
    """Every tunable of a series; JSON keys mirror the field names."""

    model: str = "builtin:block"
    box: BoxConfig = BoxConfig()
    object_count: int = Field(9, ge=1)
    trial_count: int = Field(4, ge=1)
    seed: int = 0
    clearance: float = Field(0.012, ge=0)
    pile_wall_margin: float = Field(0.005, ge=0)
    templates: TemplateConfig = TemplateConfig()
    view: ViewConfig = ViewConfig()
    segmentation: SegmentationConfig = SegmentationConfig()
    icp: IcpConfig = IcpConfig()
    merge: MergeConfig = MergeConfig()
    sensor: SensorConfig = SensorConfig()
    disturbance: DisturbanceConfig = DisturbanceConfig()
    output_dir: Optional[str] = "out"
    threads: int = Field(1, ge=1)
    base_dir: Optional[str] = Field(None, exclude=True)

    @model_validator(mode="after")
    def _check(self):
        if not self.model.startswith("builtin:"):
            path = Path(self.model)
            if not path.is_absolute() and self.base_dir:
                path = Path(self.base_dir) / path
            if not path.exists():
                raise ValueError(f"model file not found: {path}")
        self.view.params()  # validates the polyhedron and distances
        return self

    def model_path(self) -> str:
        if self.model.startswith("builtin:") or Path(self.model).is_absolute() or not self.base_dir:
            return self.model
        return str(Path(self.base_dir) / self.model)

    def output_path(self) -> Path:
        """Output directory; relative paths resolve against the config file's directory."""
        out = Path(self.output_dir or "out")
        return out if out.is_absolute() or not self.base_dir else (Path(self.base_dir) / out).resolve()


def load_config(path, **overrides) -> PipelineConfig:
    """Read a JSON config; relative model paths resolve against the file's directory."""
    data = bio.load_json(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    data["base_dir"] = str(Path(path).resolve().parent)
    return PipelineConfig.model_validate(data)


def derived_seed(seed: int, *stream: int) -> int:
    """Independent, reproducible sub-seed for one random stream of the series."""
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


STREAM_SCENE, STREAM_SENSOR, STREAM_PICK = 0, 1, 2


class _Clock:
    def __init__(self):
        self.durations: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        yield
        self.durations[name] = self.durations.get(name, 0.0) + time.perf_counter() - t0


def crop_to_box(cloud: PointCloud, box: Aabb, margin: float) -> PointCloud:
    """Points strictly inside the box walls (shrunk by ``margin``), at any height."""
    p = cloud.points
    keep = np.all(p[:, :2] > box.min[:2] + margin, axis=1) & np.all(p[:, :2] < box.max[:2] - margin, axis=1)
    keep &= p[:, 2] > box.min[2] - margin
    return cloud.subset(np.nonzero(keep)[0])


def config_templates(config: PipelineConfig, model: ObjectModel, cache_dir=None) -> list:
    """Templates for ``model``, loaded from (or stored in) the configured cache when there is one."""
    t = config.templates
    cache = cache_dir if cache_dir is not None else t.cache_dir
    if cache is not None and not Path(cache).is_absolute() and cache_dir is None:
        cache = str(Path(config.base_dir or ".") / cache)
    return load_or_generate_templates(cache, model, resolution=t.resolution, voxel=t.voxel)


def detection_setup(config: PipelineConfig, model: ObjectModel, templates) -> DetectionSetup:
    seg = config.segmentation
    return DetectionSetup(
        templates,
        model,
        config.icp.params(),
        seg.cluster(),
        config.icp.k,
        config.icp.accept_min_fitness,
        seg.gate_tolerance,
        seg.keep_clumps,
        seg.plane_tolerance,
        seg.plane_min_fraction,
        config.threads,
        config.seed,
    )


def feasible_candidates(config: PipelineConfig) -> list:
    """Sensor pose candidates the robot can reach and that look into the box."""
    box = config.box.aabb()
    base = box.bottom_center + np.asarray(config.view.robot_base_offset)
    return filter_feasible(candidate_poses(box, config.view.params()), default_feasibility(box, base, config.view.reach))


def grid_height(config: PipelineConfig, model: ObjectModel) -> float:
    """Occupancy grid height: the box walls plus room for two objects stacked on the rim."""
    return float(config.box.size[2] + 2 * model.extents.max())


def prepare_cloud(raw: PointCloud, config: PipelineConfig, crop: bool = True) -> PointCloud:
    """Crop a capture to the box interior (unless ``crop`` is false) and voxelise it."""
    seg = config.segmentation
    if crop:
        raw = crop_to_box(raw, config.box.aabb(), seg.wall_margin)
    return voxel_downsample(raw, seg.voxel_size)


class GroundTruth:
    """Instance surfaces of one scene snapshot, for labelling points and scoring estimates."""

    def __init__(self, scene: Scene):
        self.scene = scene
        pts, labels = [], []
        for inst in scene.instances:
            p = scene.instance_points(inst.instance_id)
            pts.append(p)
            labels.append(np.full(len(p), inst.instance_id))
        self.labels = np.concatenate(labels) if labels else np.zeros(0, dtype=int)
        self.index = NnIndex(np.vstack(pts)) if pts else None

    def dominant_instance(self, points: np.ndarray, max_median: float = 0.005) -> int:
        """Instance owning most of ``points`` (ties to the lower id); -1 if they lie on no object."""
        if self.index is None or len(points) == 0:
            return -1
        ids, d = self.index.query(points)
        if np.median(d) > max_median:
            return -1
        lab = self.labels[ids]
        vals, counts = np.unique(lab, return_counts=True)
        return int(vals[np.argmax(counts)])

    def nearest_instance(self, estimate: PoseEstimate) -> int:
        model = self.scene.model
        c = (model.vertices.min(axis=0) + model.vertices.max(axis=0)) / 2
        p = estimate.pose.apply(c)
        best = min(self.scene.instances, key=lambda i: (np.linalg.norm(i.pose.apply(c) - p), i.instance_id))
        return best.instance_id

    def surface_median(self, instance_id: int, estimate: PoseEstimate) -> float:
        """Median distance from the true surface samples to the estimate's posed model."""
        truth = self.scene.instance_points(instance_id)
        _, d = self.scene.model.index.query(estimate.pose.inverse().apply(truth))
        return float(np.median(d))


def instance_motion(model: ObjectModel, a: RigidTransform, b: RigidTransform) -> float:
    """Mean displacement of the model samples between two placements."""
    pts = model.sample_cloud.points
    return float(np.mean(np.linalg.norm(a.apply(pts) - b.apply(pts), axis=1)))


def _transform_json(T: RigidTransform) -> dict:
    return bio.transform_to_json(T)


def run_series(config: PipelineConfig, out_dir=None, write: bool = True) -> dict:
    """Run one picking series and return its metrics dictionary.

    Writes ``trial_k/{cloud.ply, merged.ply, grid.json, estimates.json,
    report.json}``, ``metrics.json`` and ``timings.json`` under the output
    directory unless ``write`` is false.
    """
    out = Path(out_dir) if out_dir is not None else config.output_path()
    model = load_model(config.model_path())
    setup = detection_setup(config, model, config_templates(config, model))
    box = config.box.aabb()
    seg_cfg = config.segmentation
    merge_params = config.merge.params()
    intr = config.sensor.intrinsics()
    vparams = config.view.params()
    cands = feasible_candidates(config)
    height = grid_height(config, model)
    scene = generate_pile(
        model, config.object_count, box, derived_seed(config.seed, STREAM_SCENE), config.clearance,
        config.pile_wall_margin,
    )

    records, timings = [], []
    state: Optional[TrialState] = None
    grid = None
    prev_explained: set[int] = set()
    prev_scene: Optional[Scene] = None
    picked: Optional[int] = None
    disturbed: list[int] = []
    halted = None

    for trial in range(1, config.trial_count + 1):
        clock = _Clock()
        with clock("plan"):
            cand, scores = select_pose(cands, grid, box, intr, vparams.cell_size, box.extents[2])
        with clock("capture"):
            raw = render_depth(scene, cand.pose, intr, seed=derived_seed(config.seed, STREAM_SENSOR, trial))
            cloud = prepare_cloud(raw, config)
        with clock("recognize"):
            result = iterate_trial(state, cloud, cand.pose, setup, merge_params)
        with clock("mark"):
            mask, _ = plane_inliers(cloud, seg_cfg.plane_tolerance, seg_cfg.plane_min_fraction, config.seed)
            objects = cloud.subset(np.nonzero(~mask)[0])
            grid = mark_cells(build_grid(box, vparams.cell_size, height), objects, cand.pose, intr,
                              config.view.min_points_per_cell)
        # re-detecting everything would send every gated segment to detection
        baseline = len(result.segments)

        truth = GroundTruth(scene)
        evaluation = _evaluate(result, truth, prev_scene, prev_explained, picked, disturbed, merge_params, model)
        record = {
            "trial": trial,
            "sensor_pose": _transform_json(cand.pose),
            "face_index": cand.face_index,
            "distance_index": cand.distance_index,
            "view_score": int(max(scores)),
            "captured_points": len(raw),
            "cloud_points": len(cloud),
            "merged_points": len(result.cloud),
            "segments": len(result.segments),
            "redetect_count": result.redetect_count,
            "baseline_count": baseline,
            "reused_count": sum(1 for _, e in result.detections if e.provenance == "reused"),
            "unchanged_count": sum(1 for d in result.decisions if d.action == "unchanged"),
            "estimates": len(result.detections),
            "picked_instance": None,
            "disturbed_instances": disturbed,
            "evaluation": evaluation,
            "scene": scene_to_json(scene),
        }
        if write:
            _write_trial(out / f"trial_{trial}", raw, result, grid)

        if not result.detections:
            halted = f"no detections in trial {trial}"
            log.warning(halted)
            records.append(record)
            timings.append(clock.durations)
            break

        prev_scene = scene
        prev_explained = set(evaluation["explained_instances"])
        picked, disturbed = None, []
        state = result.state()
        if trial < config.trial_count and config.disturbance.enabled:
            with clock("pick"):
                seg_id, target = _pick_target(result, truth)
                picked = target
                disturbed = contact_neighbors(scene, target, config.disturbance.contact_radius)
                scene = apply_pick(scene, target, config.disturbance.params(),
                                   derived_seed(config.seed, STREAM_PICK, trial), config.pile_wall_margin)
                state = state.without_segment(seg_id)
            record["picked_instance"] = target
        records.append(record)
        timings.append(clock.durations)

    metrics = _series_metrics(records, halted)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        bio.dump_json(out / "metrics.json", metrics)
        bio.dump_json(out / "timings.json", {"trials": timings, "total": sum(sum(t.values()) for t in timings)})
    metrics["timings"] = timings
    return metrics


def _pick_target(result: TrialResult, truth: GroundTruth) -> tuple[int, int]:
    """(segment id, instance id) of the highest-fitness estimate; ties go to the lower instance id."""
    scored = [(-e.fitness, truth.nearest_instance(e), sid) for sid, e in result.detections]
    _, iid, sid = min(scored)
    return sid, iid


def _evaluate(result, truth, prev_scene, prev_explained, picked, disturbed, merge_params, model) -> dict:
    """Ground-truth diagnostics: pose errors, segment ownership and reuse correctness."""
    per = []
    explained = set()
    for sid, est in result.detections:
        iid = truth.nearest_instance(est)
        rot, trans = symmetric_pose_error(model, est.pose, truth.scene.get(iid).pose)
        surf = truth.surface_median(iid, est)
        if surf < merge_params.reuse_distance:
            explained.add(iid)
        entry = {
            "segment": sid,
            "instance": iid,
            "provenance": est.provenance,
            "rotation_error_deg": rot,
            "translation_error_m": trans,
            "surface_median_m": surf,
        }
        if est.provenance == "reused" and prev_scene is not None:
            before = [i for i in prev_scene.instances if i.instance_id == iid]
            entry["motion_since_previous_m"] = (
                instance_motion(model, before[0].pose, truth.scene.get(iid).pose) if before else None
            )
        per.append(entry)
    owners = [truth.dominant_instance(s.points) for s in result.segments]
    redetected = [d.segment_id for d in result.decisions if d.action == "redetect"]
    newly = sorted(
        {owners[i] for i, s in enumerate(result.segments)
         if (not result.decisions or s.segment_id in redetected)
         and owners[i] not in prev_explained and owners[i] not in disturbed}
    )
    return {
        "detections": per,
        "segment_owners": owners,
        "explained_instances": sorted(explained),
        "unexplained_owners_redetected": len(newly),
        "redetect_bound": None if picked is None else 1 + len(disturbed) + len(newly),
    }


def _write_trial(d: Path, raw: PointCloud, result: TrialResult, grid) -> None:
    d.mkdir(parents=True, exist_ok=True)
    bio.write_ply(d / "cloud.ply", raw)
    merged = result.cloud
    origin = merged.origin if merged.origin is not None else np.zeros(len(merged), dtype=np.uint8)
    bio.write_ply(d / "merged.ply", PointCloud(merged.points, frame=merged.frame), extra={"origin": origin})
    bio.dump_json(d / "grid.json", grid_to_json(grid))
    payload = trial_to_json(result)
    bio.dump_json(d / "estimates.json", payload["detections"])
    bio.dump_json(d / "report.json", {k: v for k, v in payload.items() if k != "detections"})


def _series_metrics(records: list[dict], halted: Optional[str]) -> dict:
    redetect = [r["redetect_count"] for r in records]
    baseline = [r["baseline_count"] for r in records]
    errors = [
        (e["rotation_error_deg"], e["translation_error_m"])
        for r in records
        for e in r["evaluation"]["detections"]
        if e["surface_median_m"] < 0.01
    ]
    return {
        "trials": records,
        "redetect_counts": redetect,
        "baseline_counts": baseline,
        "detection_calls": int(sum(redetect)),
        "baseline_detection_calls": int(sum(baseline)),
        "pose_error": {
            "evaluated": len(errors),
            "median_rotation_deg": float(np.median([e[0] for e in errors])) if errors else None,
            "median_translation_m": float(np.median([e[1] for e in errors])) if errors else None,
        },
        "halted": halted,
    }
