"""Command-line entry point: ``binpick <command> [options]``.

Exit codes: 0 on success, 1 when the input or configuration is invalid, 2 when
a run fails.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pydantic

from . import io as bio
from .errors import BinPickError, ValidationError
from .merge import iterate_trial, merge_clouds, report_to_json, trial_to_json
from .pipeline import (
    STREAM_SCENE,
    STREAM_SENSOR,
    PipelineConfig,
    config_templates,
    derived_seed,
    detection_setup,
    feasible_candidates,
    grid_height,
    load_config,
    prepare_cloud,
    run_series,
)
from .scene import generate_pile, load_model, render_depth, scene_to_json
from .segmentation import plane_inliers, segments_from_json, segments_to_json
from .viewplan import build_grid, grid_to_json, mark_cells, select_pose

log = logging.getLogger("binpick")

THREADS_ENV = "BINPICK_THREADS"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def _config(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "model", None):
        overrides["model"] = args.model if args.model.startswith("builtin:") else str(Path(args.model).resolve())
    threads = resolve_threads(args.threads)
    if threads is not None:
        overrides["threads"] = threads
    if args.config:
        return load_config(args.config, **overrides)
    return PipelineConfig.model_validate(overrides)


def resolve_threads(flag: Optional[int], env=None) -> Optional[int]:
    """``--threads`` wins; otherwise the environment variable; otherwise ``None``."""
    if flag is not None:
        return flag
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1")
    return value


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(args) -> int:
    cfg = _config(args)
    model = load_model(cfg.model_path())
    box = cfg.box.aabb()
    scene = generate_pile(model, cfg.object_count, box, derived_seed(cfg.seed, STREAM_SCENE), cfg.clearance,
                          cfg.pile_wall_margin)
    intr = cfg.sensor.intrinsics()
    cand, _ = select_pose(feasible_candidates(cfg), None, box, intr, cfg.view.cell_size, box.extents[2])
    cloud, labels = render_depth(scene, cand.pose, intr, seed=derived_seed(cfg.seed, STREAM_SENSOR, 1),
                                 return_labels=True)
    out = _out(args, "sim")
    bio.dump_json(out / "scene.json", scene_to_json(scene))
    bio.write_ply(out / "cloud.ply", cloud, extra={"label": labels.astype(np.int32)})
    bio.dump_json(out / "sensor.json", bio.transform_to_json(cand.pose))
    print(f"{len(scene.instances)} instances, {len(cloud)} points -> {out}")
    return EXIT_OK


def cmd_plan_view(args) -> int:
    cfg = _config(args)
    box = cfg.box.aabb()
    intr = cfg.sensor.intrinsics()
    cands = feasible_candidates(cfg)
    grid = None
    if args.cloud:
        if not args.sensor:
            raise ValidationError("--cloud needs --sensor (the pose it was captured from)")
        cloud = prepare_cloud(bio.read_cloud(args.cloud), cfg)
        sensor = bio.transform_from_json(bio.load_json(args.sensor))
        seg = cfg.segmentation
        mask, _ = plane_inliers(cloud, seg.plane_tolerance, seg.plane_min_fraction, cfg.seed)
        height = grid_height(cfg, load_model(cfg.model_path()))
        grid = mark_cells(build_grid(box, cfg.view.cell_size, height), cloud.subset(np.nonzero(~mask)[0]),
                          sensor, intr, cfg.view.min_points_per_cell)
    best, scores = select_pose(cands, grid, box, intr, cfg.view.cell_size, box.extents[2])
    out = _out(args, "plan")
    bio.dump_json(out / "view.json", {
        "pose": bio.transform_to_json(best.pose),
        "face_index": best.face_index,
        "distance_index": best.distance_index,
        "scores": [
            {"face_index": c.face_index, "distance_index": c.distance_index, "score": int(s)}
            for c, s in zip(cands, scores)
        ],
    })
    if grid is not None:
        bio.dump_json(out / "grid.json", grid_to_json(grid))
    print(f"face {best.face_index} distance {best.distance_index} score {int(max(scores))} -> {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    model = load_model(cfg.model_path())
    setup = detection_setup(cfg, model, config_templates(cfg, model, args.templates))
    sensor = bio.transform_from_json(bio.load_json(args.sensor))
    cloud = prepare_cloud(bio.read_cloud(args.cloud), cfg, crop=not args.no_crop)
    out = _out(args, "detect")
    bio.write_ply(out / "cloud.ply", cloud)
    segments, detections = [], []
    if len(cloud):
        result = iterate_trial(None, cloud, sensor, setup, cfg.merge.params())
        segments = result.segments
        detections = trial_to_json(result)["detections"]
    bio.dump_json(out / "segments.json", segments_to_json(segments))
    bio.dump_json(out / "estimates.json", detections)
    print(f"{len(segments)} segments, {len(detections)} estimates -> {out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = _config(args)
    prev = bio.read_cloud(args.prev_cloud)
    prev_segments = segments_from_json(bio.load_json(args.prev_segments), prev)
    current = bio.read_cloud(args.cloud)
    merged, report = merge_clouds(prev_segments, current, cfg.merge.params())
    out = _out(args, "merge")
    bio.write_ply(out / "merged.ply", merged)
    bio.dump_json(out / "report.json", report_to_json(report))
    print(f"merged {len(report.merged_ids)} of {len(report.segments)} segments; {len(merged)} points -> {out}")
    return EXIT_OK


def cmd_run_series(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.output_path()
    metrics = run_series(cfg, out)
    print(
        f"trials {len(metrics['trials'])}, detection calls {metrics['detection_calls']}"
        f" / baseline {metrics['baseline_detection_calls']} -> {out}"
    )
    return EXIT_FAILED if metrics["halted"] else EXIT_OK


def cmd_make_templates(args) -> int:
    cfg = _config(args)
    model = load_model(cfg.model_path())
    out = _out(args, "templates")
    templates = config_templates(cfg, model, str(out))
    print(f"{len(templates)} templates for {model.model_id} -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help=f"detection workers (default: ${THREADS_ENV} or config)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="binpick", description="Iterative recognition for randomized bin picking.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="drop a pile and capture it from the first-trial view")
    s.add_argument("--model")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("plan-view", parents=[common], help="choose the next sensor pose")
    s.add_argument("--cloud", help="previous capture; omitted means first-trial scoring")
    s.add_argument("--sensor", help="JSON pose of the previous capture")
    s.set_defaults(func=cmd_plan_view)

    s = sub.add_parser("detect", parents=[common], help="segment a cloud and estimate object poses")
    s.add_argument("--cloud", required=True)
    s.add_argument("--sensor", required=True, help="JSON sensor pose (camera to world)")
    s.add_argument("--model")
    s.add_argument("--templates", help="template cache directory")
    s.add_argument("--no-crop", action="store_true", help="keep points outside the box walls")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("merge", parents=[common], help="merge a previous segmented capture into a new one")
    s.add_argument("--prev-cloud", required=True)
    s.add_argument("--prev-segments", required=True, help="segments.json written by detect")
    s.add_argument("--cloud", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("run-series", parents=[common], help="run a full simulated picking series")
    s.set_defaults(func=cmd_run_series)

    s = sub.add_parser("make-templates", parents=[common], help="render and store the 42 view templates")
    s.add_argument("--model")
    s.set_defaults(func=cmd_make_templates)
    return p


def _describe(err: pydantic.ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "config"
        parts.append(f"{loc}: {e['msg']}")
    return "invalid configuration: " + "; ".join(parts)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except pydantic.ValidationError as e:
        print(_describe(e), file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except BinPickError as e:
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
    except Exception as e:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
