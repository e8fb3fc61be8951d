"""Per-frame SLAM loop: predict, track, keyframe/submap management,
densify + uncertainty + selection + optimization, and hierarchical loop
closure with pose-graph optimization and direct map deformation.

The loop is normatively serialized: one logical thread, every stage runs
to completion per frame, so fixed config+seed reproduces outputs
byte-for-byte in deterministic mode.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import SystemConfig
from .geometry import CameraIntrinsics, Pose, se3_compose, se3_inverse
from .loop import (KeyframeDatabase, compute_descriptor, detect_global_loop,
                   detect_local_loop, estimate_loop_constraint, refine_submap)
from .loop import apply_map_adjustment
from .mapper import (Keyframe, Submap, WorldMap, densify, gaussian_uncertainty,
                     maybe_insert_keyframe, maybe_new_submap, observed_gaussians,
                     optimize_submap)
from .metrics import MetricsReport, ate_rmse, depth_l1, psnr, ssim, write_report
from .pose_graph import PoseGraph, optimize_pose_graph, write_g2o
from .render import render
from .tracker import InputFrame, predict_pose, track_frame
from .world import (SequenceSpec, generate_scene, generate_trajectory,
                    load_tum_rgbd, render_dataset, write_trajectory_tum)

SEQUENTIAL_INFO = np.diag([100.0] * 3 + [400.0] * 3)


@dataclass
class SlamState:
    """Mutable state of one run, exposed for inspection in tests."""

    world: WorldMap = field(default_factory=WorldMap)
    db: KeyframeDatabase = field(default_factory=KeyframeDatabase)
    graph: PoseGraph = field(default_factory=PoseGraph)
    est_poses: List[Pose] = field(default_factory=list)
    frame_kf_ref: List[int] = field(default_factory=list)  # per frame, owning keyframe id
    loops_closed_global: int = 0
    loops_closed_local: int = 0


def load_dataset(cfg: SystemConfig) -> Tuple[List[InputFrame], Optional[List[Pose]], CameraIntrinsics]:
    ds = cfg.dataset
    K = ds.intrinsics()
    if ds.kind == "synthetic":
        scene = generate_scene(ds.seed, ds.gaussian_count)
        spec = SequenceSpec(
            kind=ds.trajectory, frames=ds.frames, intrinsics=K,
            depth_noise=ds.depth_noise, color_noise=ds.color_noise,
            closed_loop=ds.closed_loop, noise_seed=ds.seed,
        )
        trajectory = generate_trajectory(spec, scene)
        frames, gt = render_dataset(scene, trajectory, spec)
        return frames, gt, K
    if ds.kind == "tum":
        frames, gt = load_tum_rgbd(ds.path)
        return frames, gt, K
    raise ValueError(f"unknown dataset kind {ds.kind!r}")


def _submap_of_keyframe(world: WorldMap, kf_id: int) -> Submap:
    for sm in world.submaps:
        if kf_id in sm.keyframe_ids:
            return sm
    raise ValueError(f"keyframe {kf_id} belongs to no submap")


def _retro_correct_trajectory(state: SlamState, old_kf_poses: Dict[int, Pose]) -> None:
    """Carry non-keyframe poses along their reference keyframe's correction."""
    for i, ref in enumerate(state.frame_kf_ref):
        new_pose = state.world.keyframes[ref].pose
        old_pose = old_kf_poses[ref]
        state.est_poses[i] = se3_compose(
            state.est_poses[i], se3_compose(se3_inverse(old_pose), new_pose)
        )


def _run_pgo_and_adjust(state: SlamState, cfg: SystemConfig, K: CameraIntrinsics,
                        extra_fixed=()) -> None:
    optimized = optimize_pose_graph(state.graph, extra_fixed=extra_fixed)
    old_poses = {kid: kf.pose.copy() for kid, kf in state.world.keyframes.items()}
    moved_submaps = []
    for sm in state.world.submaps:
        moved = any(
            np.linalg.norm(optimized[kid].translation - old_poses[kid].translation) > 1e-12
            or abs(np.dot(optimized[kid].rotation, old_poses[kid].rotation)) < 1.0 - 1e-12
            for kid in sm.keyframe_ids
        )
        if moved:
            moved_submaps.append(sm)
    apply_map_adjustment(state.world.submaps, state.world.keyframes, optimized)
    for nid, pose in optimized.items():
        state.graph.nodes[nid] = pose.copy()
    _retro_correct_trajectory(state, old_poses)
    for sm in moved_submaps:
        refine_submap(sm, state.world.member_keyframes(sm), cfg.mapper, K,
                      iterations=cfg.loop.refine_iterations)


def run_slam(cfg: SystemConfig, write_artifacts: bool = True
             ) -> Tuple[MetricsReport, SlamState]:
    """Execute the full SLAM loop over the configured dataset."""
    frames, gt_poses, K = load_dataset(cfg)
    state = SlamState()
    rng = np.random.default_rng(cfg.seed)

    def random_schedule(members, k):
        k_eff = min(k, len(members))
        idx = rng.choice(len(members), size=k_eff, replace=False)
        return [members[j] for j in idx]

    schedule_fn = None if cfg.keyframe_selection else random_schedule

    t_start = time.perf_counter()
    track_seconds = 0.0
    map_seconds = 0.0
    prev_kf: Optional[Keyframe] = None

    for i, frame in enumerate(frames):
        t0 = time.perf_counter()
        if i == 0:
            pose = Pose.identity()
        else:
            if i == 1:
                init = state.est_poses[0].copy()
            else:
                init = predict_pose(state.est_poses[i - 1], state.est_poses[i - 2])
            active = state.world.active_submap
            iters = cfg.tracker.start_iterations if i == 1 else cfg.tracker.iterations
            try:
                pose = track_frame(active, frame, init, K, cfg.tracker, iterations=iters)
            except ValueError:
                pose = init
        state.est_poses.append(pose)
        track_seconds += time.perf_counter() - t0

        t1 = time.perf_counter()
        observed = observed_gaussians(pose, K, state.world.submaps)
        if maybe_insert_keyframe(observed, prev_kf, cfg.mapper):
            kf = Keyframe(
                id=state.world.next_keyframe_id, frame_index=i, pose=pose.copy(),
                color=frame.color, depth=frame.depth,
                descriptor=compute_descriptor(frame.color),
                observed_ids=observed, timestamp=frame.timestamp,
            )
            state.world.next_keyframe_id += 1
            state.world.add_keyframe(kf)
            state.graph.add_node(kf.id, kf.pose)
            if prev_kf is not None:
                z_seq = se3_compose(se3_inverse(prev_kf.pose), kf.pose)
                state.graph.add_edge(prev_kf.id, kf.id, z_seq, SEQUENTIAL_INFO)

            active = state.world.active_submap
            needs_submap = active is None or maybe_new_submap(
                pose, state.world.keyframes[active.anchor_keyframe_id].pose, cfg.mapper
            )
            if needs_submap:
                closed = active
                kf.is_global = True
                sm = state.world.new_submap(kf.id)
                sm.keyframe_ids.append(kf.id)
                if cfg.loop.enabled and closed is not None:
                    cand = detect_global_loop(
                        state.db, kf, state.world.member_keyframes(closed),
                        state.world.keyframes, K, state.world.submaps,
                    )
                    if cand is not None:
                        match_kf = state.world.keyframes[cand.match_id]
                        constraint = estimate_loop_constraint(
                            kf, match_kf, _submap_of_keyframe(state.world, cand.match_id),
                            K, cfg.tracker,
                        )
                        if constraint is not None:
                            z, info = constraint
                            state.graph.add_edge(cand.match_id, cand.query_id, z, info,
                                                 is_loop=True)
                            _run_pgo_and_adjust(state, cfg, K)
                            state.loops_closed_global += 1
                            kf.observed_ids = observed_gaussians(
                                kf.pose, K, state.world.submaps
                            )
                state.db.add_global(kf.id, kf.descriptor)
                state.db.reset_local()
                state.db.add_local(kf.id, kf.descriptor)
            else:
                active.keyframe_ids.append(kf.id)
                state.db.add_local(kf.id, kf.descriptor)

            active = state.world.active_submap
            rendered = render([active], kf.pose, K)
            densify(active, kf, rendered, cfg.mapper, state.world, K)
            kf.observed_ids = observed_gaussians(kf.pose, K, state.world.submaps)
            members = state.world.member_keyframes(active)
            gaussian_uncertainty(active, members, K)
            pruned = optimize_submap(
                active, members, cfg.mapper.iterations_per_optimization,
                cfg.mapper, K, schedule_fn=schedule_fn,
            )
            state.world.drop_gaussian_ids(pruned)

            if cfg.loop.enabled:
                cand = detect_local_loop(
                    state.db, kf, state.world.keyframes, K, state.world.submaps,
                    s_local=cfg.loop.local_similarity,
                )
                if cand is not None:
                    match_kf = state.world.keyframes[cand.match_id]
                    constraint = estimate_loop_constraint(
                        kf, match_kf, active, K, cfg.tracker
                    )
                    if constraint is not None:
                        z, info = constraint
                        state.graph.add_edge(cand.match_id, cand.query_id, z, info,
                                             is_loop=True)
                        outside = set(state.graph.nodes) - set(active.keyframe_ids)
                        _run_pgo_and_adjust(state, cfg, K, extra_fixed=outside)
                        state.loops_closed_local += 1

            state.est_poses[i] = state.world.keyframes[kf.id].pose.copy()
            prev_kf = kf
        state.frame_kf_ref.append(prev_kf.id)
        map_seconds += time.perf_counter() - t1

    total_s = time.perf_counter() - t_start
    report = _build_report(cfg, state, frames, gt_poses, K,
                           track_seconds, map_seconds, total_s)
    if write_artifacts:
        _write_artifacts(cfg, state, frames, report)
    return report, state


def _build_report(cfg: SystemConfig, state: SlamState, frames, gt_poses,
                  K: CameraIntrinsics, track_s, map_s, total_s) -> MetricsReport:
    report = MetricsReport(config=cfg.to_dict())
    n = max(len(frames), 1)
    if not cfg.deterministic:
        report.tracking_s_per_frame = track_s / n
        report.mapping_s_per_frame = map_s / n
        report.total_s = total_s
    if gt_poses is not None and len(gt_poses) >= 3:
        report.ate_rmse_cm = ate_rmse(state.est_poses, gt_poses)
    for sm in state.world.submaps:
        for kid in sm.keyframe_ids:
            kf = state.world.keyframes[kid]
            view = render([sm], kf.pose, K)
            report.psnr_per_view.append(psnr(view.color, kf.color))
            report.ssim_per_view.append(ssim(view.color, kf.color))
            report.depth_l1_cm_per_view.append(depth_l1(view.depth, kf.depth))
    report.keyframes = len(state.world.keyframes)
    report.submaps = len(state.world.submaps)
    report.global_loops_closed = state.loops_closed_global
    report.local_loops_closed = state.loops_closed_local
    report.loops_closed = state.loops_closed_global + state.loops_closed_local
    report.gaussians = sum(len(sm.gaussians) for sm in state.world.submaps)
    return report


def save_pose_graph_json(graph: PoseGraph, path) -> None:
    data = {
        "fixed_id": graph.fixed_id,
        "nodes": {
            str(nid): list(p.rotation) + list(p.translation)
            for nid, p in graph.nodes.items()
        },
        "edges": [
            {
                "from": e.from_id, "to": e.to_id,
                "rotation": list(e.measurement.rotation),
                "translation": list(e.measurement.translation),
                "information": e.information.tolist(),
                "is_loop": e.is_loop,
            }
            for e in graph.edges
        ],
    }
    with open(path, "w") as f:
        json.dump(data, f, sort_keys=True, indent=2)
        f.write("\n")


def load_pose_graph_json(path) -> PoseGraph:
    with open(path) as f:
        data = json.load(f)
    graph = PoseGraph(fixed_id=data["fixed_id"])
    for nid, vals in sorted(data["nodes"].items(), key=lambda kv: int(kv[0])):
        graph.add_node(int(nid), Pose(np.array(vals[:4]), np.array(vals[4:])))
    for e in data["edges"]:
        graph.add_edge(
            e["from"], e["to"],
            Pose(np.array(e["rotation"]), np.array(e["translation"])),
            np.array(e["information"]), is_loop=e["is_loop"],
        )
    return graph


def _write_artifacts(cfg: SystemConfig, state: SlamState, frames, report) -> None:
    from .mapper import save_submap

    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    write_trajectory_tum(
        state.est_poses, [f.timestamp for f in frames], os.path.join(out, "trajectory.txt")
    )
    write_report(report, os.path.join(out, "report.json"))
    save_pose_graph_json(state.graph, os.path.join(out, "posegraph.json"))
    write_g2o(state.graph, os.path.join(out, "posegraph.g2o"))
    sm_dir = os.path.join(out, "submaps")
    os.makedirs(sm_dir, exist_ok=True)
    for sm in state.world.submaps:
        save_submap(sm, os.path.join(sm_dir, f"submap_{sm.id:03d}.bin"))
