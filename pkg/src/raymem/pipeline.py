"""Streaming memory + loop-closure pipeline.

Frames arrive in the drifted odometry frame. Each frame is first moved by the
most recent pose correction, integrated into the memory, and, when the frame
produced aggregated loop candidates, the whole pose graph is re-solved, the
memory is re-anchored and the loop region is sparsified. An open-loop shadow
memory receives the raw frames with the same seed, which is exactly what the
memory would hold with loop closure disabled; it provides the "pre" map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLoopError
from .geometry import Pose, compose, inverse, rotate_dir, transform_point
from .loop_closure import (
    AggregationReport,
    LoopClosureConfig,
    aggregate_candidates,
    build_graph,
    estimate_loop_edge,
    loop_region,
    optimize,
    sparsify,
)
from .memory import MemoryConfig, MemoryStore, ScenePointer, UpdateReport
from .metrics import MetricsReport, PointCloud, Trajectory, accuracy, ate, completeness, normal_consistency, rpe

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FrameInput:
    """One decoded stream frame; positions and rays are in the odometry world frame."""

    frame: int
    pose_est: Pose
    pose_true: Pose | None
    positions: np.ndarray
    rays: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class LoopEvent:
    frame: int
    old_frames: list[int]
    n_candidates: int
    n_edges: int
    n_inliers: int
    initial_cost: float
    final_cost: float
    iterations: int
    n_region: int
    n_removed: int

    def row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PipelineResult:
    frames: list[int]
    odometry: list[Pose]
    corrected: list[Pose]
    truth: list[Pose | None]
    reports: list[UpdateReport]
    events: list[LoopEvent]
    aggregation: AggregationReport
    store: MemoryStore
    open_loop: MemoryStore

    def trajectory_pre(self) -> Trajectory:
        return Trajectory(self.frames, self.odometry)

    def trajectory_post(self) -> Trajectory:
        return Trajectory(self.frames, self.corrected)

    def trajectory_true(self) -> Trajectory | None:
        pairs = [(f, p) for f, p in zip(self.frames, self.truth) if p is not None]
        if not pairs:
            return None
        return Trajectory([f for f, _ in pairs], [p for _, p in pairs])


class StreamPipeline:
    _IDENTITY = Pose.identity()

    def __init__(self, memory: MemoryConfig, loop: LoopClosureConfig):
        self.memory_config = memory
        self.loop_config = loop
        self.store = MemoryStore(memory)
        self.open_loop = MemoryStore(memory) if loop.enabled else self.store
        self.frames: list[int] = []
        self.odometry: list[Pose] = []
        self.corrected: list[Pose] = []
        self.truth: list[Pose | None] = []
        self.reports: list[UpdateReport] = []
        self.events: list[LoopEvent] = []
        self.aggregation = AggregationReport()
        self._loop_edges: list[tuple[int, int, Pose]] = []
        self._node_of: dict[int, int] = {}
        # correction that maps odometry onto the refined frame; changes only at loop events
        self._delta = self._IDENTITY

    @staticmethod
    def _pointers(fr: FrameInput, positions: np.ndarray, rays: np.ndarray) -> list[ScenePointer]:
        return [ScenePointer(positions[i], rays[i], fr.features[i], fr.frame) for i in range(len(positions))]

    def process(self, fr: FrameInput) -> UpdateReport:
        delta = self._delta
        raw = self._pointers(fr, fr.positions, fr.rays)
        if delta is self._IDENTITY:
            moved = raw
        else:
            moved = self._pointers(
                fr,
                transform_point(delta, fr.positions).reshape(-1, 3),
                rotate_dir(delta, fr.rays).reshape(-1, 3),
            )
        report = self.store.insert_frame(moved, fr.frame)
        if self.open_loop is not self.store:
            self.open_loop.insert_frame(raw, fr.frame)

        self._node_of[fr.frame] = len(self.frames)
        self.frames.append(fr.frame)
        self.odometry.append(fr.pose_est)
        self.corrected.append(fr.pose_est if delta is self._IDENTITY else compose(delta, fr.pose_est))
        self.truth.append(fr.pose_true)
        self.reports.append(report)

        if self.loop_config.enabled and report.loop_hits:
            self._close_loops(fr.frame, report)
        return report

    def _close_loops(self, frame: int, report: UpdateReport) -> None:
        cfg = self.loop_config
        candidates = aggregate_candidates(report.loop_hits, self.store, cfg.min_pairs, self.aggregation)
        if not candidates:
            return
        by_frame = dict(zip(self.frames, self.corrected))
        accepted = []
        n_inliers = 0
        for c in candidates:
            try:
                est = estimate_loop_edge(c)
            except DegenerateLoopError as e:
                log.debug("frame %d: dropped loop %d->%d: %s", frame, c.old_frame, c.new_frame, e)
                continue
            Z = est.measurement(by_frame)
            self._loop_edges.append((self._node_of[c.old_frame], self._node_of[c.new_frame], Z))
            accepted.append(c)
            n_inliers += est.n_inliers
        if not accepted:
            return
        g = build_graph(
            self.odometry,
            self._loop_edges,
            odom_info_scale=cfg.odom_info_scale,
            loop_info_scale=cfg.loop_info_scale,
            initial=self.corrected,
        )
        res = optimize(g, max_iters=cfg.max_iters, tol=cfg.tol, huber=cfg.huber_scale)
        self.store.reanchor(dict(zip(self.frames, res.deltas)))
        self.corrected = list(res.poses)
        self._delta = compose(self.corrected[-1], inverse(self.odometry[-1]))
        region = loop_region(self.store, accepted)
        sp = sparsify(self.store, region, cfg.keep_fraction, cfg.info_k)
        ev = LoopEvent(
            frame=frame,
            old_frames=sorted({c.old_frame for c in accepted}),
            n_candidates=len(candidates),
            n_edges=len(accepted),
            n_inliers=n_inliers,
            initial_cost=res.initial_cost,
            final_cost=res.final_cost,
            iterations=res.iterations,
            n_region=sp.n_region,
            n_removed=len(sp.removed),
        )
        self.events.append(ev)
        log.info(
            "frame %d: closed %d loop edge(s), cost %.3g -> %.3g in %d it, sparsified %d/%d",
            frame, ev.n_edges, ev.initial_cost, ev.final_cost, ev.iterations, ev.n_removed, ev.n_region,
        )

    def result(self) -> PipelineResult:
        return PipelineResult(
            list(self.frames), list(self.odometry), list(self.corrected), list(self.truth),
            list(self.reports), list(self.events), self.aggregation, self.store, self.open_loop,
        )


@dataclass(frozen=True)
class EvalSettings:
    rpe_delta: int = 1
    nc_k: int = 10

    def __post_init__(self):
        if self.rpe_delta < 1 or self.nc_k < 1:
            raise ValueError("eval.rpe_delta and eval.nc_k must be >= 1")


@dataclass
class Evaluation:
    pre: MetricsReport
    post: MetricsReport
    notes: list[str] = field(default_factory=list)


def _trajectory_metrics(rep: MetricsReport, est: Trajectory, gt: Trajectory | None, delta: int, notes: list[str]):
    if gt is None:
        return
    try:
        rep.ate_rmse = ate(est, gt)
    except ValueError as e:
        notes.append(f"ate: {e}")
    try:
        r = rpe(est, gt, delta)
        rep.rpe_trans, rep.rpe_rot = r.trans, r.rot
    except ValueError as e:
        notes.append(f"rpe: {e}")


def _map_metrics(rep: MetricsReport, store: MemoryStore, gt: PointCloud | None, k: int, notes: list[str]):
    rep.memory_count = len(store)
    if gt is None or len(store) == 0:
        return
    pred = store.positions()
    a = accuracy(pred, gt)
    c = completeness(pred, gt)
    rep.acc_mean, rep.acc_median = a.mean, a.median
    rep.comp_mean, rep.comp_median = c.mean, c.median
    if len(pred) >= k + 1:
        nc = normal_consistency(PointCloud(pred), gt, k)
        rep.nc_mean, rep.nc_median = nc.mean, nc.median
        if nc.n_degenerate:
            notes.append(f"normal consistency skipped {nc.n_degenerate} degenerate neighborhoods")
    else:
        notes.append("normal consistency needs more points than k")


def evaluate(res: PipelineResult, gt_cloud: PointCloud | None, settings: EvalSettings = EvalSettings()) -> Evaluation:
    notes: list[str] = []
    gt_traj = res.trajectory_true()
    pre, post = MetricsReport(), MetricsReport()
    _trajectory_metrics(pre, res.trajectory_pre(), gt_traj, settings.rpe_delta, notes)
    _trajectory_metrics(post, res.trajectory_post(), gt_traj, settings.rpe_delta, notes)
    _map_metrics(pre, res.open_loop, gt_cloud, settings.nc_k, notes)
    if res.open_loop is res.store:
        post.acc_mean, post.acc_median = pre.acc_mean, pre.acc_median
        post.comp_mean, post.comp_median = pre.comp_mean, pre.comp_median
        post.nc_mean, post.nc_median, post.memory_count = pre.nc_mean, pre.nc_median, pre.memory_count
    else:
        _map_metrics(post, res.store, gt_cloud, settings.nc_k, notes)
    return Evaluation(pre, post, notes)
