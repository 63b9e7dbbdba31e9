"""Deterministic synthetic observations standing in for a learned reconstruction front end.

Scenes are lattice-sampled surfaces with true normals, a stable id per point
and a seeded pseudo-random descriptor. Trajectories are planar with a
forward-looking camera (body x forward, z up). Odometry drift is injected by
perturbing every relative step with a constant yaw bias and Gaussian
translation noise; observations are expressed through the drifted pose, so
drift corrupts the map and not only the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .geometry import Pose, compose, inverse, transform_point

if TYPE_CHECKING:
    from .loop_closure import LoopClosureConfig
    from .memory import MemoryConfig
    from .metrics import MetricsReport, PointCloud
    from .pipeline import EvalSettings, Evaluation, PipelineResult

SCENE_KINDS = ("box_room", "corridor", "plane")
TRAJECTORY_KINDS = ("square_loop", "straight_line", "figure_eight")


@dataclass(frozen=True)
class SceneSpec:
    """``extents`` are (x, y, z) sizes in meters; ``plane`` ignores z.

    box_room and corridor are centered on the origin in x and y with the
    floor at z = 0; the corridor runs along x with open ends.
    """

    kind: str = "box_room"
    extents: tuple[float, float, float] = (4.0, 4.0, 3.0)
    spacing: float = 0.1
    seed: int = 0
    feature_dim: int = 16

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"scene.kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if len(self.extents) != 3 or any(not e > 0 for e in self.extents):
            raise ValueError(f"scene.extents must be three positive values, got {self.extents}")
        if not self.spacing > 0:
            raise ValueError(f"scene.spacing must be > 0, got {self.spacing}")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "square_loop"
    n_frames: int = 100
    speed: float = 0.08
    revisit_with_reverse_heading: bool = False
    height: float = 1.2
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"trajectory.kind must be one of {TRAJECTORY_KINDS}, got {self.kind!r}")
        if self.n_frames < 2:
            raise ValueError(f"trajectory.n_frames must be >= 2, got {self.n_frames}")
        if not self.speed > 0:
            raise ValueError(f"trajectory.speed must be > 0, got {self.speed}")


@dataclass(frozen=True)
class NoiseSpec:
    point_noise_sigma: float = 0.0
    odometry_trans_sigma: float = 0.0
    odometry_yaw_bias: float = 0.0  # degrees per frame
    feature_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("point_noise_sigma", "odometry_trans_sigma", "odometry_yaw_bias", "feature_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"noise.{name} must be >= 0")


@dataclass(frozen=True)
class SensorSpec:
    max_range: float = 3.0
    fov_deg: float = 120.0
    cull_backfaces: bool = False

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("sensor.max_range must be > 0")
        if not 0 < self.fov_deg <= 360:
            raise ValueError("sensor.fov_deg must be in (0, 360]")


@dataclass(frozen=True, eq=False)
class Scene:
    positions: np.ndarray
    normals: np.ndarray
    ids: np.ndarray
    descriptors: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def descriptors(ids: np.ndarray, seed: int, dim: int) -> np.ndarray:
    """Hash (seed, id, component) to reals in [-1, 1]."""
    ids = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _splitmix64(np.full(ids.shape, np.uint64(seed % 2**64)) ^ _splitmix64(ids))
        k = np.arange(dim, dtype=np.uint64)
        h = _splitmix64(base[:, None] * np.uint64(0x100000001B3) + k[None, :])
    u = (h >> np.uint64(11)).astype(np.float64) / float(2**53)
    return 2.0 * u - 1.0


def _lattice_counts(extent: float, spacing: float) -> int:
    n = int(round(extent / spacing))
    if abs(n * spacing - extent) > 1e-9 * max(1.0, extent):
        n = int(math.floor(extent / spacing + 1e-9))
    return max(n, 1)


def generate_scene(spec: SceneSpec) -> Scene:
    s = spec.spacing
    nx, ny, nz = (_lattice_counts(e, s) for e in spec.extents)
    if spec.kind == "plane":
        i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
        pts = np.stack([i.ravel() * s - nx * s / 2, j.ravel() * s - ny * s / 2, np.zeros(i.size)], axis=1)
        nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    else:
        i, j, k = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
        i, j, k = i.ravel(), j.ravel(), k.ravel()
        on_x = (i == 0) | (i == nx)
        on_y = (j == 0) | (j == ny)
        on_z = (k == 0) | (k == nz)
        if spec.kind == "box_room":
            mask = on_x | on_y | on_z
        else:
            mask = on_y | on_z
        i, j, k = i[mask], j[mask], k[mask]
        pts = np.stack([i * s - nx * s / 2, j * s - ny * s / 2, k * s], axis=1).astype(np.float64)
        # inward normals; lattice edges and corners average their faces
        nrm = np.zeros_like(pts)
        if spec.kind == "box_room":
            nrm[:, 0] = np.where(i == 0, 1.0, 0.0) - np.where(i == nx, 1.0, 0.0)
        nrm[:, 1] = np.where(j == 0, 1.0, 0.0) - np.where(j == ny, 1.0, 0.0)
        nrm[:, 2] = np.where(k == 0, 1.0, 0.0) - np.where(k == nz, 1.0, 0.0)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    ids = np.arange(len(pts), dtype=np.int64)
    return Scene(pts, nrm, ids, descriptors(ids, spec.seed, spec.feature_dim))


def _planar_pose(x: float, y: float, z: float, yaw: float) -> Pose:
    return Pose.rot_z(yaw, (x, y, z))


def generate_trajectory(spec: TrajectorySpec) -> list[Pose]:
    n, v, h = spec.n_frames, spec.speed, spec.height
    cx, cy = spec.center
    poses = []
    if spec.kind == "straight_line":
        for t in range(n):
            poses.append(_planar_pose(cx + t * v, cy, h, 0.0))
    elif spec.kind == "square_loop":
        side = n * v / 4.0
        x0, y0 = cx - side / 2.0, cy - side / 2.0
        dirs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
        corners = [(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)]
        for t in range(n):
            s = t * v
            leg = min(int(s // side), 3)
            u = s - leg * side
            dx, dy = dirs[leg]
            px, py = corners[leg][0] + u * dx, corners[leg][1] + u * dy
            yaw = math.atan2(dy, dx)
            if spec.revisit_with_reverse_heading and leg == 3:
                yaw = math.pi
            poses.append(_planar_pose(px, py, h, yaw))
    else:
        # Gerono lemniscate sampled uniformly in its parameter; size set so the
        # total length is close to n * speed (length ~ 6.097 a).
        a = n * v / 6.097
        for t in range(n):
            th = 2.0 * math.pi * t / n
            x, y = a * math.sin(th), a * math.sin(th) * math.cos(th)
            dx, dy = a * math.cos(th), a * math.cos(2.0 * th)
            poses.append(_planar_pose(cx + x, cy + y, h, math.atan2(dy, dx)))
    return poses


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *stream]))


def drift_odometry(true_poses: list[Pose], noise: NoiseSpec) -> list[Pose]:
    """est_0 = true_0; est_t = est_{t-1} ∘ perturbed(true relative step)."""
    if not true_poses:
        return []
    if noise.odometry_yaw_bias == 0 and noise.odometry_trans_sigma == 0:
        return list(true_poses)
    rng = _rng(noise.seed, 1)
    bias = Pose.rot_z(math.radians(noise.odometry_yaw_bias))
    est = [true_poses[0]]
    for t in range(1, len(true_poses)):
        step = compose(inverse(true_poses[t - 1]), true_poses[t])
        n = rng.normal(0.0, noise.odometry_trans_sigma, 3) if noise.odometry_trans_sigma > 0 else np.zeros(3)
        perturbed = Pose(compose(step, bias).quat, step.translation + n)
        est.append(compose(est[-1], perturbed))
    return est


@dataclass(frozen=True, eq=False)
class FrameObservation:
    frame_index: int
    estimated_pose: Pose
    true_pose: Pose
    positions: np.ndarray
    rays: np.ndarray
    features: np.ndarray
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.positions)


def visible_mask(scene: Scene, true_pose: Pose, sensor: SensorSpec) -> np.ndarray:
    c = true_pose.translation
    fwd = true_pose.rotation[:, 0]
    d = scene.positions - c
    dist = np.linalg.norm(d, axis=1)
    mask = (dist <= sensor.max_range) & (dist > 0)
    if sensor.fov_deg < 360:
        cos_half = math.cos(math.radians(sensor.fov_deg / 2.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            mask &= (d @ fwd) >= cos_half * dist
    if sensor.cull_backfaces:
        mask &= np.sum(scene.normals * d, axis=1) < 0
    return mask


def observe(
    scene: Scene,
    true_pose: Pose,
    estimated_pose: Pose,
    noise: NoiseSpec,
    sensor: SensorSpec,
    frame_index: int = 0,
) -> FrameObservation:
    mask = visible_mask(scene, true_pose, sensor)
    idx = np.flatnonzero(mask)
    error = compose(estimated_pose, inverse(true_pose))
    x = transform_point(error, scene.positions[idx]).reshape(-1, 3)
    rng = _rng(noise.seed, 2, frame_index)
    if noise.point_noise_sigma > 0:
        x = x + rng.normal(0.0, noise.point_noise_sigma, x.shape)
    c = estimated_pose.translation
    rays = x - c
    norms = np.linalg.norm(rays, axis=1, keepdims=True)
    keep = norms[:, 0] > 0
    idx, x, rays, norms = idx[keep], x[keep], rays[keep], norms[keep]
    rays = rays / norms
    f = scene.descriptors[idx]
    if noise.feature_noise_sigma > 0:
        f = f + rng.normal(0.0, noise.feature_noise_sigma, f.shape)
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    f = np.divide(f, fn, out=np.zeros_like(f), where=fn > 0)
    return FrameObservation(frame_index, estimated_pose, true_pose, x, rays, f, scene.ids[idx])


def generate_stream(
    scene: Scene, trajectory: TrajectorySpec, noise: NoiseSpec, sensor: SensorSpec
) -> list[FrameObservation]:
    true = generate_trajectory(trajectory)
    est = drift_odometry(true, noise)
    return [observe(scene, t, e, noise, sensor, k) for k, (t, e) in enumerate(zip(true, est))]


@dataclass
class ScenarioResult:
    scene: Scene
    pipeline: PipelineResult
    evaluation: Evaluation
    records: list[dict] | None = None

    @property
    def pre(self) -> MetricsReport:
        return self.evaluation.pre

    @property
    def post(self) -> MetricsReport:
        return self.evaluation.post


def ground_truth_cloud(scene: Scene) -> PointCloud:
    from .metrics import PointCloud

    return PointCloud(scene.positions, scene.normals)


def run_scenario(
    scene: SceneSpec,
    trajectory: TrajectorySpec,
    noise: NoiseSpec,
    memory: MemoryConfig,
    loop: LoopClosureConfig,
    sensor: SensorSpec = SensorSpec(),
    settings: EvalSettings | None = None,
    keep_records: bool = False,
) -> ScenarioResult:
    """Simulate a stream and push it through the memory and loop-closure pipeline.

    Every frame goes through the stream-record encoding first, so a run is
    indistinguishable from ingesting its own dumped stream.
    """
    from .pipeline import EvalSettings, StreamPipeline, evaluate
    from .streamio import observation_record, parse_record

    if scene.feature_dim != memory.feature_dim:
        scene = SceneSpec(scene.kind, scene.extents, scene.spacing, scene.seed, memory.feature_dim)
    sc = generate_scene(scene)
    pipe = StreamPipeline(memory, loop)
    records = [] if keep_records else None
    for obs in generate_stream(sc, trajectory, noise, sensor):
        rec = observation_record(obs)
        if records is not None:
            records.append(rec)
        pipe.process(parse_record(rec, feature_dim=memory.feature_dim))
    res = pipe.result()
    ev = evaluate(res, ground_truth_cloud(sc), settings or EvalSettings())
    return ScenarioResult(sc, res, ev, records)
