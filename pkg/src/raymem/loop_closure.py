"""Loop constraints, SE(3) pose-graph refinement and loop-region sparsification.

Loop hits flagged by the memory are grouped per (new frame, old frame). Each
group becomes a rigid correction aligning the new observations onto the old
records. That correction is turned into a relative-pose edge and solved
together with the odometry chain by Gauss-Newton on se(3), with node 0 held
fixed and a Huber kernel on the whitened residual norm.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateCorrespondenceError, DegenerateLoopError, DivergedError
from .geometry import Pose, Twist, adjoint, compose, exp_map, hat, inverse, log_map, rigid_align
from .memory import MemoryStore, ScenePointer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopClosureConfig:
    enabled: bool = True
    min_pairs: int = 5
    odom_info_scale: float = 1.0
    loop_info_scale: float = 10.0
    huber_scale: float | None = 0.1
    max_iters: int = 50
    tol: float = 1e-10
    keep_fraction: float = 0.8
    info_k: int = 10

    def __post_init__(self):
        from .errors import ConfigError

        if self.min_pairs < 3:
            raise ConfigError(f"loop.min_pairs must be >= 3, got {self.min_pairs}")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError(f"loop.keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.info_k < 1:
            raise ConfigError(f"loop.info_k must be >= 1, got {self.info_k}")
        if not (self.odom_info_scale > 0 and self.loop_info_scale > 0):
            raise ConfigError("loop information scales must be > 0")
        if self.huber_scale is not None and not self.huber_scale > 0:
            raise ConfigError("loop.huber_scale must be > 0 or unset")
        if self.max_iters < 0 or not self.tol > 0:
            raise ConfigError("loop.max_iters must be >= 0 and loop.tol > 0")


@dataclass(frozen=True, eq=False)
class LoopPair:
    new_position: np.ndarray
    new_ray: np.ndarray
    old_id: int
    old_position: np.ndarray


@dataclass(frozen=True, eq=False)
class LoopCandidate:
    new_frame: int
    old_frame: int
    pairs: tuple[LoopPair, ...]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class AggregationReport:
    n_hits: int = 0
    n_stale: int = 0
    n_groups: int = 0
    n_dropped_small: int = 0
    n_dropped_degenerate: int = 0


def _non_collinear(points: np.ndarray) -> bool:
    if len(points) < 3:
        return False
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return bool(s[0] > 0 and s[1] > 1e-9 * s[0])


def aggregate_candidates(
    loop_hits: Sequence[tuple[ScenePointer, int]],
    store: MemoryStore,
    min_pairs: int = 5,
    report: AggregationReport | None = None,
) -> list[LoopCandidate]:
    """Group pointer-level hits into frame-pair loop candidates."""
    if min_pairs < 3:
        raise ValueError("min_pairs must be >= 3")
    rep = report if report is not None else AggregationReport()
    rep.n_hits += len(loop_hits)
    delta_t = store.config.delta_t
    groups: dict[tuple[int, int], list[LoopPair]] = {}
    for new, old_id in loop_hits:
        old = store.records.get(old_id)
        if old is None:
            rep.n_stale += 1
            continue
        if abs(new.frame_index - old.frame_index) <= delta_t:
            continue
        groups.setdefault((new.frame_index, old.frame_index), []).append(
            LoopPair(new.position, new.ray, old_id, old.position)
        )
    rep.n_groups += len(groups)
    out = []
    for key in sorted(groups):
        pairs = groups[key]
        if len(pairs) < min_pairs:
            rep.n_dropped_small += 1
            continue
        if not _non_collinear(np.array([p.old_position for p in pairs])):
            rep.n_dropped_degenerate += 1
            continue
        out.append(LoopCandidate(key[0], key[1], tuple(pairs)))
    return out


@dataclass(frozen=True)
class LoopEdgeEstimate:
    new_frame: int
    old_frame: int
    correction: Pose
    n_inliers: int
    n_pairs: int
    rms: float

    def measurement(self, node_poses: Mapping[int, Pose] | Sequence[Pose]) -> Pose:
        """Relative pose old->new implied by moving the new frame by the correction."""
        Pi = node_poses[self.old_frame]
        Pj = node_poses[self.new_frame]
        return compose(inverse(Pi), compose(self.correction, Pj))


def estimate_loop_edge(c: LoopCandidate) -> LoopEdgeEstimate:
    """Rigid correction taking the new observations onto the old records.

    One refit after dropping pairs whose residual exceeds 3x the median.
    """
    src = np.array([p.new_position for p in c.pairs])
    dst = np.array([p.old_position for p in c.pairs])
    try:
        C = rigid_align(src, dst)
        res = np.linalg.norm(src @ C.rotation.T + C.translation - dst, axis=1)
        keep = res <= max(3.0 * float(np.median(res)), 1e-12)
        if not np.all(keep):
            C = rigid_align(src[keep], dst[keep])
    except DegenerateCorrespondenceError as e:
        raise DegenerateLoopError(str(e)) from None
    res = np.linalg.norm(src[keep] @ C.rotation.T + C.translation - dst[keep], axis=1)
    return LoopEdgeEstimate(
        c.new_frame, c.old_frame, C, int(keep.sum()), len(c.pairs), float(np.sqrt(np.mean(res**2)))
    )


@dataclass(frozen=True, eq=False)
class Edge:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray
    kind: str = "odometry"


@dataclass
class PoseGraph:
    """Nodes 0..N-1 (node 0 held fixed) and relative-pose edges.

    ``frames[k]`` is the stream frame index of node k.
    """

    nodes: list[Pose]
    edges: list[Edge] = field(default_factory=list)
    frames: list[int] | None = None

    def __post_init__(self):
        if self.frames is None:
            self.frames = list(range(len(self.nodes)))
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise ValueError(f"edge ({e.i}, {e.j}) references a missing node (graph has {n})")
            if e.kind == "odometry" and e.j != e.i + 1:
                raise ValueError(f"odometry edge ({e.i}, {e.j}) does not connect consecutive nodes")

    def add_edge(self, edge: Edge) -> None:
        n = len(self.nodes)
        if not (0 <= edge.i < n and 0 <= edge.j < n):
            raise ValueError(f"edge ({edge.i}, {edge.j}) references a missing node (graph has {n})")
        self.edges.append(edge)


def build_graph(
    odometry: Sequence[Pose],
    loop_edges: Iterable[tuple[int, int, Pose]] = (),
    odom_info_scale: float = 1.0,
    loop_info_scale: float = 10.0,
    initial: Sequence[Pose] | None = None,
) -> PoseGraph:
    """Chain odometry edges between consecutive poses and append loop edges.

    Loop edges are ``(i, j, Z_ij)`` with ``Z_ij`` the pose of j in i's frame.
    Nodes start at ``initial`` when given, otherwise at the odometry poses.
    """
    odometry = list(odometry)
    if len(odometry) < 2:
        raise ValueError("pose graph needs at least 2 odometry poses")
    nodes = list(initial) if initial is not None else list(odometry)
    if len(nodes) != len(odometry):
        raise ValueError("initial poses and odometry differ in length")
    n = len(odometry)
    I_odo = np.eye(6) * odom_info_scale
    I_loop = np.eye(6) * loop_info_scale
    edges = [
        Edge(k, k + 1, compose(inverse(odometry[k]), odometry[k + 1]), I_odo, "odometry") for k in range(n - 1)
    ]
    for i, j, Z in loop_edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"loop edge ({i}, {j}) out of range for {n} frames")
        edges.append(Edge(int(i), int(j), Z, I_loop, "loop"))
    return PoseGraph(nodes, edges)


def _ad(xi: np.ndarray) -> np.ndarray:
    A = np.zeros((6, 6))
    P = hat(xi[3:])
    A[:3, :3] = P
    A[:3, 3:] = hat(xi[:3])
    A[3:, 3:] = P
    return A


def _jr_inv(xi: np.ndarray) -> np.ndarray:
    A = _ad(xi)
    return np.eye(6) + 0.5 * A + (A @ A) / 12.0


def edge_residual(e: Edge, Pi: Pose, Pj: Pose) -> np.ndarray:
    E = compose(inverse(e.measurement), compose(inverse(Pi), Pj))
    return log_map(E).vector()


def _robust_weight(chi: float, k: float | None) -> tuple[float, float]:
    """(cost, IRLS weight) for a whitened residual norm ``chi``."""
    if k is None or chi <= k:
        return 0.5 * chi * chi, 1.0
    return k * (chi - 0.5 * k), k / chi


def graph_cost(g: PoseGraph, poses: Sequence[Pose] | None = None, huber: float | None = None) -> float:
    poses = g.nodes if poses is None else poses
    total = 0.0
    for e in g.edges:
        r = edge_residual(e, poses[e.i], poses[e.j])
        chi = math.sqrt(max(float(r @ e.information @ r), 0.0))
        total += _robust_weight(chi, huber)[0]
    return total


@dataclass
class OptimizeResult:
    poses: list[Pose]
    deltas: list[Pose]
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def optimize(g: PoseGraph, max_iters: int = 50, tol: float = 1e-10, huber: float | None = 0.1) -> OptimizeResult:
    """Gauss-Newton with right-multiplied updates P <- P exp(dx); node 0 fixed.

    A step is accepted only if it does not raise the cost; a rejected step
    is halved up to 10 times before the solver stops.
    """
    poses = list(g.nodes)
    n = len(poses)
    initial = list(poses)
    cost = graph_cost(g, poses, huber)
    if not math.isfinite(cost):
        raise DivergedError(0)
    initial_cost = cost
    it = 0
    converged = cost == 0.0
    dim = 6 * (n - 1)
    while not converged and it < max_iters and dim > 0:
        it += 1
        H = np.zeros((dim, dim))
        b = np.zeros(dim)
        for e in g.edges:
            Pi, Pj = poses[e.i], poses[e.j]
            r = edge_residual(e, Pi, Pj)
            chi = math.sqrt(max(float(r @ e.information @ r), 0.0))
            w = _robust_weight(chi, huber)[1]
            Jinv = _jr_inv(r)
            Jj = Jinv
            Ji = -Jinv @ adjoint(compose(inverse(Pj), Pi))
            Om = w * e.information
            blocks = []
            if e.i > 0:
                blocks.append((6 * (e.i - 1), Ji))
            if e.j > 0:
                blocks.append((6 * (e.j - 1), Jj))
            for a, Ja in blocks:
                b[a:a + 6] += Ja.T @ Om @ r
                for c, Jc in blocks:
                    H[a:a + 6, c:c + 6] += Ja.T @ Om @ Jc
        try:
            dx = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            dx = -np.linalg.lstsq(H, b, rcond=None)[0]
        if not np.all(np.isfinite(dx)):
            raise DivergedError(it)
        step = 1.0
        accepted = False
        for _ in range(11):
            trial = [poses[0]] + [
                compose(poses[k], exp_map(Twist.from_vector(step * dx[6 * (k - 1):6 * k]))) for k in range(1, n)
            ]
            try:
                new_cost = graph_cost(g, trial, huber)
            except Exception:
                new_cost = math.inf
            if math.isnan(new_cost):
                raise DivergedError(it)
            if new_cost <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        poses = trial
        dcost = cost - new_cost
        cost = new_cost
        if abs(dcost) < tol:
            converged = True
    deltas = [compose(p, inverse(p0)) for p, p0 in zip(poses, initial)]
    return OptimizeResult(poses, deltas, initial_cost, cost, it, converged)


def info_score(store: MemoryStore, region: Iterable[int], k: int = 10) -> dict[int, float]:
    """Ray-diversity score per pointer: sum of the two largest eigenvalues of
    the covariance of the rays of its k nearest spatial neighbors (itself
    included). Identical rays score 0; a 50/50 split between two orthogonal
    rays scores 0.5.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = {}
    for pid in region:
        p = store.records[pid]
        nb = store.grid.knn(p.position.tolist(), k)
        R = np.array([store.records[j].ray for _, j in nb])
        D = R - R.mean(axis=0)
        C = D.T @ D / len(R)
        w = np.linalg.eigvalsh(C)
        scores[pid] = max(float(w[1] + w[2]), 0.0)
    return scores


@dataclass
class SparsifyReport:
    n_region: int
    n_kept: int
    removed: list[int]


def sparsify(store: MemoryStore, region: Iterable[int], keep_fraction: float, k: int = 10) -> SparsifyReport:
    """Keep the ceil(keep_fraction * |region|) highest-scoring pointers of the region."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    region = sorted(set(region))
    n_keep = math.ceil(keep_fraction * len(region) - 1e-12)
    if n_keep >= len(region):
        return SparsifyReport(len(region), len(region), [])
    scores = info_score(store, region, k)
    ranked = sorted(region, key=lambda pid: (-scores[pid], pid))
    removed = sorted(ranked[n_keep:])
    for pid in removed:
        store.remove(pid)
    return SparsifyReport(len(region), n_keep, removed)


def loop_region(store: MemoryStore, candidates: Iterable[LoopCandidate], radius: float | None = None) -> set[int]:
    """Union of radius balls around the old records matched by the candidates."""
    r = store.config.radius if radius is None else radius
    region: set[int] = set()
    for c in candidates:
        for pair in c.pairs:
            old = store.records.get(pair.old_id)
            if old is not None:
                region.update(store.radius_query(old.position.tolist(), r))
                region.add(pair.old_id)
    return region


def _info_upper(I: np.ndarray) -> list[float]:
    return [float(I[a, b]) for a in range(6) for b in range(a, 6)]


def dump_g2o(g: PoseGraph, path: str | os.PathLike | None = None) -> str:
    lines = []
    for k, p in enumerate(g.nodes):
        vals = " ".join(repr(v) for v in p.to_tum())
        lines.append(f"VERTEX_SE3:QUAT {k} {vals}")
    lines.append("FIX 0")
    for e in g.edges:
        vals = " ".join(repr(v) for v in e.measurement.to_tum())
        info = " ".join(repr(v) for v in _info_upper(e.information))
        lines.append(f"EDGE_SE3:QUAT {e.i} {e.j} {vals} {info}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_g2o(text: str) -> PoseGraph:
    """Parse the subset written by :func:`dump_g2o`.

    The first edge from each vertex i to i+1 is tagged odometry; every
    other edge is tagged loop.
    """
    verts: dict[int, Pose] = {}
    raw_edges = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "VERTEX_SE3:QUAT":
            verts[int(parts[1])] = Pose.from_tum(parts[2:9])
        elif tag == "EDGE_SE3:QUAT":
            if len(parts) != 3 + 7 + 21:
                raise ValueError(f"line {lineno}: malformed edge")
            i, j = int(parts[1]), int(parts[2])
            Z = Pose.from_tum(parts[3:10])
            up = [float(v) for v in parts[10:]]
            I = np.zeros((6, 6))
            idx = 0
            for a in range(6):
                for b in range(a, 6):
                    I[a, b] = I[b, a] = up[idx]
                    idx += 1
            raw_edges.append((i, j, Z, I))
        elif tag == "FIX":
            continue
        else:
            raise ValueError(f"line {lineno}: unknown tag {tag}")
    ids = sorted(verts)
    if ids != list(range(len(ids))):
        raise ValueError("vertex ids must be 0..N-1")
    nodes = [verts[k] for k in ids]
    seen_odo: set[int] = set()
    edges = []
    for i, j, Z, I in raw_edges:
        kind = "odometry" if j == i + 1 and i not in seen_odo else "loop"
        if kind == "odometry":
            seen_odo.add(i)
        edges.append(Edge(i, j, Z, I, kind))
    return PoseGraph(nodes, edges)
