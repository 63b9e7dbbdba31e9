"""Trajectory and reconstruction metrics.

ATE is the RMSE of translation residuals after a rigid (no scale) alignment
of the estimate onto ground truth. RPE compares relative motions over a
fixed frame gap. Accuracy is the prediction-to-truth nearest distance,
completeness the reverse; normal consistency is the mean absolute cosine
between each predicted normal and the normal of its nearest truth point.
Medians are lower medians.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateCorrespondenceError
from .geometry import Pose, compose, inverse, rigid_align, transform_point, unit


@dataclass(frozen=True)
class Trajectory:
    frames: tuple[int, ...]
    poses: tuple[Pose, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(int(f) for f in self.frames))
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.frames) != len(self.poses):
            raise ValueError("frames and poses differ in length")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("trajectory frame indices must be strictly increasing")

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], start: int = 0) -> Trajectory:
        return cls(tuple(range(start, start + len(poses))), tuple(poses))

    def __len__(self) -> int:
        return len(self.frames)

    def as_dict(self) -> dict[int, Pose]:
        return dict(zip(self.frames, self.poses))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "positions", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise ValueError("normals and positions differ in length")
            norms = np.linalg.norm(n, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class DistanceStats:
    mean: float
    median: float


@dataclass(frozen=True)
class RPEResult:
    trans: float
    rot: float


@dataclass(frozen=True)
class NormalConsistency:
    mean: float | None
    median: float | None
    n_degenerate: int


@dataclass
class MetricsReport:
    """One evaluation row. ``None`` marks a metric that could not be computed."""

    ate_rmse: float | None = None
    rpe_trans: float | None = None
    rpe_rot: float | None = None
    acc_mean: float | None = None
    acc_median: float | None = None
    comp_mean: float | None = None
    comp_median: float | None = None
    nc_mean: float | None = None
    nc_median: float | None = None
    memory_count: int | None = None

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow(["" if v is None else repr(v) for v in asdict(self).values()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> MetricsReport:
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 2 or rows[0] != cls.header():
            raise ValueError("unexpected metrics CSV header")
        vals = {}
        for name, cell in zip(rows[0], rows[1]):
            if cell == "":
                vals[name] = None
            elif name == "memory_count":
                vals[name] = int(cell)
            else:
                vals[name] = float(cell)
        return cls(**vals)

    def pretty(self) -> str:
        lines = []
        for name, v in asdict(self).items():
            if v is None:
                s = "-"
            elif isinstance(v, int):
                s = str(v)
            else:
                s = f"{v:.6f}"
            lines.append(f"{name:>12}: {s}")
        return "\n".join(lines)


def lower_median(values: Iterable[float]) -> float:
    v = sorted(values)
    if not v:
        raise ValueError("median of empty sequence")
    return v[(len(v) - 1) // 2]


def _align_points(src: np.ndarray, dst: np.ndarray) -> Pose:
    """rigid_align that also accepts coincident or collinear point sets.

    For collinear sources any rotation about the line is equally optimal;
    the minimal rotation taking the source direction onto the target
    direction is returned.
    """
    try:
        return rigid_align(src, dst)
    except DegenerateCorrespondenceError:
        pass
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 1e-15:
        return Pose.trans(*(mu_d - mu_s))
    a, b = U[:, 0], Vt[0]
    v = np.cross(a, b)
    c = float(a @ b)
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        if c > 0:
            R = np.eye(3)
        else:
            # 180 degrees about any axis orthogonal to a
            perp = unit(np.cross(a, [1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.cross(a, [0.0, 1.0, 0.0]))
            R = 2.0 * np.outer(perp, perp) - np.eye(3)
    else:
        K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
        R = np.eye(3) + K + K @ K * ((1 - c) / (s * s))
    return Pose.from_rt(R, mu_d - R @ mu_s)


def _common(est: Trajectory, gt: Trajectory) -> tuple[list[Pose], list[Pose]]:
    g = gt.as_dict()
    e_out, g_out = [], []
    for f, p in zip(est.frames, est.poses):
        if f in g:
            e_out.append(p)
            g_out.append(g[f])
    return e_out, g_out


def ate(est: Trajectory, gt: Trajectory) -> float:
    e, g = _common(est, gt)
    if len(e) < 2:
        raise ValueError(f"ATE needs at least 2 common frames, got {len(e)}")
    E = np.array([p.translation for p in e])
    G = np.array([p.translation for p in g])
    A = _align_points(E, G)
    res = transform_point(A, E) - G
    return float(math.sqrt(np.mean(np.sum(res * res, axis=1))))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> RPEResult:
    if delta < 1:
        raise ValueError("delta must be >= 1")
    e = est.as_dict()
    g = gt.as_dict()
    t_err, r_err = [], []
    for f in est.frames:
        if f in g and f + delta in e and f + delta in g:
            rel_e = compose(inverse(e[f]), e[f + delta])
            rel_g = compose(inverse(g[f]), g[f + delta])
            E = compose(inverse(rel_g), rel_e)
            t_err.append(float(np.linalg.norm(E.translation)))
            r_err.append(math.degrees(E.angle()))
    if not t_err:
        raise ValueError("no valid frame pairs for RPE")
    return RPEResult(
        trans=math.sqrt(sum(t * t for t in t_err) / len(t_err)),
        rot=math.sqrt(sum(r * r for r in r_err) / len(r_err)),
    )


def _cell_for(points: np.ndarray, k: int = 1) -> float:
    """Cell edge whose occupied cells hold about max(2, k/2) points each."""
    ext = points.max(axis=0) - points.min(axis=0)
    area = 2.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2])
    if area <= 0:
        area = float(ext.max()) ** 2
    if area <= 0:
        return 1.0
    cell = 2.0 * math.sqrt(area / len(points))
    target = max(2.0, 0.5 * k)
    for _ in range(6):
        keys = np.floor(points / cell).astype(np.int64)
        occ = len(points) / len(np.unique(keys, axis=0))
        ratio = target / occ
        if 0.7 < ratio < 1.4:
            break
        cell *= min(max(ratio, 0.125), 8.0) ** 0.5
    return cell


def _cube(r: int) -> np.ndarray:
    g = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


class NearestIndex:
    """Exact batched k-nearest-neighbor queries over a fixed cloud, on a uniform grid.

    A query first scans the cube of cells within Chebyshev radius r of its
    own cell (r = 1, then 2, then 4). Any point outside that cube is at
    least r cell edges away, so a k-th distance strictly below r edges is
    final. Queries still open after r = 4 use a full scan. Ties are broken
    by lower point index.
    """

    LEVELS = (1, 2, 4)
    BLOCK = 4096

    def __init__(self, points: np.ndarray, cell: float | None = None, k_hint: int = 1):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("empty point cloud")
        self.cell = float(cell or _cell_for(self.points, k_hint))
        keys = np.floor(self.points / self.cell).astype(np.int64)
        self._lo = keys.min(axis=0) - 1
        self._dims = keys.max(axis=0) - self._lo + 2
        codes = self._encode(keys)
        self._order = np.argsort(codes, kind="stable")
        self._ucodes, self._starts, self._counts = np.unique(
            codes[self._order], return_index=True, return_counts=True
        )
        self._arange = np.arange(len(self.points))

    def _encode(self, keys: np.ndarray) -> np.ndarray:
        k = keys - self._lo
        return (k[:, 0] * self._dims[1] + k[:, 1]) * self._dims[2] + k[:, 2]

    def _scan(self, X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        D = np.empty((len(X), k))
        I = np.empty((len(X), k), dtype=np.int64)
        step = max(1, 2_000_000 // len(self.points))
        for a in range(0, len(X), step):
            Xa = X[a:a + step]
            d = np.sqrt(np.sum((Xa[:, None, :] - self.points[None, :, :]) ** 2, axis=2))
            kth = np.partition(d, k - 1, axis=1)[:, k - 1]
            rows, cols = np.nonzero(d <= kth[:, None])
            dv = d[rows, cols]
            o = np.lexsort((cols, dv, rows))
            rows, cols, dv = rows[o], cols[o], dv[o]
            rank = np.arange(len(rows)) - np.searchsorted(rows, rows, side="left")
            sel = rank < k
            D[a + rows[sel], rank[sel]] = dv[sel]
            I[a + rows[sel], rank[sel]] = cols[sel]
        return D, I

    def _cube_search(self, X: np.ndarray, k: int, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = len(X)
        qk = np.floor(X / self.cell).astype(np.int64)
        q_parts, s_parts, c_parts = [], [], []
        hi = self._lo + self._dims
        for off in _cube(r):
            nk = qk + off
            qi = np.flatnonzero(np.all((nk >= self._lo) & (nk < hi), axis=1))
            if len(qi) == 0:
                continue
            code = self._encode(nk[qi])
            pos = np.minimum(np.searchsorted(self._ucodes, code), len(self._ucodes) - 1)
            hit = self._ucodes[pos] == code
            q_parts.append(qi[hit])
            s_parts.append(self._starts[pos[hit]])
            c_parts.append(self._counts[pos[hit]])
        D = np.full((m, k), np.inf)
        I = np.full((m, k), -1, dtype=np.int64)
        if q_parts:
            qid = np.concatenate(q_parts)
            start = np.concatenate(s_parts)
            count = np.concatenate(c_parts)
            total = int(count.sum())
            rep_q = np.repeat(qid, count)
            first = np.repeat(np.cumsum(count) - count, count)
            cand = self._order[np.repeat(start, count) + (np.arange(total) - first)]
            d = np.sqrt(np.sum((X[rep_q] - self.points[cand]) ** 2, axis=1))
            o = np.lexsort((cand, d, rep_q))
            rep_q, cand, d = rep_q[o], cand[o], d[o]
            rank = np.arange(total) - np.searchsorted(rep_q, rep_q, side="left")
            sel = rank < k
            D[rep_q[sel], rank[sel]] = d[sel]
            I[rep_q[sel], rank[sel]] = cand[sel]
        return D, I, D[:, k - 1] < r * self.cell

    def query(self, X: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the k nearest points, each of shape (m, k), ascending."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        k = min(int(k), len(self.points))
        if k < 1:
            raise ValueError("k must be >= 1")
        D = np.empty((len(X), k))
        I = np.empty((len(X), k), dtype=np.int64)
        todo = np.arange(len(X))
        for r in self.LEVELS:
            if not len(todo):
                break
            done_parts = []
            for a in range(0, len(todo), self.BLOCK):
                idx = todo[a:a + self.BLOCK]
                d, i, ok = self._cube_search(X[idx], k, r)
                D[idx[ok]], I[idx[ok]] = d[ok], i[ok]
                done_parts.append(idx[~ok])
            todo = np.concatenate(done_parts)
        if len(todo):
            D[todo], I[todo] = self._scan(X[todo], k)
        return D, I

    def knn(self, x: Sequence[float], k: int) -> list[tuple[float, int]]:
        D, I = self.query(np.asarray(x, dtype=np.float64)[None, :], k)
        return [(float(d), int(i)) for d, i in zip(D[0], I[0])]

    def nearest(self, x: Sequence[float]) -> tuple[float, int]:
        return self.knn(x, 1)[0]


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every src point to its nearest dst point."""
    D, _ = NearestIndex(dst).query(src, 1)
    return D[:, 0]


def _cloud_positions(c) -> np.ndarray:
    return c.positions if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)


def accuracy(pred, gt) -> DistanceStats:
    p, g = _cloud_positions(pred), _cloud_positions(gt)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("accuracy requires non-empty clouds")
    d = nearest_distances(p, g)
    return DistanceStats(float(d.mean()), float(lower_median(d)))


def completeness(pred, gt) -> DistanceStats:
    return accuracy(gt, pred)


def estimate_normals(points: np.ndarray, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per-point normal from the smallest-eigenvalue eigenvector of the k-NN covariance.

    Returns ``(normals, valid)``; neighborhoods with no well-defined plane
    (coincident or collinear neighbors) are marked invalid.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < k + 1:
        raise ValueError(f"normal estimation needs at least {k + 1} points, got {len(points)}")
    _, nb = NearestIndex(points, k_hint=k + 1).query(points, k + 1)
    Q = points[nb]
    Q = Q - Q.mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", Q, Q) / (k + 1)
    w, V = np.linalg.eigh(C)
    valid = (w[:, 2] > 0.0) & (w[:, 1] > 1e-12 * w[:, 2])
    normals = np.where(valid[:, None], V[:, :, 0], 0.0)
    return normals, valid


def normal_consistency(pred, gt, k: int = 10) -> NormalConsistency:
    pred = pred if isinstance(pred, PointCloud) else PointCloud(pred)
    gt = gt if isinstance(gt, PointCloud) else PointCloud(gt)
    if pred.normals is not None:
        n_p, v_p = pred.normals, np.ones(len(pred), dtype=bool)
    else:
        n_p, v_p = estimate_normals(pred.positions, k)
    if gt.normals is not None:
        n_g, v_g = gt.normals, np.ones(len(gt), dtype=bool)
    else:
        n_g, v_g = estimate_normals(gt.positions, k)
    _, J = NearestIndex(gt.positions).query(pred.positions, 1)
    j = J[:, 0]
    ok = v_p & v_g[j]
    degenerate = int((~ok).sum())
    if not ok.any():
        return NormalConsistency(None, None, degenerate)
    scores = np.minimum(1.0, np.abs(np.sum(n_p[ok] * n_g[j[ok]], axis=1)))
    return NormalConsistency(float(scores.mean()), float(lower_median(scores.tolist())), degenerate)
