"""Ray-aware scene memory.

A :class:`MemoryStore` holds :class:`ScenePointer` records (position, viewing
ray, feature, creation frame) indexed by a uniform grid whose cell edge equals
the conflict search radius. Each incoming observation is classified against
its nearest neighbor by joint distance and then inserted, retained-or-replaced,
or inserted and flagged as a loop hit.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FrameOrderError, StaleIdError
from .geometry import Pose, rotate_dir, transform_point, unit
from .grid import UniformGrid

log = logging.getLogger(__name__)

UPDATE_POLICIES = ("retain_or_replace", "retain", "replace", "append")


@dataclass(frozen=True)
class MemoryConfig:
    """Tunables of the memory and of the observation classifier.

    ``lambda_pos`` and ``lambda_ang`` default to 1 and 0.1. ``update_policy``
    selects the redundancy rule: ``retain_or_replace`` (coin flip),
    ``retain`` (always keep existing), ``replace`` (always keep new) or
    ``append`` (keep both; the no-deduplication ablation).
    """

    radius: float = 0.05
    lambda_pos: float = 1.0
    lambda_ang: float = 0.1
    lambda_feat: float = 0.0
    eps_pos: float = 0.05
    eps_ang: float = 0.5
    delta_t: int = 30
    feature_dim: int = 16
    rng_seed: int = 0
    update_policy: str = "retain_or_replace"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ConfigError(f"memory.radius must be > 0, got {self.radius}")
        for name in ("lambda_pos", "lambda_ang", "lambda_feat"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"memory.{name} must be >= 0, got {v}")
        if not self.lambda_pos + self.lambda_ang > 0:
            raise ConfigError("MemoryConfig invariant violated: lambda_pos + lambda_ang must be > 0")
        if not self.eps_pos > 0:
            raise ConfigError(f"memory.eps_pos must be > 0, got {self.eps_pos}")
        if self.eps_pos > self.radius:
            raise ConfigError(
                f"MemoryConfig invariant violated: eps_pos ({self.eps_pos}) must be <= radius ({self.radius})"
            )
        if not 0 < self.eps_ang < 2:
            raise ConfigError(f"memory.eps_ang must be in (0, 2), got {self.eps_ang}")
        if int(self.delta_t) != self.delta_t or self.delta_t < 1:
            raise ConfigError(f"memory.delta_t must be a positive integer, got {self.delta_t}")
        if int(self.feature_dim) != self.feature_dim or self.feature_dim < 1:
            raise ConfigError(f"memory.feature_dim must be a positive integer, got {self.feature_dim}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ConfigError(f"memory.rng_seed must be a 64-bit unsigned integer, got {self.rng_seed}")
        if self.update_policy not in UPDATE_POLICIES:
            raise ConfigError(f"memory.update_policy must be one of {UPDATE_POLICIES}, got {self.update_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ScenePointer:
    """One memory record. ``id`` is -1 until the record is stored."""

    position: np.ndarray
    ray: np.ndarray
    feature: np.ndarray
    frame_index: int
    id: int = -1

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite pointer position")
        r = np.array(self.ray, dtype=np.float64).reshape(3)
        # renormalizing an already-unit ray would perturb it by an ulp
        if not abs(math.sqrt(r @ r) - 1.0) <= 1e-12:
            r = unit(r)
        f = np.array(self.feature, dtype=np.float64).reshape(-1)
        for a in (p, r, f):
            a.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "ray", r)
        object.__setattr__(self, "feature", f)
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")

    def with_id(self, new_id: int) -> ScenePointer:
        # fields are already validated and read-only; skip __post_init__
        out = object.__new__(ScenePointer)
        for name, v in (("position", self.position), ("ray", self.ray), ("feature", self.feature),
                        ("frame_index", self.frame_index), ("id", int(new_id))):
            object.__setattr__(out, name, v)
        return out


class ObservationKind(enum.Enum):
    LOCAL_REDUNDANCY = "LocalRedundancy"
    LOOP_REVISIT = "LoopRevisit"
    NOVEL_GEOMETRY = "NovelGeometry"


@dataclass(frozen=True)
class ObservationClass:
    kind: ObservationKind
    nearest_id: int | None = None
    joint_distance: float = math.inf


class UpdateOutcome(enum.Enum):
    KEPT_EXISTING = "KeptExisting"
    REPLACED_WITH_NEW = "ReplacedWithNew"


@dataclass
class UpdateReport:
    frame_index: int
    n_input: int = 0
    n_added: int = 0
    n_replaced: int = 0
    n_discarded_new: int = 0
    n_loop_flagged: int = 0
    n_novel: int = 0
    n_redundant: int = 0
    loop_hits: list[tuple[ScenePointer, int]] = field(default_factory=list)
    memory_size_after: int = 0

    def row(self) -> dict:
        """Flat summary without the pointer snapshots."""
        return {
            "frame": self.frame_index,
            "n_input": self.n_input,
            "n_added": self.n_added,
            "n_replaced": self.n_replaced,
            "n_discarded_new": self.n_discarded_new,
            "n_loop_flagged": self.n_loop_flagged,
            "memory_size_after": self.memory_size_after,
        }


@dataclass(frozen=True)
class MemoryStats:
    count: int
    per_frame: dict[int, int]
    n_cells: int
    max_cell_occupancy: int
    mean_cell_occupancy: float


def _ray_gap(a, b) -> float:
    # equals 1 - a.b for unit rays, but is exactly 0 for a == b and never negative
    dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
    return 0.5 * (dx * dx + dy * dy + dz * dz)


def _feature_term(fa: np.ndarray, fb: np.ndarray) -> float:
    na = float(np.linalg.norm(fa))
    nb = float(np.linalg.norm(fb))
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - float(fa @ fb) / (na * nb)


def joint_distance(a: ScenePointer, b: ScenePointer, cfg: MemoryConfig) -> float:
    """lambda_pos * ||x_a - x_b|| + lambda_ang * (1 - r_a . r_b) [+ feature term].

    The ray term is evaluated as ||r_a - r_b||^2 / 2, the same quantity for unit rays.
    """
    d_pos = math.dist(a.position.tolist(), b.position.tolist())
    d_ang = _ray_gap(a.ray.tolist(), b.ray.tolist())
    d = cfg.lambda_pos * d_pos + cfg.lambda_ang * d_ang
    if cfg.lambda_feat > 0.0:
        if a.feature.shape != b.feature.shape:
            raise ValueError("feature dimension mismatch")
        d += cfg.lambda_feat * max(_feature_term(a.feature, b.feature), 0.0)
    return d


class MemoryStore:
    """The persistent pointer set plus its spatial index.

    Single writer: mutating methods must not run concurrently with anything
    else. The redundancy coin comes from a numpy PCG64 generator seeded with
    ``config.rng_seed``; exactly one draw is consumed per redundancy conflict
    under the ``retain_or_replace`` policy, in processing order.
    """

    def __init__(self, config: MemoryConfig | None = None):
        self.config = config or MemoryConfig()
        self.records: dict[int, ScenePointer] = {}
        self.grid = UniformGrid(self.config.radius)
        self.rng = np.random.Generator(np.random.PCG64(int(self.config.rng_seed)))
        self.frame_counter = -1
        self._next_id = 0
        self._ray: dict[int, tuple[float, float, float]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, pointer_id: int) -> bool:
        return pointer_id in self.records

    def __getitem__(self, pointer_id: int) -> ScenePointer:
        return self.records[pointer_id]

    def ids(self) -> list[int]:
        return list(self.records)

    def positions(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 3))
        return np.array([p.position for p in self.records.values()])

    def rays(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 3))
        return np.array([p.ray for p in self.records.values()])

    # storage primitives

    def _add(self, ptr: ScenePointer) -> ScenePointer:
        if ptr.feature.shape[0] != self.config.feature_dim:
            raise ValueError(f"feature length {ptr.feature.shape[0]} != feature_dim {self.config.feature_dim}")
        if ptr.id < 0 or ptr.id in self.records:
            ptr = ptr.with_id(self._next_id)
        self._next_id = max(self._next_id, ptr.id + 1)
        self.records[ptr.id] = ptr
        self.grid.insert(ptr.id, ptr.position.tolist())
        self._ray[ptr.id] = tuple(ptr.ray.tolist())
        return ptr

    def add(self, ptr: ScenePointer) -> ScenePointer:
        """Insert unconditionally; returns the stored record with its id."""
        return self._add(ptr)

    def remove(self, pointer_id: int) -> None:
        if pointer_id not in self.records:
            raise StaleIdError(pointer_id)
        del self.records[pointer_id]
        del self._ray[pointer_id]
        self.grid.remove(pointer_id)

    # queries

    def radius_query(self, x: Iterable[float], radius: float | None = None) -> list[int]:
        r = self.config.radius if radius is None else radius
        if not r > 0:
            raise ValueError(f"radius must be positive, got {r}")
        return self.grid.radius_query(x, r)

    def classify(self, new: ScenePointer) -> ObservationClass:
        cfg = self.config
        x = new.position.tolist()
        neighbors = self.grid.radius_query(x, cfg.radius)
        if not neighbors:
            return ObservationClass(ObservationKind.NOVEL_GEOMETRY)
        r = new.ray.tolist()
        pos = self.grid.position
        rays = self._ray
        best_d = math.inf
        best_id = -1
        best_dpos = best_dang = 0.0
        for k in neighbors:
            d_pos = math.dist(x, pos(k))
            d_ang = _ray_gap(r, rays[k])
            d = cfg.lambda_pos * d_pos + cfg.lambda_ang * d_ang
            if cfg.lambda_feat > 0.0:
                d += cfg.lambda_feat * max(_feature_term(new.feature, self.records[k].feature), 0.0)
            if d < best_d or (d == best_d and k < best_id):
                best_d, best_id, best_dpos, best_dang = d, k, d_pos, d_ang
        old = self.records[best_id]
        if (
            best_dpos < cfg.eps_pos
            and best_dang > cfg.eps_ang
            and abs(new.frame_index - old.frame_index) > cfg.delta_t
        ):
            return ObservationClass(ObservationKind.LOOP_REVISIT, best_id, best_d)
        return ObservationClass(ObservationKind.LOCAL_REDUNDANCY, best_id, best_d)

    # updates

    def retain_or_replace(self, new: ScenePointer, existing_id: int) -> UpdateOutcome:
        """Keep exactly one of ``new`` and the existing record, with equal odds."""
        if existing_id not in self.records:
            raise StaleIdError(existing_id)
        policy = self.config.update_policy
        if policy == "retain":
            replace = False
        elif policy == "replace":
            replace = True
        else:
            replace = bool(self.rng.random() < 0.5)
        if replace:
            self.remove(existing_id)
            self._add(new)
            return UpdateOutcome.REPLACED_WITH_NEW
        return UpdateOutcome.KEPT_EXISTING

    def insert_frame(self, observations: Sequence[ScenePointer], frame_index: int | None = None) -> UpdateReport:
        """Integrate one frame of observations, in input order.

        ``frame_index`` defaults to ``frame_counter + 1`` and must exceed the
        last integrated frame; every observation must carry it.
        """
        frame = self.frame_counter + 1 if frame_index is None else int(frame_index)
        if frame <= self.frame_counter:
            raise FrameOrderError(f"> {self.frame_counter}", frame)
        for ob in observations:
            if ob.frame_index != frame:
                raise FrameOrderError(str(frame), ob.frame_index)
        report = UpdateReport(frame_index=frame, n_input=len(observations))
        append_only = self.config.update_policy == "append"
        for ob in observations:
            cls = self.classify(ob)
            if cls.kind is ObservationKind.NOVEL_GEOMETRY:
                self._add(ob)
                report.n_added += 1
                report.n_novel += 1
            elif cls.kind is ObservationKind.LOOP_REVISIT:
                stored = self._add(ob)
                report.n_added += 1
                report.n_loop_flagged += 1
                report.loop_hits.append((stored, cls.nearest_id))
            elif append_only:
                self._add(ob)
                report.n_added += 1
                report.n_redundant += 1
            else:
                report.n_redundant += 1
                if self.retain_or_replace(ob, cls.nearest_id) is UpdateOutcome.REPLACED_WITH_NEW:
                    report.n_added += 1
                    report.n_replaced += 1
                else:
                    report.n_discarded_new += 1
        self.frame_counter = frame
        report.memory_size_after = len(self.records)
        return report

    def reanchor(self, corrections: Mapping[int, Pose]) -> None:
        """Move each record by the pose delta of its creation frame and rebuild the grid."""
        if not corrections:
            return
        old = self.records
        self.records = {}
        self._ray = {}
        self.grid = UniformGrid(self.config.radius)
        by_frame: dict[int, list[ScenePointer]] = {}
        for p in old.values():
            by_frame.setdefault(p.frame_index, []).append(p)
        moved: dict[int, ScenePointer] = {}
        for f, ptrs in by_frame.items():
            delta = corrections.get(f)
            if delta is None:
                for p in ptrs:
                    moved[p.id] = p
                continue
            P = transform_point(delta, np.array([p.position for p in ptrs]))
            R = rotate_dir(delta, np.array([p.ray for p in ptrs]))
            for p, x, r in zip(ptrs, P, R):
                moved[p.id] = ScenePointer(x, r, p.feature, p.frame_index, p.id)
        for pid in old:
            self._add(moved[pid])

    def stats(self) -> MemoryStats:
        occ = self.grid.occupancy()
        per_frame = dict(sorted(Counter(p.frame_index for p in self.records.values()).items()))
        return MemoryStats(
            count=len(self.records),
            per_frame=per_frame,
            n_cells=len(occ),
            max_cell_occupancy=max(occ.values(), default=0),
            mean_cell_occupancy=(sum(occ.values()) / len(occ)) if occ else 0.0,
        )

    def check_invariants(self) -> None:
        """Raise AssertionError if the grid and the record set disagree."""
        assert len(self.grid) == len(self.records)
        for pid, p in self.records.items():
            assert self.grid.cell_of(p.position.tolist()) == self.grid.cell_of(self.grid.position(pid))
            assert pid in self.grid.keys_in_cell(self.grid.cell_of(p.position.tolist()))


def classify(store: MemoryStore, new: ScenePointer) -> ObservationClass:
    return store.classify(new)


def radius_query(store: MemoryStore, x: Iterable[float], radius: float) -> list[int]:
    return store.radius_query(x, radius)


def insert_frame(store: MemoryStore, observations: Sequence[ScenePointer]) -> UpdateReport:
    return store.insert_frame(observations)
