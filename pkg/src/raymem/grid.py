"""Uniform spatial hash grid over integer-keyed 3D points.

Cells are axis-aligned cubes with edge ``cell``; a point lives in cell
``floor(p / cell)`` per axis. Radius queries scan only the cells overlapping
the query ball; k-nearest queries expand Chebyshev rings of cells until the
k-th best distance is provably final.
"""

from __future__ import annotations

import heapq
import math
from typing import Iterable, Iterator

Cell = tuple[int, int, int]
Point = tuple[float, float, float]


class UniformGrid:
    def __init__(self, cell: float):
        if not cell > 0:
            raise ValueError(f"cell edge must be positive, got {cell}")
        self.cell = float(cell)
        self._cells: dict[Cell, dict[int, None]] = {}
        self._pos: dict[int, Point] = {}
        self._bounds: tuple[Cell, Cell] | None = None

    def __len__(self) -> int:
        return len(self._pos)

    def __contains__(self, key: int) -> bool:
        return key in self._pos

    def cell_of(self, p: Iterable[float]) -> Cell:
        c = self.cell
        x, y, z = p
        return (math.floor(x / c), math.floor(y / c), math.floor(z / c))

    def position(self, key: int) -> Point:
        return self._pos[key]

    def insert(self, key: int, p: Iterable[float]) -> None:
        if key in self._pos:
            raise KeyError(f"duplicate key {key}")
        p = tuple(float(v) for v in p)
        self._pos[key] = p
        self._cells.setdefault(self.cell_of(p), {})[key] = None
        self._bounds = None

    def remove(self, key: int) -> None:
        p = self._pos.pop(key)
        c = self.cell_of(p)
        bucket = self._cells[c]
        del bucket[key]
        if not bucket:
            del self._cells[c]
        self._bounds = None

    def clear(self) -> None:
        self._cells.clear()
        self._pos.clear()
        self._bounds = None

    def occupancy(self) -> dict[Cell, int]:
        return {c: len(b) for c, b in self._cells.items()}

    def keys_in_cell(self, c: Cell) -> list[int]:
        return list(self._cells.get(c, ()))

    def radius_query(self, x: Iterable[float], r: float) -> list[int]:
        """Keys with ||p - x|| < r (strict)."""
        x = tuple(float(v) for v in x)
        lo = self.cell_of((x[0] - r, x[1] - r, x[2] - r))
        hi = self.cell_of((x[0] + r, x[1] + r, x[2] + r))
        out = []
        cells = self._cells
        pos = self._pos
        dist = math.dist
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    bucket = cells.get((i, j, k))
                    if not bucket:
                        continue
                    for key in bucket:
                        if dist(pos[key], x) < r:
                            out.append(key)
        return out

    def _occupied_bounds(self) -> tuple[Cell, Cell]:
        if self._bounds is None:
            keys = list(self._cells)
            lo = tuple(min(c[a] for c in keys) for a in range(3))
            hi = tuple(max(c[a] for c in keys) for a in range(3))
            self._bounds = (lo, hi)  # type: ignore[assignment]
        return self._bounds  # type: ignore[return-value]

    @staticmethod
    def _ring(c: Cell, r: int) -> Iterator[Cell]:
        cx, cy, cz = c
        if r == 0:
            yield c
            return
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if abs(dx) == r or abs(dy) == r:
                    for dz in range(-r, r + 1):
                        yield (cx + dx, cy + dy, cz + dz)
                else:
                    yield (cx + dx, cy + dy, cz - r)
                    yield (cx + dx, cy + dy, cz + r)

    def knn(self, x: Iterable[float], k: int, max_rings: int | None = None) -> list[tuple[float, int]] | None:
        """The k nearest keys as ``(distance, key)``, ascending, ties by key.

        With ``max_rings`` set, returns None when the answer is not provably
        final after scanning that many rings around the query cell.
        """
        if k < 1 or not self._pos:
            return []
        x = tuple(float(v) for v in x)
        c = self.cell_of(x)
        lo, hi = self._occupied_bounds()
        r_max = max(max(abs(c[a] - lo[a]), abs(hi[a] - c[a])) for a in range(3))
        limit = r_max if max_rings is None else min(r_max, max_rings)
        # max-heap of the current k best, keyed by (-dist, -key)
        best: list[tuple[float, int]] = []
        cells = self._cells
        pos = self._pos
        dist = math.dist
        done = False
        for r in range(limit + 1):
            for cc in self._ring(c, r):
                bucket = cells.get(cc)
                if not bucket:
                    continue
                for key in bucket:
                    d = dist(pos[key], x)
                    item = (-d, -key)
                    if len(best) < k:
                        heapq.heappush(best, item)
                    elif item > best[0]:
                        heapq.heapreplace(best, item)
            # points in ring r+1 are at least r*cell away
            if len(best) == k and -best[0][0] <= r * self.cell:
                done = True
                break
        if not done and limit < r_max:
            return None
        return sorted((-d, -key) for d, key in best)

    def nearest(self, x: Iterable[float]) -> tuple[float, int] | None:
        res = self.knn(x, 1)
        return res[0] if res else None
