"""Memory snapshots as ASCII PLY plus a binary feature sidecar.

The PLY carries one vertex per record with properties ``x y z`` (position),
``nx ny nz`` (the viewing ray, carried in the normal channels), ``frame_index``
and ``id``. Ground-truth clouds use the same channels for surface normals;
readers tell the two apart by the ``feature_dim`` comment. Coordinates are
declared ``double`` and written with the shortest round-tripping repr, so they
round-trip exactly. Features go to ``<stem>.feat`` next to the PLY: little-endian
float32, row-major, ``feature_dim`` values per record, in vertex order. The
sidecar name and dimension are recorded as PLY comments.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import StreamFormatError
from .memory import MemoryConfig, MemoryStore, ScenePointer
from .metrics import PointCloud



def sidecar_path(ply_path: str | os.PathLike) -> Path:
    p = Path(ply_path)
    return p.with_suffix(".feat")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_ply(path: str | os.PathLike, positions: np.ndarray, *, normals: np.ndarray | None = None,
              rays: np.ndarray | None = None, frame_index: np.ndarray | None = None,
              ids: np.ndarray | None = None, comments: list[str] | None = None) -> None:
    path = Path(path)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    cols = [positions]
    header = ["ply", "format ascii 1.0"]
    header += [f"comment {c}" for c in comments or []]
    header.append(f"element vertex {n}")
    header += [f"property double {p}" for p in "xyz"]
    if normals is not None and rays is not None:
        raise ValueError("normals and rays share the nx ny nz channels")
    chan = normals if normals is not None else rays
    if chan is not None:
        cols.append(np.asarray(chan, dtype=np.float64).reshape(-1, 3))
        header += [f"property double n{a}" for a in "xyz"]
    ints = []
    if frame_index is not None:
        ints.append(np.asarray(frame_index, dtype=np.int64))
        header.append("property int frame_index")
    if ids is not None:
        ints.append(np.asarray(ids, dtype=np.int64))
        header.append("property int id")
    header.append("end_header")
    floats = np.hstack(cols)
    lines = header
    for i in range(n):
        row = " ".join(repr(v) for v in floats[i].tolist())
        if ints:
            row += " " + " ".join(str(int(c[i])) for c in ints)
        lines.append(row)
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path: str | os.PathLike) -> dict:
    """Parse an ASCII PLY vertex list into arrays keyed by property name.

    Also returns ``comments``. Unknown properties are kept as float columns.
    """
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise StreamFormatError("not a PLY file", 1)
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise StreamFormatError("only ASCII PLY is supported", 2)
    props: list[tuple[str, str]] = []
    comments: list[str] = []
    n_vertex = None
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment":
            comments.append(line.strip()[len("comment "):])
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
            elif int(parts[2]) != 0:
                raise StreamFormatError(f"unsupported element {parts[1]}", lineno)
        elif parts[0] == "property":
            if in_vertex:
                if len(parts) != 3:
                    raise StreamFormatError("list properties are not supported", lineno)
                props.append((parts[1], parts[2]))
        elif parts[0] == "end_header":
            body_start = lineno
            break
        else:
            raise StreamFormatError(f"unexpected header line {line!r}", lineno)
    if n_vertex is None or body_start is None:
        raise StreamFormatError("missing vertex element or end_header")
    rows = lines[body_start:body_start + n_vertex]
    if len(rows) != n_vertex:
        raise StreamFormatError(f"expected {n_vertex} vertices, found {len(rows)}")
    data = np.zeros((n_vertex, len(props)), dtype=np.float64)
    for i, row in enumerate(rows):
        vals = row.split()
        if len(vals) != len(props):
            raise StreamFormatError(f"expected {len(props)} values", body_start + i + 1)
        try:
            data[i] = [float(v) for v in vals]
        except ValueError as e:
            raise StreamFormatError(str(e), body_start + i + 1) from None
    out: dict = {"comments": comments}
    for j, (typ, name) in enumerate(props):
        col = data[:, j]
        if typ in ("int", "int32", "uint", "uint32", "short", "ushort", "char", "uchar"):
            out[name] = col.astype(np.int64)
        elif typ in ("float", "float32"):
            out[name] = col.astype(np.float32).astype(np.float64)
        else:
            out[name] = col
    return out


def export_store(store: MemoryStore, path: str | os.PathLike) -> None:
    """Write the store to ``path`` (PLY) and its ``.feat`` sidecar."""
    path = Path(path)
    ptrs = list(store.records.values())
    d = store.config.feature_dim
    pos = np.array([p.position for p in ptrs]).reshape(-1, 3)
    rays = np.array([p.ray for p in ptrs]).reshape(-1, 3)
    feats = np.array([p.feature for p in ptrs], dtype="<f4").reshape(-1, d)
    side = sidecar_path(path)
    write_ply(
        path, pos, rays=rays,
        frame_index=np.array([p.frame_index for p in ptrs], dtype=np.int64),
        ids=np.array([p.id for p in ptrs], dtype=np.int64),
        comments=[f"feature_dim {d}", f"feature_sidecar {side.name}"],
    )
    _atomic_write(side, feats.tobytes(order="C"))


def load_pointers(path: str | os.PathLike) -> list[ScenePointer]:
    """Read records written by :func:`export_store`."""
    path = Path(path)
    ply = read_ply(path)
    d = None
    side = sidecar_path(path)
    for c in ply["comments"]:
        key, _, val = c.partition(" ")
        if key == "feature_dim":
            d = int(val)
        elif key == "feature_sidecar":
            side = path.with_name(val)
    if d is None:
        raise StreamFormatError("PLY lacks a feature_dim comment")
    for req in ("x", "y", "z", "nx", "ny", "nz", "frame_index"):
        if req not in ply:
            raise StreamFormatError(f"PLY lacks property {req}")
    n = len(ply["x"])
    raw = np.frombuffer(side.read_bytes(), dtype="<f4")
    if raw.size != n * d:
        raise StreamFormatError(f"sidecar holds {raw.size} floats, expected {n * d}")
    feats = raw.reshape(n, d).astype(np.float64)
    pos = np.stack([ply["x"], ply["y"], ply["z"]], axis=1)
    rays = np.stack([ply["nx"], ply["ny"], ply["nz"]], axis=1)
    ids = ply.get("id", np.arange(n))
    return [
        ScenePointer(pos[i], rays[i], feats[i], int(ply["frame_index"][i]), int(ids[i]))
        for i in range(n)
    ]


def import_store(path: str | os.PathLike, config: MemoryConfig | None = None) -> MemoryStore:
    ptrs = load_pointers(path)
    if config is None:
        d = ptrs[0].feature.shape[0] if ptrs else MemoryConfig().feature_dim
        config = MemoryConfig(feature_dim=d)
    store = MemoryStore(config)
    for p in ptrs:
        store.add(p)
    store.frame_counter = max((p.frame_index for p in ptrs), default=-1)
    return store


def write_cloud(path: str | os.PathLike, cloud: PointCloud) -> None:
    write_ply(path, cloud.positions, normals=cloud.normals)


def is_memory_snapshot(ply: dict) -> bool:
    return any(c.startswith("feature_dim ") for c in ply["comments"])


def read_cloud(path: str | os.PathLike) -> PointCloud:
    """Positions as a PointCloud. ``nx ny nz`` become normals unless the file is
    a memory snapshot, where those channels hold rays."""
    ply = read_ply(path)
    for req in ("x", "y", "z"):
        if req not in ply:
            raise StreamFormatError(f"PLY lacks property {req}")
    pos = np.stack([ply["x"], ply["y"], ply["z"]], axis=1)
    normals = None
    if all(k in ply for k in ("nx", "ny", "nz")) and not is_memory_snapshot(ply):
        normals = np.stack([ply["nx"], ply["ny"], ply["nz"]], axis=1)
    try:
        return PointCloud(pos, normals)
    except ValueError as e:
        raise StreamFormatError(str(e)) from None
