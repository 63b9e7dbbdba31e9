"""JSONL observation streams and TUM trajectory files.

Stream: one JSON object per line,
``{"frame": int, "pose_est": [tx,ty,tz,qx,qy,qz,qw], "pose_true": [...]?,
"points": [{"p": [x,y,z], "r": [rx,ry,rz], "f": [...]}, ...]}``.
Blank lines are ignored. Floats are written with ``repr`` so a dump/replay
cycle reproduces every value bit for bit.

TUM: ``t tx ty tz qx qy qz qw`` per line, ``#`` comments allowed. The
timestamp column holds the integer frame index.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

import numpy as np

from .errors import StreamFormatError
from .geometry import Pose
from .pipeline import FrameInput

if TYPE_CHECKING:
    from .simulator import FrameObservation


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def observation_record(obs: FrameObservation, with_truth: bool = True) -> dict:
    rec = {"frame": int(obs.frame_index), "pose_est": obs.estimated_pose.to_tum()}
    if with_truth:
        rec["pose_true"] = obs.true_pose.to_tum()
    P, R, F = obs.positions.tolist(), obs.rays.tolist(), obs.features.tolist()
    rec["points"] = [{"p": P[i], "r": R[i], "f": F[i]} for i in range(len(P))]
    return rec


def frame_record(fr: FrameInput) -> dict:
    rec = {"frame": fr.frame, "pose_est": fr.pose_est.to_tum()}
    if fr.pose_true is not None:
        rec["pose_true"] = fr.pose_true.to_tum()
    P, R, F = fr.positions.tolist(), fr.rays.tolist(), fr.features.tolist()
    rec["points"] = [{"p": P[i], "r": R[i], "f": F[i]} for i in range(len(P))]
    return rec


def _vec(v, n: int, what: str, line: int | None) -> list[float]:
    if not isinstance(v, list) or len(v) != n:
        raise StreamFormatError(f"{what} must be a list of {n} numbers", line)
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise StreamFormatError(f"{what} holds a non-finite or non-numeric value", line)
        out.append(float(x))
    return out


def _pose(v, what: str, line: int | None) -> Pose:
    vals = _vec(v, 7, what, line)
    if not any(vals[3:]):
        raise StreamFormatError(f"{what} has a zero quaternion", line)
    return Pose.from_tum(vals)


def parse_record(rec, line: int | None = None, feature_dim: int | None = None) -> FrameInput:
    """Validate one decoded record. Zero rays are rejected; rays are normalized
    when pointers are built from them."""
    if not isinstance(rec, dict):
        raise StreamFormatError("record must be a JSON object", line)
    for key in ("frame", "pose_est", "points"):
        if key not in rec:
            raise StreamFormatError(f"missing field {key!r}", line)
    unknown = set(rec) - {"frame", "pose_est", "pose_true", "points"}
    if unknown:
        raise StreamFormatError(f"unknown field(s) {sorted(unknown)}", line)
    frame = rec["frame"]
    if isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
        raise StreamFormatError("frame must be a non-negative integer", line)
    pose_est = _pose(rec["pose_est"], "pose_est", line)
    pose_true = _pose(rec["pose_true"], "pose_true", line) if rec.get("pose_true") is not None else None
    pts = rec["points"]
    if not isinstance(pts, list):
        raise StreamFormatError("points must be a list", line)
    n = len(pts)
    P = np.zeros((n, 3))
    R = np.zeros((n, 3))
    F = None
    for i, pt in enumerate(pts):
        if not isinstance(pt, dict) or not {"p", "r", "f"} <= set(pt):
            raise StreamFormatError(f"point {i} must have p, r and f", line)
        P[i] = _vec(pt["p"], 3, f"point {i} p", line)
        R[i] = _vec(pt["r"], 3, f"point {i} r", line)
        if not np.any(R[i]):
            raise StreamFormatError(f"point {i} has a zero ray", line)
        f = pt["f"]
        if feature_dim is None:
            feature_dim = len(f) if isinstance(f, list) else -1
        if F is None:
            F = np.zeros((n, max(feature_dim, 0)))
        F[i] = _vec(f, feature_dim, f"point {i} f", line)
    if F is None:
        F = np.zeros((0, feature_dim or 0))
    return FrameInput(frame, pose_est, pose_true, P, R, F)


def read_stream(path: str | os.PathLike, feature_dim: int | None = None) -> Iterator[FrameInput]:
    """Yield frames from a JSONL file, checking order and feature length."""
    last = None
    seen = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise StreamFormatError(f"malformed JSON: {e.msg}", lineno) from None
            fr = parse_record(rec, lineno, feature_dim)
            if len(fr) and feature_dim is None:
                feature_dim = fr.features.shape[1]
            if last is not None and fr.frame <= last:
                raise StreamFormatError(f"non-monotone frame: expected > {last}, got {fr.frame}", lineno)
            last = fr.frame
            seen = True
            yield fr
    if not seen:
        raise StreamFormatError("empty stream")


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def write_stream(path: str | os.PathLike, records: Iterable[dict]) -> None:
    _atomic_write_text(Path(path), "".join(dumps_record(r) + "\n" for r in records))


def write_tum(path: str | os.PathLike, frames: Iterable[int], poses: Iterable[Pose]) -> None:
    lines = ["# frame tx ty tz qx qy qz qw"]
    for f, p in zip(frames, poses):
        lines.append(" ".join([str(int(f))] + [repr(v) for v in p.to_tum()]))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_tum(path: str | os.PathLike) -> tuple[list[int], list[Pose]]:
    frames, poses = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise StreamFormatError(f"expected 8 columns, got {len(parts)}", lineno)
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                raise StreamFormatError("non-numeric value", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise StreamFormatError("non-finite value", lineno)
            t = vals[0]
            if t != int(t):
                raise StreamFormatError("timestamp must be an integer frame index", lineno)
            if frames and int(t) <= frames[-1]:
                raise StreamFormatError("frame indices must be strictly increasing", lineno)
            if not any(vals[4:]):
                raise StreamFormatError("zero quaternion", lineno)
            frames.append(int(t))
            poses.append(Pose.from_tum(vals[1:]))
    return frames, poses
