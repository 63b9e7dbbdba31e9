"""Command-line entry points: ``simulate``, ``ingest`` and ``eval``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ScenarioConfig, load
from .errors import ConfigError, FrameOrderError, RaymemError, StreamFormatError
from .metrics import MetricsReport, Trajectory, accuracy, ate, completeness, normal_consistency, rpe
from .pipeline import PipelineResult, StreamPipeline, evaluate
from .simulator import generate_scene, ground_truth_cloud, run_scenario
from .snapshot import export_store, read_cloud, write_cloud
from .streamio import frame_record, read_stream, read_tum, write_stream, write_tum

log = logging.getLogger("raymem")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2

ARTIFACTS = (
    "stream.jsonl",
    "memory_final.ply",
    "memory_final.feat",
    "trajectory_pre.txt",
    "trajectory_post.txt",
    "metrics.csv",
    "manifest.json",
)


class InputError(Exception):
    """Bad user input that is not tied to a file format."""


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_config(path: str, seed: int | None) -> ScenarioConfig:
    cfg = load(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def _manifest(command: str, cfg: ScenarioConfig, res: PipelineResult, ev, extra: dict) -> str:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "seeds": cfg.seeds(),
        "versions": {"raymem": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "frames": [r.row() for r in res.reports],
        "loop_events": [e.row() for e in res.events],
        "aggregation": dict(res.aggregation.__dict__),
        "metrics": {"pre": ev.pre.__dict__, "post": ev.post.__dict__},
        "notes": ev.notes,
        **extra,
    }
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_run(out: Path, command: str, cfg: ScenarioConfig, res: PipelineResult, ev, records, scene=None,
               extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_stream(out / "stream.jsonl", records)
    export_store(res.store, out / "memory_final.ply")
    write_tum(out / "trajectory_pre.txt", res.frames, res.odometry)
    write_tum(out / "trajectory_post.txt", res.frames, res.corrected)
    if scene is not None:
        write_cloud(out / "scene_gt.ply", ground_truth_cloud(scene))
        t = res.trajectory_true()
        if t is not None:
            write_tum(out / "trajectory_gt.txt", t.frames, t.poses)
    _atomic_text(out / "metrics.csv", ev.post.to_csv())
    _atomic_text(out / "manifest.json", _manifest(command, cfg, res, ev, extra or {}))


def cmd_simulate(config_path: str, out_dir: str, seed: int | None = None) -> int:
    cfg = _load_config(config_path, seed)
    run = run_scenario(cfg.scene, cfg.trajectory, cfg.noise, cfg.memory, cfg.loop, cfg.sensor, cfg.eval,
                       keep_records=True)
    _write_run(Path(out_dir), "simulate", cfg, run.pipeline, run.evaluation, run.records, run.scene)
    print(run.post.pretty())
    return EXIT_OK


def cmd_ingest(stream_path: str, config_path: str, out_dir: str, seed: int | None = None) -> int:
    cfg = _load_config(config_path, seed)
    pipe = StreamPipeline(cfg.memory, cfg.loop)
    records = []
    for fr in read_stream(stream_path, cfg.memory.feature_dim):
        pipe.process(fr)
        records.append(frame_record(fr))
    res = pipe.result()
    scene = generate_scene(cfg.scene) if cfg.has_scene else None
    ev = evaluate(res, ground_truth_cloud(scene) if scene is not None else None, cfg.eval)
    _write_run(Path(out_dir), "ingest", cfg, res, ev, records, scene)
    print(ev.post.pretty())
    return EXIT_OK


def cmd_eval(pred_ply: str, gt_ply: str, out_csv: str, est_traj: str | None = None, gt_traj: str | None = None,
             rpe_delta: int = 1, nc_k: int = 10) -> int:
    if (est_traj is None) != (gt_traj is None):
        raise InputError("--est-traj and --gt-traj must be given together")
    pred = read_cloud(pred_ply)
    gt = read_cloud(gt_ply)
    if len(pred) == 0 or len(gt) == 0:
        raise InputError("point clouds must be non-empty")
    rep = MetricsReport(memory_count=len(pred))
    a, c = accuracy(pred, gt), completeness(pred, gt)
    rep.acc_mean, rep.acc_median, rep.comp_mean, rep.comp_median = a.mean, a.median, c.mean, c.median
    if len(pred) >= nc_k + 1 and (gt.normals is not None or len(gt) >= nc_k + 1):
        nc = normal_consistency(pred, gt, nc_k)
        rep.nc_mean, rep.nc_median = nc.mean, nc.median
    if est_traj is not None:
        est = Trajectory(*read_tum(est_traj))
        ref = Trajectory(*read_tum(gt_traj))
        try:
            rep.ate_rmse = ate(est, ref)
            r = rpe(est, ref, rpe_delta)
            rep.rpe_trans, rep.rpe_rot = r.trans, r.rot
        except ValueError as e:
            raise InputError(str(e)) from None
    out = Path(out_csv)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_text(out, rep.to_csv())
    print(rep.pretty())
    return EXIT_OK


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raymem", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=_u64, default=None, help="override every seed in the config")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--version", action="version", version=f"raymem {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a synthetic scenario and write all artifacts")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    i = sub.add_parser("ingest", help="replay a JSONL observation stream through the pipeline")
    i.add_argument("--stream", required=True)
    i.add_argument("--config", required=True)
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="compare a point cloud (and optionally a trajectory) to ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--est-traj")
    e.add_argument("--gt-traj")
    e.add_argument("--out", required=True)
    e.add_argument("--rpe-delta", type=int, default=1)
    e.add_argument("--nc-k", type=int, default=10)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, args.seed)
        if args.command == "ingest":
            return cmd_ingest(args.stream, args.config, args.out, args.seed)
        return cmd_eval(args.pred, args.gt, args.out, args.est_traj, args.gt_traj, args.rpe_delta, args.nc_k)
    except (ConfigError, StreamFormatError, FrameOrderError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as e:
        print(f"error: {e.strerror}: {e.filename}", file=sys.stderr)
        return EXIT_INPUT
    except (RaymemError, OSError, ValueError, ArithmeticError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
