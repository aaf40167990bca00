"""Command-line entry point: ``apotrack track | genbench | eval | flow``.

Exit codes: 0 on success, 1 for bad input (missing files, invalid config),
2 when a pipeline stage fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import GT_NAME, BenchmarkConfig, generate_sequence, read_ground_truth, write_benchmark
from .config import ConfigError, PipelineConfig, format_config, load_config, parse_config_text, parse_value
from .evaluation import evaluate_run, write_frame_report, write_summary
from .flow import FlowChainCache, estimate_sequence_flows
from .imaging import SequenceError, load_sequence
from .mesh import read_mesh
from .plotting import OVERLAY_NAME, plot_error_curves, plot_scores, render_overlay
from .propagation import read_tracked_meshes, track_sequence, write_tracked

log = logging.getLogger("apotrack")

CACHE_ENV = "APOTRACK_CACHE_DIR"
FLOW_MANIFEST = "flow_params.json"


class InputError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


class _Stage:
    """Context manager that tags failures with a pipeline stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, (InputError, StageError)):
            raise StageError(self.name, exc) from exc
        return False


def _add_dataclass_options(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None,
                           metavar="VALUE")


def _overrides(args, cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            out[f.name] = parse_value(f.name, str(raw), cls)
    return out


def _pipeline_config(args) -> PipelineConfig:
    overrides = _overrides(args, PipelineConfig)
    try:
        file_values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None
    if "workers" not in overrides and "workers" not in file_values:
        overrides["workers"] = os.cpu_count() or 1
    return load_config(args.config, overrides)


def _sequence_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def flow_cache_dir(seq_dir: Path, frame_paths, cfg: PipelineConfig) -> Path:
    """Cache location keyed by frame contents and solver settings."""
    root = Path(cfg.cache_dir) if cfg.cache_dir else seq_dir / "flow_cache"
    key = json.dumps(cfg.flow_key(), sort_keys=True)
    digest = hashlib.sha256((_sequence_digest(frame_paths) + key).encode()).hexdigest()[:20]
    return root / digest


def obtain_flows(seq, seq_dir: Path, cfg: PipelineConfig) -> tuple[FlowChainCache, Path, bool]:
    """Load cached pairwise flows or estimate and store them; returns ``(cache, dir, hit)``."""
    cdir = flow_cache_dir(seq_dir, seq.frame_paths, cfg)
    manifest = cdir / FLOW_MANIFEST
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if meta.get("frame_count") == seq.frame_count and meta.get("params") == cfg.flow_key():
            cache = FlowChainCache.load(cdir, seq.frame_count)
            cache.max_entries = cfg.chain_memo
            log.info("flow cache hit: %s", cdir)
            return cache, cdir, True
    log.info("flow cache miss: estimating %d fields into %s", 2 * (seq.frame_count - 1), cdir)
    cache = estimate_sequence_flows(seq.frames(), cfg.solver_params(), cfg.workers, cfg.chain_memo)
    cache.save(cdir)
    manifest.write_text(json.dumps({"frame_count": seq.frame_count, "params": cfg.flow_key(),
                                    "version": __version__}, indent=2, sort_keys=True) + "\n")
    return cache, cdir, False


def _load_inputs(seq_dir: str, pattern: str):
    try:
        return load_sequence(seq_dir, pattern)
    except (SequenceError, OSError, ValueError) as exc:
        raise InputError(str(exc)) from None


def _write_manifest(out: Path, payload: dict) -> None:
    payload = {"version": __version__, "argv": sys.argv[1:], **payload}
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def cmd_flow(args) -> int:
    cfg = _pipeline_config(args)
    seq = _load_inputs(args.sequence, args.pattern)
    with _Stage("flow"):
        _, cdir, hit = obtain_flows(seq, Path(args.sequence), cfg)
    print(cdir)
    return 0


def cmd_track(args) -> int:
    cfg = _pipeline_config(args)
    seq = _load_inputs(args.sequence, args.pattern)
    try:
        mesh = read_mesh(args.mesh)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read mesh: {exc}") from None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    with _Stage("flow"):
        cache, cdir, hit = obtain_flows(seq, Path(args.sequence), cfg)
    with _Stage("load frames"):
        frames = seq.frames()
    with _Stage("tracking"):
        tracked = track_sequence(frames, mesh, cfg, cache=cache)
    with _Stage("write outputs"):
        write_tracked(out, tracked)
        if tracked.scores:
            anchors = tracked.partition.anchor_indices if tracked.partition else ()
            thr = tracked.partition.threshold if tracked.partition else None
            plot_scores(out / "scores.png", tracked.scores, anchors, thr)
        (out / "config.txt").write_text(format_config(cfg))
        _write_manifest(out, {
            "kind": "track",
            "config": cfg.to_dict(),
            "sequence": str(Path(args.sequence).resolve()),
            "pattern": args.pattern,
            "mesh": str(Path(args.mesh).resolve()),
            "frames": seq.frame_count,
            "flow_cache": str(cdir),
            "flow_cache_hit": hit,
            "anchors": list(tracked.partition.anchor_indices) if tracked.partition else [0],
            "provenance": tracked.provenance_counts(),
            "timings": tracked.timings,
            "elapsed": time.time() - started,
        })
    log.info("tracked %d frames into %s", len(tracked), out)
    return 0


def _benchmark_config(args) -> BenchmarkConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text(), BenchmarkConfig))
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from None
    values.update(_overrides(args, BenchmarkConfig))
    try:
        return BenchmarkConfig(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None


def cmd_genbench(args) -> int:
    bc = _benchmark_config(args)
    out = Path(args.output)
    with _Stage("generate"):
        bench = generate_sequence(bc)
    with _Stage("write outputs"):
        write_benchmark(out, bench)
        (out / "benchmark.txt").write_text(format_config(bc))
    log.info("wrote %d frames, %d points to %s", bc.frames, bench.ground_truth.shape[1], out)
    return 0


def _load_gt(gt_dir: Path) -> list[dict]:
    frames = []
    while (gt_dir / GT_NAME.format(len(frames))).exists():
        frames.append(read_ground_truth(gt_dir / GT_NAME.format(len(frames))))
    if not frames:
        raise InputError(f"no ground-truth files in {gt_dir}")
    return frames


def _load_tracked(path: Path):
    if (path / "mesh_0000.txt").exists():
        return read_tracked_meshes(path)
    if (path / GT_NAME.format(0)).exists():
        return _load_gt(path)
    raise InputError(f"{path} holds neither tracked meshes nor point files")


def _method_name(path: Path) -> str:
    manifest = path / "manifest.json"
    if manifest.exists():
        mode = json.loads(manifest.read_text()).get("config", {}).get("mode")
        if mode:
            return f"{mode}:{path.name}"
    return path.name


def cmd_eval(args) -> int:
    gt_dir = Path(args.gt)
    out = Path(args.output)
    try:
        gt = _load_gt(gt_dir)
        runs = [(Path(t), _load_tracked(Path(t))) for t in args.tracked]
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    with _Stage("evaluate"):
        for path, tracked in runs:
            pts = [m.vertices if hasattr(m, "vertices") else m for m in tracked]
            try:
                rep = evaluate_run(pts, gt, _method_name(path), args.sequence or gt_dir.name)
            except ValueError as exc:
                raise InputError(f"{path}: {exc}") from None
            reports.append(rep)
            write_frame_report(out / f"ee_{path.name}.csv", rep)
            print(f"{rep.method},{rep.sequence},{rep.aee:.6f},{rep.aee_first:.6f}")
    with _Stage("report"):
        write_summary(out / "summary.csv", reports)
        plot_error_curves(out / "ee.png", reports)
        if args.overlays:
            seq = _load_inputs(str(gt_dir), args.pattern)
            for (path, tracked), rep in zip(runs, reports):
                if not hasattr(tracked[0], "edges"):
                    continue
                odir = out / f"overlays_{path.name}"
                odir.mkdir(exist_ok=True)
                for i in range(0, len(tracked), max(args.overlay_every, 1)):
                    gt_pts = np.array([gt[i][k] for k in sorted(gt[i])])
                    render_overlay(odir / OVERLAY_NAME.format(i), seq.frame(i).pixels, tracked[i], gt_pts,
                                   f"frame {i}  EE {rep.mean_ee[i]:.2f}px")
        _write_manifest(out, {"kind": "eval", "gt": str(gt_dir.resolve()),
                              "runs": [str(p.resolve()) for p, _ in runs],
                              "aee": {r.method: r.aee for r in reports}})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apotrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="track a mesh through a frame sequence")
    p.add_argument("sequence", help="directory of frames")
    p.add_argument("mesh", help="reference mesh file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--config", help="key = value pipeline config file")
    p.add_argument("--pattern", default="frame_%04d.png")
    _add_dataclass_options(p, PipelineConfig)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("flow", help="estimate and cache pairwise flows only")
    p.add_argument("sequence")
    p.add_argument("--config")
    p.add_argument("--pattern", default="frame_%04d.png")
    _add_dataclass_options(p, PipelineConfig)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("genbench", help="generate a synthetic benchmark sequence")
    p.add_argument("output")
    p.add_argument("--config", help="key = value benchmark config file")
    _add_dataclass_options(p, BenchmarkConfig)
    p.set_defaults(func=cmd_genbench)

    p = sub.add_parser("eval", help="endpoint error of tracked runs against ground truth")
    p.add_argument("tracked", nargs="+", help="tracked output directories")
    p.add_argument("--gt", required=True, help="directory with gt_%%04d.csv files")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sequence", default="", help="sequence name for the summary table")
    p.add_argument("--overlays", action="store_true", help="render mesh overlays on the frames")
    p.add_argument("--overlay-every", type=int, default=10)
    p.add_argument("--pattern", default="frame_%04d.png")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"apotrack: input error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"apotrack: pipeline failure in {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
