"""Command line: gen | register | benchmark | export.

Exit codes: 0 success, 1 registration failure, 2 input or parse error. Errors
are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .cloud import as_points, voxel_downsample
from .config import PipelineConfig, apply_env, load_config, parse_config, serialize_config
from .errors import OverlapInfeasible, RegistrationFailed, SGFeatError
from .pipeline import STAGES, evaluate, register_pair
from .registration import summarize
from .scenes import generate_scene, make_pair

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2
GEN_ATTEMPTS = 20


class UsageError(SGFeatError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(path) -> PipelineConfig:
    return load_config(path) if path else apply_env(PipelineConfig())


def _switches(cfg: PipelineConfig, args) -> PipelineConfig:
    off = {k: False for k in ("aug", "hot", "hse") if getattr(args, f"no_{k}", False)}
    return cfg.replace(**off) if off else cfg


# -- gen -------------------------------------------------------------------------------

def suite_pair(spec: io.SuiteSpec, seed: int, i: int):
    """Pair ``i`` of a suite; overlap and both seeds are drawn from (seed, i)."""
    rng = np.random.default_rng([seed, i])
    last = None
    for _ in range(GEN_ATTEMPTS):
        overlap = float(rng.uniform(spec.overlap_min, spec.overlap_max))
        scene_seed, pair_seed = (int(v) for v in rng.integers(0, 2 ** 31, size=2))
        scene = generate_scene(spec.scene(scene_seed))
        try:
            return make_pair(scene, overlap, spec.noise_sigma, pair_seed, spec.tau,
                             np.radians(spec.max_angle_deg), spec.max_translation, io.pair_dirname(i))
        except OverlapInfeasible as e:
            last = e
    raise OverlapInfeasible(f"pair {i}: no feasible draw in {GEN_ATTEMPTS} attempts ({last})")


def cmd_gen(args) -> int:
    spec_path = Path(args.spec)
    spec = io.load_scene_spec(spec_path)
    if args.pairs < 1:
        raise UsageError("--pairs must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(args.pairs):
        pair = suite_pair(spec, args.seed, i)
        io.write_pair(out / io.pair_dirname(i), pair, binary=not args.ascii)
        ids.append(io.pair_dirname(i))
    io.write_json(out / "manifest.json", {"kind": "suite", "seed": args.seed, "pairs": ids,
                                          "spec": spec_path.read_text(encoding="utf-8")})
    return EXIT_OK


# -- register --------------------------------------------------------------------------

def result_record(pair_id: str, res, cfg: PipelineConfig, source: str, target: str, metrics=None) -> dict:
    return {"kind": "result", "pair_id": pair_id, "source": source, "target": target,
            "T_pred": io.transform_to_list(res.transform), "flags": dict(res.flags),
            "config": serialize_config(cfg), "metrics": metrics.as_dict() if metrics else None,
            "stats": res.stats, "failed": res.failed, "timings": {s: res.timings[s] for s in STAGES},
            "dense_corr": io.corr_to_dict(res.dense_corr)}


def cmd_register(args) -> int:
    cfg = _switches(_config(args.config), args)
    src = io.read_ply(args.source)
    tgt = io.read_ply(args.target)
    gt_path = Path(args.gt) if args.gt else Path(args.source).parent / "gt.json"
    res = register_pair(src, tgt, cfg)
    metrics = None
    if args.gt or gt_path.is_file():
        T_gt, gt_corr, _ = io.read_ground_truth(gt_path)
        metrics = evaluate(Path(args.source).parent.name, res, T_gt, gt_corr, src.points, cfg)
    record = result_record(Path(args.source).parent.name, res, cfg, str(Path(args.source).resolve()),
                           str(Path(args.target).resolve()), metrics)
    io.write_json(args.out, record)
    if res.failed:
        raise RegistrationFailed(res.failed)
    return EXIT_OK


# -- benchmark -------------------------------------------------------------------------

COMBINATIONS = tuple(dict(zip(("aug", "hot", "hse"), bits))
                     for bits in itertools.product((True, False), repeat=3))


def _bench_pair(job):
    pair_dir, cfg = job
    pair = io.read_pair(pair_dir)
    res = register_pair(pair.source, pair.target, cfg)
    m = evaluate(Path(pair_dir).name, res, pair.T_gt, pair.gt_corr, pair.source.points, cfg)
    return m, res.timings, res.failed


def run_benchmark(pair_dirs, cfg: PipelineConfig, combos, jobs: int = 1) -> list[dict]:
    rows = []
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        for flags in combos:
            c = cfg.replace(**flags)
            work = [(str(d), c) for d in pair_dirs]
            # map keeps the pair order, so the reduce below is ordered by pair id
            out = list(pool.map(_bench_pair, work)) if pool else [_bench_pair(w) for w in work]
            report = summarize([m for m, _, _ in out], cfg.fmr_threshold)
            row = {"flags": dict(flags), **report.as_dict(),
                   "n_failed": sum(1 for _, _, f in out if f),
                   "timings": {s: float(np.mean([t[s] for _, t, _ in out])) for s in STAGES}}
            rows.append(row)
    finally:
        if pool:
            pool.shutdown()
    return rows


def cmd_benchmark(args) -> int:
    cfg = _config(args.config)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    pairs = io.list_pairs(args.scenes)
    if args.limit:
        pairs = pairs[:args.limit]
    combos = COMBINATIONS if args.ablate else (cfg.flags,)
    rows = run_benchmark(pairs, cfg, combos, args.jobs)
    io.write_json(args.report, {"kind": "benchmark", "ablate": bool(args.ablate), "n_pairs": len(pairs),
                                "config": serialize_config(cfg), "rows": rows})
    return EXIT_OK


# -- export ----------------------------------------------------------------------------

def cmd_export(args) -> int:
    rec = io.read_json(args.result)
    if rec.get("kind") != "result":
        raise UsageError(f"{args.result} is not a register result")
    cfg = parse_config(rec["config"])
    P = io.read_ply(rec["source"]).points
    Q = io.read_ply(rec["target"]).points
    if cfg.dense_voxel > 0:
        P = as_points(voxel_downsample(P, cfg.dense_voxel))
        Q = as_points(voxel_downsample(Q, cfg.dense_voxel))
    corr = io.corr_from_dict(rec["dense_corr"])
    corr.check_range(P.shape[0], Q.shape[0])
    # the target sits beside the source along x so the segments are visible
    gap = 0.2 * max(float(np.ptp(P[:, 0])) if len(P) else 0.0, 1e-3)
    shift = np.zeros(3)
    if len(P) and len(Q):
        shift[0] = P[:, 0].max() - Q[:, 0].min() + gap
    pts = np.vstack([P, Q + shift])
    colors = np.vstack([np.tile([230, 160, 20], (len(P), 1)), np.tile([30, 120, 230], (len(Q), 1))])
    edges = np.column_stack([corr.src, corr.tgt + len(P)])
    io.write_ply(args.out, pts, binary=not args.ascii, colors=colors, edges=edges)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgfeat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate scan pairs from a scene spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ascii", action="store_true", help="write ASCII PLY instead of binary")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("register", help="register one pair of PLY clouds")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--gt", help="ground-truth JSON (default: gt.json next to the source, if present)")
    for k in ("aug", "hot", "hse"):
        r.add_argument(f"--no-{k}", action="store_true")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("benchmark", help="aggregate metrics over a directory of pairs")
    b.add_argument("--scenes", required=True)
    b.add_argument("--config")
    b.add_argument("--report", required=True)
    b.add_argument("--ablate", action="store_true", help="run all 8 AUG/HOT/HSE combinations")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--limit", type=int, default=0, help="use only the first N pairs")
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("export", help="write clouds and correspondences of a result as PLY")
    e.add_argument("--result", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ascii", action="store_true")
    e.set_defaults(func=cmd_export)
    return p


def _fail(code: int, exc: BaseException) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "line", None) is not None:
        doc["line"] = exc.line
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except RegistrationFailed as e:
        return _fail(EXIT_FAILED, e)
    except (SGFeatError, OSError, ValueError) as e:
        return _fail(EXIT_INPUT, e)


if __name__ == "__main__":
    sys.exit(main())
