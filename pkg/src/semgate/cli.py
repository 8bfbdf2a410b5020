"""Command line: ``semgate {simulate,map,localize,evaluate,compare}``.

Every command writes ``manifest.json`` (inputs with their SHA-256, seed,
command line and library versions) into its output directory before any
other artifact, and refuses to reuse a non-empty output directory unless
``--force`` is given. Relative output directories are resolved against
``$SEMGATE_OUTPUT_ROOT`` when it is set. Failures print one JSON line to
stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import eval as ev
from .errors import IoError, NoGps, OutputExists, SemGateError
from .localization import LocalizationOptions, MatcherConfig, localize
from .mapping import build_map, load_db, save_db
from .semantic import ALL_CLASSES, Context, GatePolicy, SemanticClass, default_policy
from .sim import ObservationStream, config_from_parser, generate_world, parse_class_map, read_config_file, synthesize
from .trajectory import Trajectory

OUTPUT_ROOT_ENV = "SEMGATE_OUTPUT_ROOT"
MANIFEST = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_dir(path) -> str:
    """Hash of every regular file below ``path`` (relative names included), manifests excluded."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name != MANIFEST):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def _hash_input(path) -> str:
    p = Path(path)
    if not p.exists():
        raise IoError(f"io error: input {path} does not exist")
    return sha256_dir(p) if p.is_dir() else sha256_file(p)


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {
        "semgate": own,
        "manifest": 1,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def resolve_output(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def prepare_output(out: str, force: bool) -> Path:
    d = resolve_output(out)
    if d.exists() and not d.is_dir():
        raise OutputExists(f"io: {d} exists and is not a directory")
    if d.exists() and any(d.iterdir()) and not force:
        raise OutputExists(f"io: output directory {d} is not empty (use --force to overwrite)")
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"io error: {exc}") from exc
    return d


def write_manifest(out_dir: Path, command: str, argv: list, inputs: dict, seed=None, config=None,
                   output_name: str | None = None) -> dict:
    """``output_name`` is recorded instead of the resolved directory so manifests do not depend on the output root."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": None,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": _hash_input(p)} for name, p in inputs.items()},
        "output_dir": output_name if output_name is not None else str(out_dir),
        "versions": _versions(),
    }
    if config is not None:
        manifest["config"] = {"path": str(config), "sha256": sha256_file(config)}
    _write_json(out_dir / MANIFEST, manifest)
    return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _on_off(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _class_list(text: str) -> frozenset:
    try:
        return frozenset(SemanticClass.parse(c) for c in text.split(",") if c.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _policy(args, context: Context) -> GatePolicy:
    base = default_policy(context)
    if not args.gating:
        return GatePolicy(context, ALL_CLASSES, args.min_observations)
    valid = args.valid_classes if args.valid_classes is not None else base.valid_classes
    return GatePolicy(context, valid, args.min_observations)


def _policy_json(p: GatePolicy) -> dict:
    return {
        "context": p.context.value,
        "valid_classes": sorted(c.label for c in p.valid_classes),
        "min_observations": p.min_observations,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cp = read_config_file(args.config)
    config = config_from_parser(cp)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    out = prepare_output(args.out, args.force)
    write_manifest(out, "simulate", args.argv, {}, config.seed, args.config, output_name=args.out)
    world = generate_world(config)
    streams = {
        "mapping": synthesize(world, config, session=0),
        "navigation": synthesize(world, config, session=1, include_gps=False),
    }
    for name, stream in streams.items():
        stream.save(out / name)
    with open(out / "world.txt", "w", encoding="utf-8") as fh:
        fh.write("id class x y z vx vy vz\n")
        for i, c, p, v in zip(world.ids, world.classes, world.positions, world.velocities):
            fh.write(f"{i} {c} " + " ".join(repr(float(x)) for x in (*p, *v)) + "\n")
    _print(args, {
        name: {"frames": st.n_frames, "observations": len(st.obs_frame), "gps": len(st.gps_time)}
        for name, st in streams.items()
    })
    return 0


def cmd_map(args) -> int:
    stream = ObservationStream.load(args.stream)
    if not stream.has_gps:
        raise NoGps("no GPS in stream")
    policy = _policy(args, Context.MAPPING)
    out = prepare_output(args.out, args.force)
    write_manifest(out, "map", args.argv, {"stream": args.stream}, stream.seed, output_name=args.out)
    db, rep = build_map(stream, policy)
    save_db(db, out / "landmarks.db")
    report = asdict(rep)
    report["landmarks_gated_out"] = {SemanticClass(c).label: n for c, n in rep.landmarks_gated_out.items()}
    report["policy"] = _policy_json(policy)
    _write_json(out / "mapping_report.json", report)
    _print(args, report)
    return 0


def cmd_localize(args) -> int:
    stream = ObservationStream.load(args.stream)
    db = load_db(args.db)
    policy = _policy(args, Context.LOCALIZATION)
    try:
        matcher = MatcherConfig(args.match_recall, args.false_match_rate, parse_class_map(args.dropout or ""))
    except ValueError as exc:
        raise SemGateError(str(exc)) from exc
    options = LocalizationOptions(
        gating=args.gating,
        gate_on_live_labels=args.gate_live_labels,
        gate_on_db_class=args.gate_db_class,
        live_tracks=args.live_tracks,
        matcher_seed=args.matcher_seed,
    )
    out = prepare_output(args.out, args.force)
    seed = stream.seed if args.matcher_seed is None else args.matcher_seed
    write_manifest(out, "localize", args.argv, {"stream": args.stream, "db": args.db}, seed, output_name=args.out)
    res = localize(stream, db, policy, matcher, options)
    res.trajectory.write_csv(out / "trajectory.csv")
    stream.ground_truth().write_csv(out / "groundtruth.csv")
    summary = {
        "policy": _policy_json(policy),
        "matcher": {
            "match_recall": matcher.match_recall,
            "false_match_rate": matcher.false_match_rate,
            "dropout_by_class": {c.label: m for c, m in sorted(matcher.dropout_by_class.items())},
        },
        "matches": int(res.matches_per_frame.sum()),
        "matches_open": int(res.gated_matches_per_frame.sum()),
        "false_matches": res.false_matches,
        "live_tracks": res.live_tracks,
        "live_tracks_open": res.live_tracks_open,
        "iterations": res.report.iterations,
        "initial_cost": res.report.initial_cost,
        "final_cost": res.report.final_cost,
        "converged": res.report.converged,
    }
    _write_json(out / "localization.json", summary)
    with open(out / "matches_per_frame.csv", "w", encoding="utf-8") as fh:
        fh.write("frame,t,matches,matches_open\n")
        for i, (t, a, b) in enumerate(zip(stream.frame_times, res.matches_per_frame, res.gated_matches_per_frame)):
            fh.write(f"{i},{float(t)!r},{a},{b}\n")
    _print(args, summary)
    return 0


def cmd_evaluate(args) -> int:
    est = Trajectory.read_csv(args.estimated)
    gt = Trajectory.read_csv(args.ground_truth)
    out = prepare_output(args.out, args.force)
    write_manifest(out, "evaluate", args.argv, {"estimated": args.estimated, "ground_truth": args.ground_truth}, output_name=args.out)
    stats = ev.compute_stats(est, gt)
    ev.write_stats_csv({args.run_name: stats}, out / "stats.csv")
    _print(args, asdict(stats))
    return 0


def cmd_compare(args) -> int:
    config, seeds, settings = ev.load_experiment(args.config)
    if args.seeds:
        seeds = args.seeds
    out = prepare_output(args.out, args.force)
    write_manifest(out, "compare", args.argv, {}, seeds, args.config, output_name=args.out)
    cmp = ev.compare(config, seeds, settings, workers=args.workers)
    ev.write_compare_csv(cmp, out / "compare.csv")
    ev.write_compare_summary(cmp, out / "compare_summary.csv")
    _print(args, {"wins": cmp.wins, "seeds": len(cmp.rows), "mean_improvement_pct": cmp.improvement})
    return 0


def _print(args, obj) -> None:
    if not args.quiet:
        print(json.dumps(obj, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory (relative to $%s if set)" % OUTPUT_ROOT_ENV)
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("--quiet", action="store_true")


def _gate_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gating", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--valid-classes", type=_class_list, default=None, metavar="A,B,...",
                   help="override the policy's valid classes")
    p.add_argument("--min-observations", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semgate", description="Semantic gated factor-graph experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate mapping and navigation streams from a scenario config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("map", help="build a landmark database from a GPS-aided stream")
    p.add_argument("stream")
    _gate_flags(p)
    _common(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("localize", help="GPS-denied localization against a database")
    p.add_argument("stream")
    p.add_argument("db")
    _gate_flags(p)
    p.add_argument("--gate-live-labels", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--gate-db-class", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--live-tracks", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--match-recall", type=float, default=1.0)
    p.add_argument("--false-match-rate", type=float, default=0.0)
    p.add_argument("--dropout", default=None, metavar="Class:mult,...")
    p.add_argument("--matcher-seed", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="error statistics of an estimated trajectory")
    p.add_argument("estimated")
    p.add_argument("ground_truth")
    p.add_argument("--run-name", default="run")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired gated/ungated runs over several seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except SemGateError as exc:
        msg = str(exc)
        print(json.dumps({"error": exc.kind, "message": msg, "command": args.command}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io error", "message": str(exc), "command": args.command}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
