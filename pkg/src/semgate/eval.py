"""Trajectory error statistics and gated-vs-ungated experiments.

Percentiles use fixed index conventions so that results are reproducible
across languages: the median is the lower middle element and the 90th
percentile is nearest-rank.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import factor_graph as fg
from .errors import ConfigParseError, InsufficientMatches, PreconditionError, TimestampMismatch
from .geometry import CameraIntrinsics, Pose3
from .localization import LocalizationOptions, MatcherConfig, localize, resect_pose
from .mapping import LandmarkDatabase, build_map, label_counts
from .semantic import (
    DYNAMIC_CLASSES,
    N_CLASSES,
    Context,
    LabelHistogram,
    accept_all_policy,
    decide_condition,
    default_policy,
)
from .sim import ScenarioConfig, config_from_parser, generate_world, parse_class_map, read_config_file, synthesize
from .trajectory import Trajectory

VARIANTS = ("gated", "ungated")
METRICS = ("rms_3d", "median_3d", "p90_3d", "final_error", "drift_rate")
# differences below this are solver round-off, not an effect of gating
IMPROVEMENT_ATOL = 1e-9


@dataclass(frozen=True)
class ErrorStats:
    rms_3d: float
    median_3d: float
    p90_3d: float
    final_error: float
    path_length: float
    drift_rate: float  # percent
    n: int = 0


def lower_median(x) -> float:
    s = np.sort(np.asarray(x, dtype=float))
    return float(s[(len(s) - 1) // 2])


def nearest_rank(x, pct: int) -> float:
    """Smallest value with at least ``pct`` percent of the samples at or below it."""
    s = np.sort(np.asarray(x, dtype=float))
    rank = max(1, (pct * len(s) + 99) // 100)  # ceil(pct*n/100) in integers
    return float(s[rank - 1])


def drift_rate(final_error: float, path_length: float) -> float:
    if path_length <= 0:
        return 0.0 if final_error == 0 else math.inf
    return 100.0 * final_error / path_length


def path_length(positions) -> float:
    p = np.asarray(positions, dtype=float)
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1))) if len(p) > 1 else 0.0


def compute_stats(estimated: Trajectory, ground_truth: Trajectory) -> ErrorStats:
    if len(estimated) != len(ground_truth) or not np.array_equal(estimated.times, ground_truth.times):
        raise TimestampMismatch(
            f"timestamp mismatch: {len(estimated)} estimated vs {len(ground_truth)} reference samples"
        )
    if len(estimated) == 0:
        raise PreconditionError("cannot evaluate an empty trajectory")
    e = np.linalg.norm(estimated.positions - ground_truth.positions, axis=1)
    length = path_length(ground_truth.positions)
    final = float(e[-1])
    return ErrorStats(
        rms_3d=float(np.sqrt(np.mean(e * e))),
        median_3d=lower_median(e),
        p90_3d=nearest_rank(e, 90),
        final_error=final,
        path_length=length,
        drift_rate=drift_rate(final, length),
        n=len(e),
    )


STATS_HEADER = ["run"] + [f.name for f in fields(ErrorStats)]


def write_stats_csv(rows: dict, path: str | os.PathLike) -> None:
    """``rows`` maps run name to ErrorStats; one CSV row per run."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for run, st in rows.items():
            w.writerow([run] + [_cell(v) for v in asdict(st).values()])


def _cell(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


# ---------------------------------------------------------------------------
# paired comparisons
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSettings:
    matcher: MatcherConfig = field(default_factory=lambda: MatcherConfig(0.8, 0.02))
    solver: fg.SolverOptions = field(default_factory=lambda: fg.SolverOptions(rel_tol=1e-6, max_iters=60))
    map_gating: bool = False  # contaminated maps are the point of the experiment


@dataclass
class SeedRun:
    seed: int
    stats: dict  # variant -> ErrorStats
    trajectories: dict  # variant -> Trajectory
    ground_truth: Trajectory
    map_kept: int
    db: LandmarkDatabase | None = None


@dataclass
class Comparison:
    rows: list  # SeedRun per seed, in seed order
    improvement: dict  # metric -> mean relative improvement, percent
    median_improvement: dict
    wins: int  # seeds where gated RMS < ungated RMS

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.rows]


def relative_improvement(gated: float, ungated: float) -> float:
    """Percent reduction of ``ungated`` achieved by ``gated``."""
    if abs(ungated - gated) <= IMPROVEMENT_ATOL:
        return 0.0
    return 100.0 * (ungated - gated) / ungated


def run_seed(config: ScenarioConfig, seed: int, settings: ExperimentSettings | None = None,
             variants=VARIANTS) -> SeedRun:
    """Simulate two sessions, map the first, localize the second once per variant."""
    settings = settings or ExperimentSettings()
    cfg = config.with_seed(seed)
    world = generate_world(cfg)
    mapping_stream = synthesize(world, cfg, session=0)
    nav_stream = synthesize(world, cfg, session=1, include_gps=False)
    policy = default_policy(Context.MAPPING) if settings.map_gating else accept_all_policy(Context.MAPPING)
    db, _ = build_map(mapping_stream, policy, settings.solver)
    gt = nav_stream.ground_truth()
    stats, trajs = {}, {}
    for v in variants:
        res = localize(
            nav_stream,
            db,
            matcher=settings.matcher,
            options=LocalizationOptions(gating=(v == "gated"), solver=settings.solver),
        )
        trajs[v] = res.trajectory
        stats[v] = compute_stats(res.trajectory, gt)
    return SeedRun(seed, stats, trajs, gt, len(db), db)


def settings_from_parser(cp) -> tuple[list, ExperimentSettings]:
    """Seeds and experiment settings from the optional [matcher] / [experiment] sections."""
    base = ExperimentSettings()
    try:
        matcher = base.matcher
        if cp.has_section("matcher"):
            sec = cp["matcher"]
            matcher = MatcherConfig(
                float(sec.get("match_recall", matcher.match_recall)),
                float(sec.get("false_match_rate", matcher.false_match_rate)),
                parse_class_map(sec.get("dropout_by_class", "")),
            )
        solver = base.solver
        seeds = []
        map_gating = base.map_gating
        if cp.has_section("experiment"):
            sec = cp["experiment"]
            seeds = [int(x) for x in sec.get("seeds", "").replace(",", " ").split()]
            solver = fg.SolverOptions(
                rel_tol=float(sec.get("solver_rel_tol", solver.rel_tol)),
                max_iters=int(sec.get("solver_max_iters", solver.max_iters)),
            )
            map_gating = sec.get("map_gating", "off").strip().lower() in ("on", "true", "1", "yes")
    except ValueError as exc:
        raise ConfigParseError(f"config parse: {exc}") from exc
    return seeds, ExperimentSettings(matcher, solver, map_gating)


def load_experiment(path) -> tuple[ScenarioConfig, list, ExperimentSettings]:
    cp = read_config_file(path)
    config = config_from_parser(cp)
    seeds, settings = settings_from_parser(cp)
    return config, seeds, settings


def _run_seed_job(args):
    return run_seed(*args)


def summarize(rows: list) -> Comparison:
    imp = {m: [] for m in METRICS}
    wins = 0
    for r in rows:
        g, u = r.stats["gated"], r.stats["ungated"]
        for m in METRICS:
            imp[m].append(relative_improvement(getattr(g, m), getattr(u, m)))
        wins += g.rms_3d < u.rms_3d
    return Comparison(
        rows=rows,
        improvement={m: float(np.mean(v)) for m, v in imp.items()},
        median_improvement={m: lower_median(v) for m, v in imp.items()},
        wins=int(wins),
    )


def compare(config: ScenarioConfig, seeds, settings: ExperimentSettings | None = None,
            workers: int | None = None) -> Comparison:
    """Paired gated/ungated runs over ``seeds``; results are reduced in seed order."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise PreconditionError("compare needs at least 2 seeds")
    if len(set(seeds)) != len(seeds):
        raise PreconditionError("compare seeds must be distinct")
    settings = settings or ExperimentSettings()
    workers = workers or min(len(seeds), os.cpu_count() or 1)
    jobs = [(config, s, settings) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_seed_job, jobs))
    else:
        rows = [_run_seed_job(j) for j in jobs]
    return summarize(rows)


COMPARE_HEADER = ["seed", "variant"] + [f.name for f in fields(ErrorStats)]


def write_compare_csv(cmp: Comparison, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in cmp.rows:
            for v in VARIANTS:
                w.writerow([r.seed, v] + [_cell(x) for x in asdict(r.stats[v]).values()])


def write_compare_summary(cmp: Comparison, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean_improvement_pct", "median_improvement_pct", "wins", "seeds"])
        for m in METRICS:
            w.writerow([m, repr(cmp.improvement[m]), repr(cmp.median_improvement[m]),
                        cmp.wins if m == "rms_3d" else "", len(cmp.rows)])


# ---------------------------------------------------------------------------
# resection with displaced dynamic landmarks
# ---------------------------------------------------------------------------


@dataclass
class ResectionStudy:
    seed: int
    frames: np.ndarray
    errors_filtered: np.ndarray
    errors_unfiltered: np.ndarray
    outliers: np.ndarray  # false matches per frame
    outliers_kept: np.ndarray  # of those, how many survived the filter

    def summary(self) -> dict:
        return {
            "filtered_mean": float(np.mean(self.errors_filtered)),
            "filtered_std": float(np.std(self.errors_filtered)),
            "unfiltered_mean": float(np.mean(self.errors_unfiltered)),
            "unfiltered_std": float(np.std(self.errors_unfiltered)),
        }


def _project(P, pose: Pose3, k: CameraIntrinsics):
    pc = pose.transform_to(P)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy])
    return uv, pc


def resection_study(
    config: ScenarioConfig,
    seed: int,
    db: LandmarkDatabase | None = None,
    outlier_fraction: float = 0.1,
    stride: int = 5,
    displacement: tuple = (2.0, 6.0),
    n_outlier_labels: int = 5,
    initial_offset: float = 0.5,
    solver: fg.SolverOptions | None = None,
) -> ResectionStudy:
    """Per-frame resection where a share of the 2D-3D matches point at moved objects.

    Inlier matches are the second session's observations of mapped landmarks
    that did not move. Outliers pair the image of a dynamic landmark, moved by
    a few meters since mapping, with its mapped position. The semantic
    pre-filter drops matches whose live label vote or stored class is invalid.
    """
    cfg = config.with_seed(seed)
    world = generate_world(cfg)
    solver = solver or fg.SolverOptions(rel_tol=1e-10, max_iters=50)
    if db is None:
        db, _ = build_map(synthesize(world, cfg, 0), accept_all_policy(Context.MAPPING), solver)
    stream = synthesize(world, cfg, 1, include_gps=False)
    k = stream.intrinsics
    policy = default_policy(Context.LOCALIZATION)
    rng = np.random.default_rng([int(seed), 3])

    ids, counts = label_counts(stream)
    hist = {lid: LabelHistogram(tuple(row)) for lid, row in zip(ids.tolist(), counts)}
    db_ids = db.ids
    db_pos = db.positions()
    db_cls = db.classes()
    dyn_mask = np.isin(world.classes[db_ids], [int(c) for c in DYNAMIC_CLASSES])
    dyn_ids, dyn_pos = db_ids[dyn_mask], db_pos[dyn_mask]
    moving = world.moving

    def keep(label_hist, db_class) -> bool:
        return decide_condition(label_hist, policy).is_open and policy.accepts(db_class)

    frames, e_f, e_u, n_out_l, n_kept_l = [], [], [], [], []
    for f in range(0, stream.n_frames, stride):
        truth = stream.gt_pose(f)
        sel = np.flatnonzero(stream.obs_frame == f)
        lids = stream.obs_landmark[sel]
        ok = np.isin(lids, db_ids) & ~moving[lids]
        sel, lids = sel[ok], lids[ok]
        pos_idx = np.searchsorted(db_ids, lids)
        matches = [(stream.obs_pixel[o], db_pos[p]) for o, p in zip(sel, pos_idx)]
        kept = [keep(hist[int(l)], db_cls[p]) for l, p in zip(lids, pos_idx)]

        n_out = int(round(outlier_fraction * len(matches) / (1.0 - outlier_fraction)))
        # draw every random quantity even when unused so frames stay paired across settings
        d = rng.uniform(*displacement, size=len(dyn_ids))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=len(dyn_ids))
        shift = np.column_stack([d * np.cos(phi), d * np.sin(phi), np.zeros(len(dyn_ids))])
        uv, pc = _project(dyn_pos + shift, truth, k) if len(dyn_ids) else (np.zeros((0, 2)), np.zeros((0, 3)))
        vis = (pc[:, 2] > 1.0) & (np.linalg.norm(pc, axis=1) <= cfg.max_view_distance) & k.contains(uv)
        cand = np.flatnonzero(vis)
        pick = rng.permutation(cand)[:n_out]
        noise = rng.normal(0.0, cfg.pixel_noise_std, size=(len(pick), 2))
        n_kept = 0
        for j, c in enumerate(pick):
            true_cls = world.classes[dyn_ids[c]]
            wrong = rng.random(n_outlier_labels) < cfg.label_error_rate
            labels = np.where(wrong, (true_cls + rng.integers(1, N_CLASSES, n_outlier_labels)) % N_CLASSES, true_cls)
            matches.append((uv[c] + noise[j], dyn_pos[c]))
            kk = keep(LabelHistogram.from_labels(labels), db_cls[np.searchsorted(db_ids, dyn_ids[c])])
            kept.append(kk)
            n_kept += kk

        axis = rng.normal(size=3)
        xi = np.concatenate([0.01 * axis / np.linalg.norm(axis), initial_offset * rng.normal(size=3) / np.sqrt(3)])
        initial = truth.retract(xi)
        filtered = [m for m, kk in zip(matches, kept) if kk]
        if len(filtered) < 4 or len(pick) == 0:
            continue
        try:
            ru = resect_pose(matches, k, initial, truth, stream.pixel_sigma, solver)
            rf = resect_pose(filtered, k, initial, truth, stream.pixel_sigma, solver)
        except InsufficientMatches:
            continue
        frames.append(f)
        e_u.append(ru.position_error)
        e_f.append(rf.position_error)
        n_out_l.append(len(pick))
        n_kept_l.append(n_kept)

    return ResectionStudy(
        seed=int(seed),
        frames=np.array(frames, dtype=np.int64),
        errors_filtered=np.array(e_f),
        errors_unfiltered=np.array(e_u),
        outliers=np.array(n_out_l, dtype=np.int64),
        outliers_kept=np.array(n_kept_l, dtype=np.int64),
    )
