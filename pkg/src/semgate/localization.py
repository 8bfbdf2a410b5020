"""GPS-denied navigation against a landmark database, and single-frame resection.

Every matched 2D observation of a database landmark becomes its own
MappedLandmark factor against the fixed mapped point. Observations that are
not matched form live feature tracks with their own landmark variables. Both
kinds are gated by the labels of the current run: live tracks with the
tracking policy, database matches with the localization policy (and,
optionally, by the stored database class).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factor_graph as fg
from . import geometry as geo
from .errors import DegenerateGeometry, InsufficientMatches, PreconditionError
from .geometry import CameraIntrinsics, Pose3
from .mapping import LandmarkDatabase, dead_reckon, label_counts, navigation_graph
from .semantic import (
    Context,
    GatePolicy,
    LabelHistogram,
    SemanticClass,
    accept_all_policy,
    decide_condition,
    default_policy,
)
from .sim import ObservationStream
from .trajectory import Trajectory

MIN_RESECTION_MATCHES = 4


@dataclass(frozen=True)
class MatcherConfig:
    match_recall: float = 1.0
    false_match_rate: float = 0.0
    dropout_by_class: dict = field(default_factory=dict)  # SemanticClass -> recall multiplier

    def __post_init__(self):
        for name in ("match_recall", "false_match_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        drop = {SemanticClass.parse(c): float(m) for c, m in dict(self.dropout_by_class).items()}
        for c, m in drop.items():
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"dropout multiplier for {c.label} must lie in [0, 1], got {m}")
        object.__setattr__(self, "dropout_by_class", drop)

    def recall_for(self, cls) -> float:
        return self.match_recall * self.dropout_by_class.get(SemanticClass(int(cls)), 1.0)


@dataclass(frozen=True)
class LocalizationOptions:
    gating: bool = True
    gate_on_live_labels: bool = True
    gate_on_db_class: bool = True
    live_tracks: bool = True
    min_track_length: int = 2
    prior_sigmas: tuple = (1e-3, 0.05)  # start pose (rad, m)
    matcher_seed: int | None = None  # defaults to the stream seed
    solver: fg.SolverOptions = field(default_factory=fg.SolverOptions)


@dataclass
class Matches:
    """Per-observation matching outcome for one stream."""

    obs: np.ndarray  # observation indices that were matched
    db_ids: np.ndarray  # database id each was matched to
    false: np.ndarray  # True where the id was swapped


@dataclass
class LocalizationResult:
    trajectory: Trajectory
    matches_per_frame: np.ndarray  # all database matches
    gated_matches_per_frame: np.ndarray  # matches whose gate is open
    live_tracks: int
    live_tracks_open: int
    false_matches: int
    report: fg.SolveReport

    @property
    def times(self) -> np.ndarray:
        return self.trajectory.times


def match_observations(
    stream: ObservationStream, db: LandmarkDatabase, matcher: MatcherConfig, seed: int
) -> Matches:
    """Id oracle with recall loss and id-swapping false matches."""
    rng = np.random.default_rng([int(seed), 2, int(stream.session)])
    db_ids = db.ids
    n = len(stream.obs_landmark)
    u_recall = rng.random(n)
    u_false = rng.random(n)
    u_swap = rng.random(n)

    in_db = np.isin(stream.obs_landmark, db_ids)
    if len(db_ids):
        cls = np.full(n, -1)
        pos = np.searchsorted(db_ids, stream.obs_landmark[in_db])
        db_cls = db.classes()
        cls[in_db] = db_cls[pos]
        recall = np.zeros(n)
        for c in np.unique(cls[in_db]):
            recall[cls == c] = matcher.recall_for(c)
    else:
        recall = np.zeros(n)
    matched = in_db & (u_recall < recall)
    obs = np.flatnonzero(matched)
    ids = stream.obs_landmark[obs].copy()
    false = (u_false[obs] < matcher.false_match_rate) & (len(db_ids) > 1)
    # a false match swaps in another database landmark seen in the same frame
    # (the matcher's confusion set); the whole database is the fallback
    frame_of = stream.obs_frame
    for j in np.flatnonzero(false):
        o = obs[j]
        same = stream.obs_landmark[in_db & (frame_of == frame_of[o])]
        cands = np.unique(same[same != ids[j]])
        if len(cands) == 0:
            cands = db_ids[db_ids != ids[j]]
        ids[j] = cands[min(int(u_swap[o] * len(cands)), len(cands) - 1)]
    return Matches(obs, ids, false)


def localize(
    stream: ObservationStream,
    db: LandmarkDatabase,
    policy: GatePolicy | None = None,
    matcher: MatcherConfig | None = None,
    options: LocalizationOptions | None = None,
    initial_pose: Pose3 | None = None,
) -> LocalizationResult:
    """Batch GPS-denied smoothing of the whole stream.

    GPS in ``stream`` is ignored. The start pose defaults to the stream's
    ground-truth first pose, standing in for a known departure point.
    """
    options = options or LocalizationOptions()
    matcher = matcher or MatcherConfig()
    policy = policy or default_policy(Context.LOCALIZATION)
    if policy.context is not Context.LOCALIZATION:
        raise PreconditionError(f"localize needs a localization policy, got {policy.context.value}")
    track_policy = default_policy(Context.TRACKING) if options.gating else accept_all_policy(Context.TRACKING)
    start = initial_pose if initial_pose is not None else stream.gt_pose(0)
    k = stream.intrinsics

    odometry = stream.frame_odometry()
    quat, trans = dead_reckon(0, start, odometry[0], odometry[1])
    g = navigation_graph(stream, quat, trans, odometry)
    rot, tr = options.prior_sigmas
    g.add(fg.PriorPose(fg.X(0), start, np.diag([rot**2] * 3 + [tr**2] * 3)))
    pix_cov = np.eye(2) * stream.pixel_sigma**2

    ids, counts = label_counts(stream)
    live_hist = {lid: LabelHistogram(tuple(row)) for lid, row in zip(ids.tolist(), counts)}

    def live_open(lid, pol) -> bool:
        if not options.gating or not options.gate_on_live_labels:
            return True
        return decide_condition(live_hist[lid], pol, lid).is_open

    seed = stream.seed if options.matcher_seed is None else options.matcher_seed
    m = match_observations(stream, db, matcher, seed)

    matches_per_frame = np.zeros(stream.n_frames, dtype=np.int64)
    gated_per_frame = np.zeros(stream.n_frames, dtype=np.int64)
    for o, dbid in zip(m.obs.tolist(), m.db_ids.tolist()):
        lid = int(stream.obs_landmark[o])
        f = int(stream.obs_frame[o])
        entry = db[dbid]
        gate = ("map", lid, dbid)
        if gate not in g.gates:
            is_open = live_open(lid, policy)
            if options.gating and options.gate_on_db_class:
                is_open = is_open and policy.accepts(entry.semantic_class)
            g.add_gate(gate, is_open)
        g.add(fg.GatedFactor(fg.MappedLandmark(fg.X(f), entry.position, stream.obs_pixel[o], pix_cov, k), gate))
        matches_per_frame[f] += 1
        gated_per_frame[f] += g.gates[gate]

    n_tracks = n_tracks_open = 0
    if options.live_tracks:
        unmatched = np.ones(len(stream.obs_frame), dtype=bool)
        unmatched[m.obs] = False
        sel_all = np.flatnonzero(unmatched)
        order = sel_all[np.lexsort((stream.obs_frame[sel_all], stream.obs_landmark[sel_all]))]
        lids = stream.obs_landmark[order]
        bounds = np.flatnonzero(np.diff(lids)) + 1
        R_dr = geo.quat_to_matrix(quat)
        for sel in np.split(order, bounds):
            if len(sel) < options.min_track_length:
                continue
            lid = int(stream.obs_landmark[sel[0]])
            fr = stream.obs_frame[sel]
            try:
                X0 = geo.triangulate_arrays(R_dr[fr], trans[fr], stream.obs_pixel[sel], k)
            except DegenerateGeometry:
                continue
            gate = ("track", lid)
            is_open = live_open(lid, track_policy)
            g.add_variable(fg.L(lid), X0)
            g.add_gate(gate, is_open)
            for o in sel:
                g.add(
                    fg.GatedFactor(
                        fg.Projection(fg.X(int(stream.obs_frame[o])), fg.L(lid), stream.obs_pixel[o], pix_cov, k),
                        gate,
                    )
                )
            n_tracks += 1
            n_tracks_open += is_open

    values, report = fg.solve(g, options.solver)
    poses = [values[fg.X(i)] for i in range(stream.n_frames)]
    return LocalizationResult(
        trajectory=Trajectory.from_poses(stream.frame_times, poses),
        matches_per_frame=matches_per_frame,
        gated_matches_per_frame=gated_per_frame,
        live_tracks=n_tracks,
        live_tracks_open=n_tracks_open,
        false_matches=int(m.false.sum()),
        report=report,
    )


# ---------------------------------------------------------------------------
# resection
# ---------------------------------------------------------------------------


@dataclass
class ResectionResult:
    pose: Pose3
    n_matches: int
    rms_reprojection: float  # px, over matches in front of the camera
    position_error: float | None
    report: fg.SolveReport


def resect_pose(
    matches,
    k: CameraIntrinsics,
    initial: Pose3,
    ground_truth: Pose3 | None = None,
    pixel_sigma: float = 1.0,
    options: fg.SolverOptions | None = None,
) -> ResectionResult:
    """Camera pose from ``(pixel, point)`` correspondences by Levenberg-Marquardt."""
    matches = list(matches)
    if len(matches) < MIN_RESECTION_MATCHES:
        raise InsufficientMatches(
            f"insufficient matches: {len(matches)} < {MIN_RESECTION_MATCHES}"
        )
    g = fg.Graph()
    g.add_variable(fg.X(0), initial)
    cov = np.eye(2) * pixel_sigma**2
    for pixel, point in matches:
        g.add(fg.MappedLandmark(fg.X(0), point, pixel, cov, k))
    values, report = fg.solve(g, options or fg.SolverOptions())
    pose = values[fg.X(0)]

    pts = np.array([np.asarray(p, dtype=float) for _, p in matches])
    pix = np.array([np.asarray(u, dtype=float) for u, _ in matches])
    pc = pose.transform_to(pts)
    front = pc[:, 2] > geo.MIN_DEPTH
    if front.any():
        proj = np.column_stack(
            [k.fx * pc[front, 0] / pc[front, 2] + k.cx, k.fy * pc[front, 1] / pc[front, 2] + k.cy]
        )
        rms = float(np.sqrt(np.mean(np.sum((proj - pix[front]) ** 2, axis=1))))
    else:
        rms = float("inf")
    err = None
    if ground_truth is not None:
        err = float(np.linalg.norm(pose.translation - ground_truth.translation))
    return ResectionResult(pose, len(matches), rms, err, report)
