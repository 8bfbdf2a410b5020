"""GPS-aided map building and the landmark database file format.

The pipeline first smooths odometry and GPS into keyframe poses, then votes
each landmark's class from its observation labels, triangulates, adds gated
projection factors and re-solves everything jointly. Only landmarks whose
gate is open end up in the database.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import factor_graph as fg
from . import geometry as geo
from .errors import DegenerateGeometry, IoError, NoGps, PreconditionError, SchemaVersionMismatch
from .geometry import Pose3
from .semantic import (
    N_CLASSES,
    Context,
    GatePolicy,
    LabelHistogram,
    SemanticClass,
    decide_condition,
    default_policy,
    mode,
)
from .sim import ObservationStream, level_camera_rotation

DB_VERSION = 1
DB_MAGIC = "semgate-landmark-db"


@dataclass(eq=False)
class LandmarkEntry:
    landmark_id: int
    position: np.ndarray  # (3,)
    semantic_class: SemanticClass
    histogram: LabelHistogram
    keyframes: np.ndarray  # (n,) keyframe ids
    pixels: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.semantic_class = SemanticClass(int(self.semantic_class))
        self.keyframes = np.asarray(self.keyframes, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.keyframes) != len(self.pixels):
            raise ValueError("keyframe and pixel lists differ in length")

    @property
    def observations(self) -> list:
        return list(zip(self.keyframes.tolist(), map(tuple, self.pixels.tolist())))

    def __eq__(self, other):
        if not isinstance(other, LandmarkEntry):
            return NotImplemented
        return (
            self.landmark_id == other.landmark_id
            and self.semantic_class == other.semantic_class
            and self.histogram == other.histogram
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.keyframes, other.keyframes)
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(eq=False)
class LandmarkDatabase:
    """Geo-referenced landmarks plus the optimized keyframe poses they were seen from."""

    entries: dict = field(default_factory=dict)  # landmark id -> LandmarkEntry
    keyframes: dict = field(default_factory=dict)  # keyframe id -> (time, Pose3)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries[k] for k in sorted(self.entries))

    def __contains__(self, landmark_id):
        return landmark_id in self.entries

    def __getitem__(self, landmark_id) -> LandmarkEntry:
        return self.entries[landmark_id]

    @property
    def ids(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def positions(self) -> np.ndarray:
        return np.array([e.position for e in self], dtype=float).reshape(-1, 3)

    def classes(self) -> np.ndarray:
        return np.array([int(e.semantic_class) for e in self], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, LandmarkDatabase):
            return NotImplemented
        if sorted(self.entries) != sorted(other.entries) or sorted(self.keyframes) != sorted(other.keyframes):
            return False
        for k, (t, p) in self.keyframes.items():
            t2, p2 = other.keyframes[k]
            if t != t2 or p != p2:
                return False
        return all(self.entries[k] == other.entries[k] for k in self.entries)


@dataclass
class MappingReport:
    landmarks_in: int
    landmarks_gated_out: dict  # SemanticClass -> count
    landmarks_degenerate: int
    landmarks_kept: int
    final_cost: float
    iterations: int
    converged: bool = True
    navigation_iterations: int = 0

    @property
    def gated_out_total(self) -> int:
        return sum(self.landmarks_gated_out.values())


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------



def initial_pose_from_gps(stream: ObservationStream) -> tuple[int, Pose3]:
    """Level camera at the first GPS fix, heading towards the first fix ≥ 2 m away."""
    frames = stream.gps_frames()
    p0 = stream.gps_pos[0]
    far = np.flatnonzero(np.linalg.norm(stream.gps_pos[:, :2] - p0[:2], axis=1) >= 2.0)
    if len(far) == 0:
        heading = 0.0
    else:
        d = stream.gps_pos[far[0]] - p0
        heading = float(np.arctan2(d[1], d[0]))
    return int(frames[0]), Pose3.from_rt(level_camera_rotation(heading)[0], p0)


def dead_reckon(anchor_frame: int, anchor: Pose3, odo_quat, odo_trans) -> tuple[np.ndarray, np.ndarray]:
    """Chain frame-to-frame odometry outwards from one known pose; returns (quat, trans)."""
    n = len(odo_quat) + 1
    Rz = geo.quat_to_matrix(odo_quat)
    R = np.zeros((n, 3, 3))
    t = np.zeros((n, 3))
    R[anchor_frame], t[anchor_frame] = anchor.R, anchor.translation
    for k in range(anchor_frame, n - 1):
        R[k + 1] = R[k] @ Rz[k]
        t[k + 1] = R[k] @ odo_trans[k] + t[k]
    for k in range(anchor_frame - 1, -1, -1):
        R[k] = R[k + 1] @ Rz[k].T
        t[k] = t[k + 1] - R[k] @ odo_trans[k]
    return geo.matrix_to_quat(R), t


def navigation_graph(stream: ObservationStream, quat, trans, odometry=None) -> fg.Graph:
    """Nav states for every camera frame linked by preintegrated odometry."""
    g = fg.Graph()
    for i in range(stream.n_frames):
        g.add_variable(fg.X(i), Pose3(quat[i], trans[i]))
    oq, ot, oc = odometry if odometry is not None else stream.frame_odometry()
    for k in range(stream.n_frames - 1):
        g.add(fg.Odometry(fg.X(k), fg.X(k + 1), Pose3(oq[k], ot[k]), oc[k]))
    return g


def label_counts(stream: ObservationStream) -> tuple[np.ndarray, np.ndarray]:
    """Unique landmark ids and their (M, 12) label count matrix."""
    ids, inv = np.unique(stream.obs_landmark, return_inverse=True)
    counts = np.zeros((len(ids), N_CLASSES), dtype=np.int64)
    np.add.at(counts, (inv, stream.obs_label), 1)
    return ids, counts


def build_map(
    stream: ObservationStream,
    policy: GatePolicy | None = None,
    options: fg.SolverOptions | None = None,
) -> tuple[LandmarkDatabase, MappingReport]:
    """Build a landmark database from a GPS-aided stream.

    ``policy`` defaults to the mapping policy; pass an accept-all policy to
    disable semantic selection.
    """
    if not stream.has_gps:
        raise NoGps("no GPS in stream")
    policy = policy or default_policy(Context.MAPPING)
    if policy.context is not Context.MAPPING:
        raise PreconditionError(f"build_map needs a mapping policy, got {policy.context.value}")
    options = options or fg.SolverOptions()

    odometry = stream.frame_odometry()
    anchor_frame, anchor = initial_pose_from_gps(stream)
    quat, trans = dead_reckon(anchor_frame, anchor, odometry[0], odometry[1])

    # stage 1: trajectory from odometry and GPS alone
    g = navigation_graph(stream, quat, trans, odometry)
    gps_cov = np.eye(3) * stream.gps_sigma**2
    for f, p in zip(stream.gps_frames(), stream.gps_pos):
        g.add(fg.GpsPosition(fg.X(int(f)), p, gps_cov))
    nav_values, nav_report = fg.solve(g, options)
    poses = [nav_values[fg.X(i)] for i in range(stream.n_frames)]
    for i, p in enumerate(poses):
        g.variables[fg.X(i)] = p
    pose_R = geo.quat_to_matrix(np.array([p.rotation for p in poses]))
    pose_t = np.array([p.translation for p in poses])

    # stage 2: vote, triangulate, add gated projections, solve jointly
    ids, counts = label_counts(stream)
    order = np.lexsort((stream.obs_frame, stream.obs_landmark))
    starts = np.searchsorted(stream.obs_landmark[order], ids)
    stops = np.append(starts[1:], len(order))
    k = stream.intrinsics
    pix_cov = np.eye(2) * stream.pixel_sigma**2

    gated_out: Counter = Counter()
    degenerate = 0
    open_ids = []
    hist_of = {}
    for lid, row, a, b in zip(ids.tolist(), counts, starts, stops):
        hist = LabelHistogram(tuple(row))
        hist_of[lid] = hist
        cond = decide_condition(hist, policy, lid)
        if not cond.decided:
            degenerate += 1  # too few observations to vote or triangulate
            continue
        sel = order[a:b]
        fr = stream.obs_frame[sel]
        try:
            X0 = geo.triangulate_arrays(pose_R[fr], pose_t[fr], stream.obs_pixel[sel], k)
        except DegenerateGeometry:
            if cond.is_open:
                degenerate += 1
            else:
                gated_out[mode(hist)[0]] += 1
            continue
        g.add_variable(fg.L(lid), X0)
        g.add_gate(lid, cond.is_open)
        for o in sel:
            g.add(
                fg.GatedFactor(
                    fg.Projection(fg.X(int(stream.obs_frame[o])), fg.L(lid), stream.obs_pixel[o], pix_cov, k),
                    lid,
                )
            )
        if cond.is_open:
            open_ids.append(lid)
        else:
            gated_out[mode(hist)[0]] += 1

    values, report = fg.solve(g, options)

    db = LandmarkDatabase()
    for i in range(stream.n_frames):
        db.keyframes[i] = (float(stream.frame_times[i]), values[fg.X(i)])
    for lid in open_ids:
        a, b = starts[np.searchsorted(ids, lid)], stops[np.searchsorted(ids, lid)]
        sel = order[a:b]
        db.entries[lid] = LandmarkEntry(
            landmark_id=lid,
            position=values[fg.L(lid)],
            semantic_class=mode(hist_of[lid])[0],
            histogram=hist_of[lid],
            keyframes=stream.obs_frame[sel],
            pixels=stream.obs_pixel[sel],
        )

    rep = MappingReport(
        landmarks_in=len(ids),
        landmarks_gated_out=dict(sorted(gated_out.items())),
        landmarks_degenerate=degenerate,
        landmarks_kept=len(db),
        final_cost=report.final_cost,
        iterations=report.iterations,
        converged=report.converged and nav_report.converged,
        navigation_iterations=nav_report.iterations,
    )
    return db, rep


# ---------------------------------------------------------------------------
# database files
# ---------------------------------------------------------------------------


def _r(x) -> str:
    return repr(float(x))


def format_db(db: LandmarkDatabase) -> str:
    lines = [f"{DB_MAGIC} {DB_VERSION}", f"classes {N_CLASSES}"]
    lines += [f"class {int(c)} {c.label}" for c in SemanticClass]
    lines.append("frame local-enu")
    lines.append(f"keyframes {len(db.keyframes)}")
    for kid in sorted(db.keyframes):
        t, p = db.keyframes[kid]
        vals = " ".join(_r(x) for x in (*p.rotation, *p.translation))
        lines.append(f"kf {kid} {_r(t)} {vals}")
    lines.append(f"landmarks {len(db)}")
    for e in db:
        obs = " ".join(f"{int(f)} {_r(u)} {_r(v)}" for f, (u, v) in zip(e.keyframes, e.pixels))
        lines.append(
            f"lm {e.landmark_id} {int(e.semantic_class)} "
            + " ".join(_r(x) for x in e.position)
            + " hist "
            + " ".join(str(c) for c in e.histogram.counts)
            + f" obs {len(e.keyframes)}"
            + (f" {obs}" if obs else "")
        )
    return "\n".join(lines) + "\n"


def save_db(db: LandmarkDatabase, path: str | os.PathLike) -> None:
    try:
        Path(path).write_text(format_db(db), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"io error: {exc}") from exc


def _class_code(text: str) -> SemanticClass:
    code = int(text)
    if not 0 <= code < N_CLASSES:
        raise SchemaVersionMismatch(f"schema version mismatch: unknown class code {code}")
    return SemanticClass(code)


def parse_db(text: str) -> LandmarkDatabase:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaVersionMismatch("schema version mismatch: empty file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != DB_MAGIC or head[1] != str(DB_VERSION):
        raise SchemaVersionMismatch(f"schema version mismatch: header {lines[0]!r}")
    db = LandmarkDatabase()
    for ln in lines[1:]:
        tok = ln.split()
        tag = tok[0]
        try:
            if tag == "classes":
                if int(tok[1]) != N_CLASSES:
                    raise SchemaVersionMismatch(f"schema version mismatch: {tok[1]} classes")
            elif tag == "class":
                c = _class_code(tok[1])
                if tok[2] != c.label:
                    raise SchemaVersionMismatch(f"schema version mismatch: class {tok[1]} is {tok[2]}")
            elif tag == "kf":
                v = [float(x) for x in tok[3:10]]
                db.keyframes[int(tok[1])] = (float(tok[2]), Pose3(v[:4], v[4:]))
            elif tag == "lm":
                lid = int(tok[1])
                cls = _class_code(tok[2])
                pos = [float(x) for x in tok[3:6]]
                if tok[6] != "hist" or tok[7 + N_CLASSES] != "obs":
                    raise ValueError("malformed landmark record")
                hist = LabelHistogram(tuple(int(x) for x in tok[7 : 7 + N_CLASSES]))
                n = int(tok[8 + N_CLASSES])
                rest = tok[9 + N_CLASSES :]
                if len(rest) != 3 * n:
                    raise ValueError("observation count does not match record")
                obs = np.array(rest, dtype=float).reshape(n, 3)
                db.entries[lid] = LandmarkEntry(lid, pos, cls, hist, obs[:, 0].astype(np.int64), obs[:, 1:])
            elif tag in ("frame", "keyframes", "landmarks"):
                pass
            else:
                raise SchemaVersionMismatch(f"schema version mismatch: unknown record {tag!r}")
        except (IndexError, ValueError) as exc:
            raise SchemaVersionMismatch(f"schema version mismatch: bad record {ln[:60]!r} ({exc})") from exc
    return db


def load_db(path: str | os.PathLike) -> LandmarkDatabase:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"io error: {exc}") from exc
    return parse_db(text)
