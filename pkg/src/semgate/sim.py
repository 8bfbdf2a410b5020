"""Deterministic driving-scenario simulator.

Generates a world of semantically labelled landmarks along a path, then
synthesizes camera observations (with noisy pixels and noisy per-observation
labels standing in for a segmentation network), high-rate relative-pose
odometry and GPS fixes. Everything is a pure function of the
:class:`ScenarioConfig`; the seed fully determines the output.

The world frame is a local ENU frame whose origin is the start of the path
(the true position of the first GPS fix), so GPS and ground truth share it.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import geometry as geo
from .errors import ConfigParseError, InvalidClassMix
from .geometry import CameraIntrinsics, Pose3
from .semantic import DYNAMIC_CLASSES, N_CLASSES, SemanticClass
from .trajectory import Trajectory

STREAM_VERSION = 1

# covariance floors so that noiseless streams still give SPD factors
PIXEL_SIGMA_FLOOR = 0.05
ODOM_ROT_SIGMA_FLOOR = 1e-5
ODOM_TRANS_SIGMA_FLOOR = 1e-4
GPS_SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    path: tuple  # ((x, y), ...) waypoints in meters
    speed: float
    n_landmarks: int
    class_mix: tuple  # 12 proportions indexed by class code
    loop: bool = True
    height: float = 1.5
    camera_rate: float = 20.0
    odometry_rate: float = 100.0
    gps_rate: float = 5.0
    dynamic_fraction: float = 0.75
    dynamic_speed: float = 1.5
    pixel_noise_std: float = 1.0
    odom_noise: tuple = (5e-4, 5e-3)  # (rad/step, m/step)
    gps_noise_std: float = 0.05
    label_error_rate: float = 0.05
    max_view_distance: float = 40.0
    session_gap: float = 60.0
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)
    )

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(tuple(float(c) for c in p) for p in self.path))
        object.__setattr__(self, "class_mix", tuple(float(p) for p in self.class_mix))
        object.__setattr__(self, "odom_noise", tuple(float(x) for x in self.odom_noise))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed))

    def validate(self) -> None:
        """Raise ``ValueError("<key>: ...")`` on the first out-of-range field."""

        def need(ok, key, msg="out of range"):
            if not ok:
                raise ValueError(f"{key}: {msg} ({getattr(self, key)!r})")

        need(0 <= self.seed < 2**64, "seed")
        need(len(self.path) >= (3 if self.loop else 2), "path", "too few waypoints")
        need(all(len(p) == 2 for p in self.path), "path", "waypoints are x y pairs")
        need(self.speed > 0, "speed")
        need(self.n_landmarks >= 0, "n_landmarks")
        need(self.camera_rate > 0, "camera_rate")
        need(self.odometry_rate > 0, "odometry_rate")
        need(self.gps_rate >= 0, "gps_rate")
        need(_is_int_ratio(self.odometry_rate, self.camera_rate), "odometry_rate",
             "must be an integer multiple of camera_rate")
        if self.gps_rate > 0:
            need(_is_int_ratio(self.camera_rate, self.gps_rate), "gps_rate",
                 "camera_rate must be an integer multiple of gps_rate")
        need(0.0 <= self.dynamic_fraction <= 1.0, "dynamic_fraction")
        need(0.0 <= self.label_error_rate <= 1.0, "label_error_rate")
        need(self.dynamic_speed >= 0, "dynamic_speed")
        need(self.pixel_noise_std >= 0, "pixel_noise_std")
        need(len(self.odom_noise) == 2 and min(self.odom_noise) >= 0, "odom_noise")
        need(self.gps_noise_std >= 0, "gps_noise_std")
        need(self.max_view_distance > 0, "max_view_distance")
        need(self.session_gap >= 0, "session_gap")


def _is_int_ratio(a: float, b: float) -> bool:
    r = a / b
    return r >= 1 and abs(r - round(r)) < 1e-9


def check_class_mix(mix) -> np.ndarray:
    p = np.asarray(mix, dtype=float)
    if p.shape != (N_CLASSES,) or not np.isfinite(p).all() or (p < 0).any():
        raise InvalidClassMix("invalid class mix: need 12 non-negative proportions")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidClassMix(f"invalid class mix: proportions sum to {p.sum():.12g}, not 1")
    return p


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

REQUIRED_KEYS = ("seed", "path", "speed", "n_landmarks", "class_mix")


def parse_path(text: str) -> tuple:
    pts = []
    for chunk in text.split(";"):
        if chunk.strip():
            xy = chunk.replace(",", " ").split()
            if len(xy) != 2:
                raise ValueError(f"bad waypoint {chunk.strip()!r}")
            pts.append((float(xy[0]), float(xy[1])))
    return tuple(pts)


def parse_class_map(text: str) -> dict:
    out = {}
    for chunk in text.split(","):
        if chunk.strip():
            name, _, value = chunk.partition(":")
            out[SemanticClass.parse(name)] = float(value)
    return out


def format_class_map(mapping) -> str:
    return ", ".join(f"{SemanticClass(c).label}:{v!r}" for c, v in sorted(mapping.items()))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SCALAR_KEYS = {
    "seed": int,
    "speed": float,
    "n_landmarks": int,
    "loop": _bool,
    "height": float,
    "camera_rate": float,
    "odometry_rate": float,
    "gps_rate": float,
    "dynamic_fraction": float,
    "dynamic_speed": float,
    "pixel_noise_std": float,
    "gps_noise_std": float,
    "label_error_rate": float,
    "max_view_distance": float,
    "session_gap": float,
}


def read_config_file(path: str | os.PathLike) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigParseError(f"config parse: {exc}") from exc
    return cp


def config_from_parser(cp: configparser.ConfigParser) -> ScenarioConfig:
    if not cp.has_section("scenario"):
        raise ConfigParseError("config parse: missing section [scenario]")
    sec = cp["scenario"]
    for key in REQUIRED_KEYS:
        if key not in sec:
            raise ConfigParseError(f"config parse: missing required key '{key}'")
    known = set(_SCALAR_KEYS) | {"path", "class_mix", "odom_noise"}
    unknown = sorted(set(sec) - known)
    if unknown:
        raise ConfigParseError(f"config parse: unknown key '{unknown[0]}'")

    kwargs = {}
    key = None
    try:
        for key, conv in _SCALAR_KEYS.items():
            if key in sec:
                kwargs[key] = conv(sec[key])
        key = "path"
        kwargs["path"] = parse_path(sec["path"])
        key = "class_mix"
        mix = parse_class_map(sec["class_mix"])
        kwargs["class_mix"] = tuple(mix.get(c, 0.0) for c in SemanticClass)
        key = "odom_noise"
        if "odom_noise" in sec:
            kwargs["odom_noise"] = tuple(float(x) for x in sec["odom_noise"].replace(",", " ").split())
        key = "camera"
        if cp.has_section("camera"):
            cam = cp["camera"]
            kwargs["intrinsics"] = CameraIntrinsics(
                float(cam.get("fx", 400)),
                float(cam.get("fy", 400)),
                float(cam.get("cx", 320)),
                float(cam.get("cy", 240)),
                int(cam.get("image_width", 640)),
                int(cam.get("image_height", 480)),
            )
    except ValueError as exc:
        raise ConfigParseError(f"config parse: {key}: {exc}") from exc

    cfg = ScenarioConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigParseError(f"config parse: out of range: {exc}") from exc
    try:
        check_class_mix(cfg.class_mix)
    except InvalidClassMix as exc:
        raise ConfigParseError(f"config parse: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike) -> ScenarioConfig:
    return config_from_parser(read_config_file(path))


# ---------------------------------------------------------------------------
# path and world
# ---------------------------------------------------------------------------


class PathModel:
    """Smooth path through the waypoints, traversed at constant arc-length speed."""

    def __init__(self, waypoints, loop: bool, height: float, resolution: float = 0.05):
        pts = np.asarray(waypoints, dtype=float)
        if loop:
            pts = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ValueError("path: consecutive waypoints must differ")
        chord = np.concatenate([[0.0], np.cumsum(seg)])
        self.spline = CubicSpline(chord, pts, bc_type="periodic" if loop else "natural")
        n = max(1000, int(chord[-1] / resolution))
        u = np.linspace(0.0, chord[-1], n + 1)
        speed = np.linalg.norm(self.spline(u, 1), axis=1)
        s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(u))])
        self.u_table, self.s_table = u, s
        self.length = float(s[-1])
        self.loop = loop
        self.height = height

    def _u(self, s):
        s = np.asarray(s, dtype=float)
        if self.loop:
            s = np.mod(s, self.length)
        return np.interp(s, self.s_table, self.u_table)

    def xy(self, s):
        return self.spline(self._u(s))

    def tangent(self, s):
        d = self.spline(self._u(s), 1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def camera_poses(self, s):
        """Rotation matrices and positions of a level, forward-looking camera."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        xy = self.xy(s)
        d = self.tangent(s)
        R = level_camera_rotation(np.arctan2(d[:, 1], d[:, 0]))
        t = np.column_stack([xy, np.full(len(s), self.height)])
        return R, t


def level_camera_rotation(heading) -> np.ndarray:
    """Camera-to-world rotation of a level camera looking along ``heading`` (rad from +x).

    Optical frame: z forward, x right, y down.
    """
    h = np.atleast_1d(np.asarray(heading, dtype=float))
    c, sn = np.cos(h), np.sin(h)
    R = np.zeros((len(h), 3, 3))
    R[:, :, 0] = np.column_stack([sn, -c, np.zeros_like(c)])
    R[:, 2, 1] = -1.0
    R[:, :, 2] = np.column_stack([c, sn, np.zeros_like(c)])
    return R


# lateral offset range, height range and whether the class may sit on the road
_CLASS_LAYOUT = {
    SemanticClass.SKY: (10.0, 25.0, 12.0, 25.0),
    SemanticClass.BUILDING: (8.0, 20.0, 0.0, 12.0),
    SemanticClass.POLE: (4.0, 7.0, 0.0, 6.0),
    SemanticClass.ROAD_MARKING: (0.5, 3.5, 0.0, 0.0),
    SemanticClass.ROAD: (0.0, 4.0, 0.0, 0.0),
    SemanticClass.PAVEMENT: (4.0, 6.0, 0.0, 0.0),
    SemanticClass.TREE: (5.0, 12.0, 1.0, 8.0),
    SemanticClass.SIGN_SYMBOL: (4.0, 7.0, 2.0, 4.0),
    SemanticClass.FENCE: (5.0, 9.0, 0.0, 1.5),
    SemanticClass.VEHICLE: (2.0, 6.0, 0.3, 1.8),
    SemanticClass.PEDESTRIAN: (4.0, 7.0, 0.2, 1.8),
    SemanticClass.BIKE: (3.0, 6.0, 0.3, 1.2),
}


@dataclass
class WorldModel:
    ids: np.ndarray  # (M,) int
    classes: np.ndarray  # (M,) class codes
    positions: np.ndarray  # (M, 3) at world time 0
    velocities: np.ndarray  # (M, 3)
    path: PathModel
    duration: float

    def __len__(self):
        return len(self.ids)

    @property
    def moving(self) -> np.ndarray:
        return np.any(self.velocities != 0.0, axis=1)

    def positions_at(self, t: float) -> np.ndarray:
        return self.positions + self.velocities * t


def _duration(path: PathModel, config: ScenarioConfig) -> float:
    return path.length / config.speed


def generate_world(config: ScenarioConfig) -> WorldModel:
    mix = check_class_mix(config.class_mix)
    config.validate()
    path = PathModel(config.path, config.loop, config.height)
    rng = np.random.default_rng([config.seed, 0])
    n = config.n_landmarks

    classes = rng.choice(N_CLASSES, size=n, p=mix)
    s = rng.uniform(0.0, path.length, n)
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    u_lat, u_h = rng.random(n), rng.random(n)
    move_draw = rng.random(n)
    heading = rng.uniform(0.0, 2.0 * np.pi, n)

    layout = np.array([_CLASS_LAYOUT[SemanticClass(c)] for c in range(N_CLASSES)])
    lo_lat, hi_lat, lo_h, hi_h = layout[classes].T if n else np.zeros((4, 0))
    lateral = lo_lat + u_lat * (hi_lat - lo_lat)
    height = lo_h + u_h * (hi_h - lo_h)

    xy = path.xy(s).reshape(-1, 2)
    d = path.tangent(s).reshape(-1, 2)
    normal = np.column_stack([-d[:, 1], d[:, 0]])
    xy = xy + (side * lateral)[:, None] * normal
    positions = np.column_stack([xy, height])

    dynamic = np.isin(classes, [int(c) for c in DYNAMIC_CLASSES])
    moving = dynamic & (move_draw < config.dynamic_fraction)
    velocities = np.zeros((n, 3))
    velocities[moving, 0] = config.dynamic_speed * np.cos(heading[moving])
    velocities[moving, 1] = config.dynamic_speed * np.sin(heading[moving])
    if config.dynamic_speed == 0:
        velocities[:] = 0.0

    return WorldModel(
        ids=np.arange(n, dtype=np.int64),
        classes=classes.astype(np.int64),
        positions=positions,
        velocities=velocities,
        path=path,
        duration=_duration(path, config),
    )


# ---------------------------------------------------------------------------
# observation streams
# ---------------------------------------------------------------------------


@dataclass
class ObservationStream:
    intrinsics: CameraIntrinsics
    seed: int
    session: int
    camera_rate: float
    odometry_rate: float
    gps_rate: float
    pixel_noise_std: float
    odom_noise: tuple
    gps_noise_std: float
    label_error_rate: float
    frame_times: np.ndarray  # (F,)
    gt_quat: np.ndarray  # (F, 4)
    gt_trans: np.ndarray  # (F, 3)
    obs_frame: np.ndarray  # (N,)
    obs_landmark: np.ndarray  # (N,)
    obs_pixel: np.ndarray  # (N, 2)
    obs_label: np.ndarray  # (N,)
    odo_t0: np.ndarray  # (S,)
    odo_t1: np.ndarray  # (S,)
    odo_quat: np.ndarray  # (S, 4)
    odo_trans: np.ndarray  # (S, 3)
    gps_time: np.ndarray  # (G,)
    gps_pos: np.ndarray  # (G, 3)

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    @property
    def has_gps(self) -> bool:
        return len(self.gps_time) > 0

    @property
    def pixel_sigma(self) -> float:
        return max(self.pixel_noise_std, PIXEL_SIGMA_FLOOR)

    @property
    def gps_sigma(self) -> float:
        return max(self.gps_noise_std, GPS_SIGMA_FLOOR)

    def gt_pose(self, i: int) -> Pose3:
        return Pose3(self.gt_quat[i], self.gt_trans[i])

    def ground_truth(self) -> Trajectory:
        return Trajectory(self.frame_times, self.gt_quat, self.gt_trans)

    def without_gps(self) -> "ObservationStream":
        return replace(self, gps_time=np.zeros(0), gps_pos=np.zeros((0, 3)))

    def gps_frames(self) -> np.ndarray:
        """Frame index of each GPS fix (fixes are taken at camera timestamps)."""
        idx = np.searchsorted(self.frame_times, self.gps_time)
        idx = np.clip(idx, 0, self.n_frames - 1)
        prev = np.clip(idx - 1, 0, self.n_frames - 1)
        closer = np.abs(self.frame_times[prev] - self.gps_time) < np.abs(
            self.frame_times[idx] - self.gps_time
        )
        return np.where(closer, prev, idx)

    def frame_odometry(self):
        """Compose the high-rate odometry between consecutive camera frames.

        Returns ``(quat (F-1, 4), trans (F-1, 3), cov (F-1, 6, 6))``; the
        covariance is the first-order propagation of the per-step noise.
        """
        F = self.n_frames
        if F < 2:
            return np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 6, 6))
        start = np.searchsorted(self.odo_t0, self.frame_times[:-1])
        stop = np.searchsorted(self.odo_t1, self.frame_times[1:], side="right")
        counts = stop - start
        if np.any(counts <= 0) or np.any(counts != counts[0]):
            raise ValueError("odometry steps do not tile the camera frames uniformly")
        steps_R = geo.quat_to_matrix(self.odo_quat)
        rot = max(self.odom_noise[0], ODOM_ROT_SIGMA_FLOOR)
        tr = max(self.odom_noise[1], ODOM_TRANS_SIGMA_FLOOR)
        Q = np.diag([rot**2] * 3 + [tr**2] * 3)

        R = np.repeat(np.eye(3)[None], F - 1, axis=0)
        t = np.zeros((F - 1, 3))
        cov = np.zeros((F - 1, 6, 6))
        for k in range(int(counts[0])):
            Rs = steps_R[start + k]
            ts = self.odo_trans[start + k]
            # transport accumulated noise into the new end frame, then add the step noise
            Rsi = np.transpose(Rs, (0, 2, 1))
            A = geo.se3_adjoint(Rsi, -np.einsum("nij,nj->ni", Rsi, ts))
            cov = A @ cov @ np.transpose(A, (0, 2, 1)) + Q
            t = t + np.einsum("nij,nj->ni", R, ts)
            R = R @ Rs
        cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        return geo.matrix_to_quat(R), t, cov

    # -- persistence ------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        k = self.intrinsics
        header = [
            f"semgate-stream {STREAM_VERSION}",
            f"seed {self.seed}",
            f"session {self.session}",
            f"camera_rate {self.camera_rate!r}",
            f"odometry_rate {self.odometry_rate!r}",
            f"gps_rate {self.gps_rate!r}",
            f"pixel_noise_std {self.pixel_noise_std!r}",
            f"odom_noise {self.odom_noise[0]!r} {self.odom_noise[1]!r}",
            f"gps_noise_std {self.gps_noise_std!r}",
            f"label_error_rate {self.label_error_rate!r}",
            f"intrinsics {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.image_width} {k.image_height}",
            f"frames {self.n_frames}",
            f"observations {len(self.obs_frame)}",
            f"odometry {len(self.odo_t0)}",
            f"gps {len(self.gps_time)}",
        ]
        (d / "stream.txt").write_text("\n".join(header) + "\n", encoding="utf-8")
        _write_rows(
            d / "frames.txt",
            (
                f"{i} {_r(t)} {_rs(q)} {_rs(p)}"
                for i, (t, q, p) in enumerate(zip(self.frame_times, self.gt_quat, self.gt_trans))
            ),
        )
        _write_rows(
            d / "observations.txt",
            (
                f"{f} {lid} {_r(u[0])} {_r(u[1])} {lab}"
                for f, lid, u, lab in zip(self.obs_frame, self.obs_landmark, self.obs_pixel, self.obs_label)
            ),
        )
        _write_rows(
            d / "odometry.txt",
            (
                f"{_r(a)} {_r(b)} {_rs(q)} {_rs(p)}"
                for a, b, q, p in zip(self.odo_t0, self.odo_t1, self.odo_quat, self.odo_trans)
            ),
        )
        _write_rows(d / "gps.txt", (f"{_r(t)} {_rs(p)}" for t, p in zip(self.gps_time, self.gps_pos)))
        self.ground_truth().write_csv(d / "groundtruth.csv")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ObservationStream":
        d = Path(directory)
        meta = {}
        for line in (d / "stream.txt").read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, *vals = line.split()
                meta[key] = vals
        if meta.get("semgate-stream") != [str(STREAM_VERSION)]:
            raise ValueError(f"{d}: unsupported stream version {meta.get('semgate-stream')}")
        kv = meta["intrinsics"]
        frames = _read_rows(d / "frames.txt", 9, int(meta["frames"][0]))
        obs = _read_rows(d / "observations.txt", 5, int(meta["observations"][0]))
        odo = _read_rows(d / "odometry.txt", 9, int(meta["odometry"][0]))
        gps = _read_rows(d / "gps.txt", 4, int(meta["gps"][0]))
        return cls(
            intrinsics=CameraIntrinsics(float(kv[0]), float(kv[1]), float(kv[2]), float(kv[3]), int(kv[4]), int(kv[5])),
            seed=int(meta["seed"][0]),
            session=int(meta["session"][0]),
            camera_rate=float(meta["camera_rate"][0]),
            odometry_rate=float(meta["odometry_rate"][0]),
            gps_rate=float(meta["gps_rate"][0]),
            pixel_noise_std=float(meta["pixel_noise_std"][0]),
            odom_noise=(float(meta["odom_noise"][0]), float(meta["odom_noise"][1])),
            gps_noise_std=float(meta["gps_noise_std"][0]),
            label_error_rate=float(meta["label_error_rate"][0]),
            frame_times=frames[:, 1],
            gt_quat=frames[:, 2:6],
            gt_trans=frames[:, 6:9],
            obs_frame=obs[:, 0].astype(np.int64),
            obs_landmark=obs[:, 1].astype(np.int64),
            obs_pixel=obs[:, 2:4],
            obs_label=obs[:, 4].astype(np.int64),
            odo_t0=odo[:, 0],
            odo_t1=odo[:, 1],
            odo_quat=odo[:, 2:6],
            odo_trans=odo[:, 6:9],
            gps_time=gps[:, 0],
            gps_pos=gps[:, 1:4],
        )


def _r(x) -> str:
    return repr(float(x))


def _rs(a) -> str:
    return " ".join(repr(float(x)) for x in a)


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row)
            fh.write("\n")


def _read_rows(path: Path, width: int, expected: int) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        data = [line.split() for line in fh if line.strip()]
    if len(data) != expected or any(len(r) != width for r in data):
        raise ValueError(f"{path}: expected {expected} rows of {width} fields")
    return np.array(data, dtype=float).reshape(expected, width)


def session_offset(world: WorldModel, config: ScenarioConfig, session: int) -> float:
    """World time at which a session starts; dynamic landmarks keep moving between sessions."""
    return session * (world.duration + config.session_gap)


def synthesize(
    world: WorldModel, config: ScenarioConfig, session: int = 0, include_gps: bool = True
) -> ObservationStream:
    config.validate()
    path = world.path
    k = config.intrinsics
    ratio = int(round(config.odometry_rate / config.camera_rate))
    n_ticks_per_frame = ratio

    n_frames = int(math.floor(world.duration * config.camera_rate + 1e-9))
    if not path.loop:
        n_frames += 1
    n_frames = max(n_frames, 2)
    # every timestamp is an odometry tick divided by the odometry rate
    frame_times = (np.arange(n_frames) * n_ticks_per_frame) / config.odometry_rate
    R_f, t_f = path.camera_poses(frame_times * config.speed)

    seq = np.random.SeedSequence([config.seed, 1 + session])
    rng_pix, rng_lab, rng_odo, rng_gps = (np.random.default_rng(s) for s in seq.spawn(4))

    offset = session_offset(world, config, session)
    frames_l, ids_l, pix_l = [], [], []
    moving = world.moving
    for f in range(n_frames):
        P = world.positions.copy()
        if moving.any():
            P[moving] += world.velocities[moving] * (offset + frame_times[f])
        pc = (P - t_f[f]) @ R_f[f]
        z = pc[:, 2]
        front = z > geo.MIN_DEPTH
        near = np.linalg.norm(pc, axis=1) <= config.max_view_distance
        cand = np.flatnonzero(front & near)
        if len(cand) == 0:
            continue
        pcc = pc[cand]
        pix = np.column_stack([k.fx * pcc[:, 0] / pcc[:, 2] + k.cx, k.fy * pcc[:, 1] / pcc[:, 2] + k.cy])
        inside = k.contains(pix)
        cand, pix = cand[inside], pix[inside]
        if config.pixel_noise_std > 0 and len(cand):
            pix = pix + rng_pix.normal(0.0, config.pixel_noise_std, size=pix.shape)
            keep = k.contains(pix)
            cand, pix = cand[keep], pix[keep]
        frames_l.append(np.full(len(cand), f, dtype=np.int64))
        ids_l.append(world.ids[cand])
        pix_l.append(pix)

    obs_frame = np.concatenate(frames_l) if frames_l else np.zeros(0, dtype=np.int64)
    obs_landmark = np.concatenate(ids_l) if ids_l else np.zeros(0, dtype=np.int64)
    obs_pixel = np.concatenate(pix_l) if pix_l else np.zeros((0, 2))

    true_cls = world.classes[obs_landmark] if len(obs_landmark) else np.zeros(0, dtype=np.int64)
    wrong = rng_lab.random(len(true_cls)) < config.label_error_rate
    shift = rng_lab.integers(1, N_CLASSES, size=len(true_cls))
    obs_label = np.where(wrong, (true_cls + shift) % N_CLASSES, true_cls).astype(np.int64)

    # odometry: relative camera motion per tick, perturbed on the right in the tangent space
    n_steps = (n_frames - 1) * n_ticks_per_frame
    ticks = np.arange(n_steps + 1)
    tick_times = ticks / config.odometry_rate
    R_k, t_k = path.camera_poses(tick_times * config.speed)
    Rk_t = np.transpose(R_k[:-1], (0, 2, 1))
    R_rel = Rk_t @ R_k[1:]
    t_rel = np.einsum("nij,nj->ni", Rk_t, t_k[1:] - t_k[:-1])
    noise = np.column_stack(
        [
            rng_odo.normal(0.0, 1.0, size=(n_steps, 3)) * config.odom_noise[0],
            rng_odo.normal(0.0, 1.0, size=(n_steps, 3)) * config.odom_noise[1],
        ]
    )
    Rn, tn = geo.se3_exp(noise)
    odo_R = R_rel @ Rn
    odo_t = np.einsum("nij,nj->ni", R_rel, tn) + t_rel

    if include_gps and config.gps_rate > 0:
        every = int(round(config.camera_rate / config.gps_rate))
        gps_idx = np.arange(0, n_frames, every)
        gps_time = frame_times[gps_idx]
        gps_pos = t_f[gps_idx] + rng_gps.normal(0.0, 1.0, size=(len(gps_idx), 3)) * config.gps_noise_std
    else:
        gps_time, gps_pos = np.zeros(0), np.zeros((0, 3))

    return ObservationStream(
        intrinsics=k,
        seed=config.seed,
        session=session,
        camera_rate=config.camera_rate,
        odometry_rate=config.odometry_rate,
        gps_rate=config.gps_rate if include_gps else 0.0,
        pixel_noise_std=config.pixel_noise_std,
        odom_noise=config.odom_noise,
        gps_noise_std=config.gps_noise_std,
        label_error_rate=config.label_error_rate,
        frame_times=frame_times,
        gt_quat=geo.matrix_to_quat(R_f),
        gt_trans=t_f,
        obs_frame=obs_frame,
        obs_landmark=obs_landmark,
        obs_pixel=obs_pixel,
        obs_label=obs_label,
        odo_t0=tick_times[:-1],
        odo_t1=tick_times[1:],
        odo_quat=geo.matrix_to_quat(odo_R),
        odo_trans=odo_t,
        gps_time=gps_time,
        gps_pos=gps_pos,
    )
