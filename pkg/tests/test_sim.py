from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import binom

from semgate import geometry as geo
from semgate import sim
from semgate.errors import ConfigParseError, InvalidClassMix
from semgate.semantic import SemanticClass, mode, LabelHistogram
from semgate.sim import ObservationStream, generate_world, synthesize

from conftest import mix, noiseless, small_config


def test_world_is_deterministic():
    cfg = small_config(dynamic_fraction=0.5, class_mix=mix(BUILDING=0.5, VEHICLE=0.5))
    a, b = generate_world(cfg), generate_world(cfg)
    for name in ("ids", "classes", "positions", "velocities"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = generate_world(cfg.with_seed(12))
    assert not np.array_equal(a.positions, c.positions)


def test_stream_is_deterministic():
    cfg = small_config()
    w = generate_world(cfg)
    a, b = synthesize(w, cfg), synthesize(w, cfg)
    for name in ("obs_frame", "obs_landmark", "obs_pixel", "obs_label", "odo_quat", "odo_trans", "gps_pos"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_no_dynamic_fraction_means_no_motion():
    cfg = small_config(class_mix=mix(VEHICLE=0.5, PEDESTRIAN=0.5), dynamic_fraction=0.0)
    assert not generate_world(cfg).velocities.any()


def test_only_movable_classes_move():
    cfg = small_config(class_mix=mix(BUILDING=0.5, VEHICLE=0.3, BIKE=0.2), dynamic_fraction=1.0, n_landmarks=400)
    w = generate_world(cfg)
    movable = np.isin(w.classes, [SemanticClass.VEHICLE, SemanticClass.PEDESTRIAN, SemanticClass.BIKE])
    assert np.array_equal(w.moving, movable)
    assert np.allclose(np.linalg.norm(w.velocities[w.moving], axis=1), cfg.dynamic_speed)
    assert not w.velocities[:, 2].any()


def test_single_class_world():
    w = generate_world(small_config(class_mix=mix(BUILDING=1.0)))
    assert (w.classes == SemanticClass.BUILDING).all()


def test_class_mix_proportions():
    cfg = small_config(class_mix=mix(BUILDING=0.25, TREE=0.75), n_landmarks=400)
    counts = np.bincount(generate_world(cfg).classes, minlength=12)
    assert counts.sum() == 400 and counts[SemanticClass.BUILDING] + counts[SemanticClass.TREE] == 400
    # independent draws: stay within 4 binomial standard deviations
    assert abs(counts[SemanticClass.BUILDING] - 100) < 4 * np.sqrt(400 * 0.25 * 0.75)


@pytest.mark.parametrize(
    "bad",
    [
        (0.5,) * 12,
        (1.0,) + (0.0,) * 10,
        (-0.1, 1.1) + (0.0,) * 10,
    ],
)
def test_invalid_class_mix(bad):
    with pytest.raises(InvalidClassMix, match="invalid class mix"):
        generate_world(small_config(class_mix=bad))


def test_noiseless_stream_reprojects_exactly():
    cfg = noiseless(small_config(class_mix=mix(BUILDING=0.6, VEHICLE=0.4), dynamic_fraction=0.5))
    w = generate_world(cfg)
    for session in (0, 1):
        s = synthesize(w, cfg, session=session)
        assert len(s.obs_frame) > 1000
        offset = sim.session_offset(w, cfg, session)
        for o in range(0, len(s.obs_frame), 37):
            f, lid = s.obs_frame[o], s.obs_landmark[o]
            X = w.positions_at(offset + s.frame_times[f])[lid]
            assert np.allclose(geo.project(X, s.gt_pose(f), cfg.intrinsics), s.obs_pixel[o], atol=1e-9)
        assert np.array_equal(s.obs_label, w.classes[s.obs_landmark])


def test_label_error_rate_one_never_tells_the_truth():
    cfg = small_config(label_error_rate=1.0)
    w = generate_world(cfg)
    s = synthesize(w, cfg)
    assert not (s.obs_label == w.classes[s.obs_landmark]).any()
    assert s.obs_label.min() >= 0 and s.obs_label.max() < 12


def test_noiseless_odometry_composes_to_ground_truth():
    cfg = noiseless(small_config())
    s = synthesize(generate_world(cfg), cfg)
    quat, trans, _ = s.frame_odometry()
    for i in range(0, s.n_frames - 1, 5):
        rel = s.gt_pose(i).between(s.gt_pose(i + 1))
        assert geo.Pose3(quat[i], trans[i]).almost_equal(rel, 1e-9)


def test_gps_is_noisy_ground_truth():
    cfg = small_config(gps_noise_std=0.05)
    s = synthesize(generate_world(cfg), cfg)
    frames = s.gps_frames()
    assert len(frames) == len(s.gps_time)
    err = s.gps_pos - s.gt_trans[frames]
    assert 0.03 < err.std() < 0.07
    assert not synthesize(generate_world(cfg), cfg, include_gps=False).has_gps


def test_dynamic_landmarks_move_linearly_across_sessions():
    cfg = noiseless(small_config(class_mix=mix(BUILDING=0.5, VEHICLE=0.5), dynamic_fraction=1.0))
    w = generate_world(cfg)
    t0, t1 = 0.0, sim.session_offset(w, cfg, 1)
    d = w.positions_at(t1) - w.positions_at(t0)
    assert np.allclose(d[w.moving], w.velocities[w.moving] * t1)
    assert not d[~w.moving].any()


def test_label_mode_recovers_true_class():
    # 50 seeds; landmarks with at least 20 observations
    good = total = 0
    for seed in range(50):
        cfg = small_config(seed=seed, n_landmarks=120, label_error_rate=0.05)
        w = generate_world(cfg)
        s = synthesize(w, cfg)
        for lid in np.unique(s.obs_landmark):
            labels = s.obs_label[s.obs_landmark == lid]
            if len(labels) < 20:
                continue
            total += 1
            good += mode(LabelHistogram.from_labels(labels)) == (SemanticClass(w.classes[lid]), False)
    assert total > 2000
    assert good / total >= 0.99
    # sanity: with 20 votes the true class loses only if at least 10 votes are wrong
    assert binom.sf(9, 20, 0.05) < 1e-6


def test_stream_roundtrip(tmp_path):
    cfg = small_config(class_mix=mix(BUILDING=0.6, VEHICLE=0.4), dynamic_fraction=0.5)
    s = synthesize(generate_world(cfg), cfg, session=1)
    s.save(tmp_path)
    back = ObservationStream.load(tmp_path)
    for name in ("frame_times", "gt_quat", "gt_trans", "obs_frame", "obs_landmark", "obs_pixel", "obs_label",
                 "odo_quat", "odo_trans", "gps_time", "gps_pos"):
        assert np.array_equal(getattr(s, name), getattr(back, name)), name
    assert back.session == 1 and back.intrinsics == s.intrinsics


def test_path_model_arc_length():
    p = sim.PathModel(((0, 0), (40, 0), (40, 30), (0, 30)), loop=True, height=1.5)
    s = np.linspace(0, p.length, 2001)
    steps = np.linalg.norm(np.diff(p.xy(s), axis=0), axis=1)
    assert np.allclose(steps, p.length / 2000, rtol=1e-3)
    assert np.allclose(p.xy(0.0), p.xy(p.length), atol=1e-9)
    R, t = p.camera_poses(np.array([0.0, 10.0]))
    assert np.allclose(t[:, 2], 1.5)
    # camera z axis along the direction of travel, image y pointing down
    assert np.allclose(R[:, :, 2][:, :2], p.tangent(np.array([0.0, 10.0])), atol=1e-9)
    assert np.allclose(R[:, :, 1], [0, 0, -1])


CFG_TEXT = """
[scenario]
seed = 3
path = 0 0; 40 0; 40 30; 0 30
speed = 10
n_landmarks = 100
class_mix = Building:0.5, Tree:0.5
dynamic_fraction = 0.0
"""


def test_config_file_parses(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text(CFG_TEXT)
    cfg = sim.load_config(f)
    assert cfg.seed == 3 and cfg.n_landmarks == 100
    assert cfg.class_mix[SemanticClass.BUILDING] == 0.5
    assert cfg.path[1] == (40.0, 0.0)


@pytest.mark.parametrize(
    "edit, message",
    [
        (lambda t: t.replace("seed = 3\n", ""), "missing required key 'seed'"),
        (lambda t: t + "wibble = 1\n", "unknown key"),
        (lambda t: t.replace("dynamic_fraction = 0.0", "dynamic_fraction = 1.5"), "dynamic_fraction"),
        (lambda t: t.replace("speed = 10", "speed = fast"), "speed"),
    ],
)
def test_config_errors(tmp_path, edit, message):
    f = tmp_path / "bad.cfg"
    f.write_text(edit(CFG_TEXT))
    with pytest.raises(ConfigParseError, match=message) as info:
        sim.load_config(f)
    assert str(info.value).startswith("config parse")


def test_shipped_configs_load():
    from importlib.resources import files

    for name in ("desk_urban.cfg", "desk_static.cfg"):
        cfg = sim.load_config(files("semgate") / "configs" / name)
        cfg.validate()
        assert cfg.n_landmarks == 2000
    urban = sim.load_config(files("semgate") / "configs" / "desk_urban.cfg")
    movable = sum(urban.class_mix[c] for c in (SemanticClass.VEHICLE, SemanticClass.PEDESTRIAN, SemanticClass.BIKE))
    assert movable >= 0.2
    assert 450 < sim.PathModel(urban.path, urban.loop, urban.height).length < 600


def test_validate_rejects_bad_rates():
    with pytest.raises(ValueError, match="odometry_rate"):
        small_config(odometry_rate=30.0).validate()
    with pytest.raises(ValueError, match="speed"):
        replace(small_config(), speed=0.0).validate()
