from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from semgate import geometry as geo
from semgate.errors import InsufficientMatches, PreconditionError
from semgate.eval import compute_stats
from semgate.geometry import CameraIntrinsics, Pose3
from semgate.localization import (
    LocalizationOptions,
    MatcherConfig,
    localize,
    match_observations,
    resect_pose,
)
from semgate.mapping import build_map, dead_reckon
from semgate.semantic import Context, accept_all_policy, default_policy
from semgate.sim import generate_world, synthesize

from conftest import STATIC_MIX, mix, noiseless, small_config

K = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)
URBAN = mix(BUILDING=0.25, POLE=0.1, TREE=0.15, FENCE=0.1, PAVEMENT=0.05, ROAD_MARKING=0.05,
            VEHICLE=0.2, PEDESTRIAN=0.05, BIKE=0.05)


def sessions(cfg, map_policy=None):
    world = generate_world(cfg)
    mapping_stream = synthesize(world, cfg, session=0)
    db, _ = build_map(mapping_stream, map_policy)
    nav = synthesize(world, cfg, session=1, include_gps=False)
    return world, db, nav


@pytest.fixture(scope="module")
def urban():
    cfg = small_config(class_mix=URBAN, dynamic_fraction=0.75, n_landmarks=300)
    return sessions(cfg, accept_all_policy(Context.MAPPING))


def rms(result, stream):
    return compute_stats(result.trajectory, stream.ground_truth()).rms_3d


def test_noiseless_localization_is_exact():
    cfg = noiseless(small_config())
    _, db, nav = sessions(cfg)
    res = localize(nav, db)
    err = np.linalg.norm(res.trajectory.positions - nav.gt_trans, axis=1)
    assert err.max() < 1e-6
    assert (res.matches_per_frame > 0).all()


def test_zero_recall_is_dead_reckoning(urban):
    _, db, nav = urban
    res = localize(nav, db, matcher=MatcherConfig(match_recall=0.0), options=LocalizationOptions(live_tracks=False))
    q, t = dead_reckon(0, nav.gt_pose(0), *nav.frame_odometry()[:2])
    assert res.matches_per_frame.sum() == 0
    assert np.allclose(res.trajectory.positions, t, atol=1e-9)


def test_localization_ignores_gps(urban):
    world, db, nav = urban
    cfg = small_config(class_mix=URBAN, dynamic_fraction=0.75, n_landmarks=300)
    with_gps = synthesize(world, cfg, session=1, include_gps=True)
    a, b = localize(nav, db), localize(with_gps, db)
    assert np.array_equal(a.trajectory.positions, b.trajectory.positions)


def test_timestamps_align_with_frames(urban):
    _, db, nav = urban
    res = localize(nav, db)
    assert np.array_equal(res.times, nav.frame_times)
    assert len(res.matches_per_frame) == nav.n_frames


def test_gating_keeps_a_subset_of_matches(urban):
    _, db, nav = urban
    on = localize(nav, db)
    off = localize(nav, db, options=LocalizationOptions(gating=False))
    assert np.array_equal(on.matches_per_frame, off.matches_per_frame)
    assert (on.gated_matches_per_frame <= off.gated_matches_per_frame).all()
    assert np.array_equal(off.gated_matches_per_frame, off.matches_per_frame)
    assert on.gated_matches_per_frame.sum() < off.gated_matches_per_frame.sum()


def test_gating_helps_in_a_dynamic_world(urban):
    _, db, nav = urban
    m = MatcherConfig(0.8, 0.02)
    on = localize(nav, db, matcher=m)
    off = localize(nav, db, matcher=m, options=LocalizationOptions(gating=False))
    assert rms(on, nav) < rms(off, nav)


def test_valid_only_world_gating_changes_nothing():
    cfg = replace(small_config(), label_error_rate=0.0)
    _, db, nav = sessions(cfg)
    on = localize(nav, db)
    off = localize(nav, db, options=LocalizationOptions(gating=False))
    assert np.array_equal(on.gated_matches_per_frame, on.matches_per_frame)
    assert np.allclose(on.trajectory.positions, off.trajectory.positions, atol=1e-9)


def test_lower_recall_degrades_accuracy():
    full, low = [], []
    for seed in range(10):
        cfg = small_config(seed=100 + seed, n_landmarks=200)
        _, db, nav = sessions(cfg)
        opts = LocalizationOptions(live_tracks=False)
        full.append(rms(localize(nav, db, matcher=MatcherConfig(1.0), options=opts), nav))
        low.append(rms(localize(nav, db, matcher=MatcherConfig(0.05), options=opts), nav))
    assert np.mean(low) > np.mean(full)


def test_matcher_false_matches_swap_ids(urban):
    _, db, nav = urban
    m = match_observations(nav, db, MatcherConfig(1.0, 0.5), seed=3)
    truth = nav.obs_landmark[m.obs]
    assert np.array_equal(m.db_ids[~m.false], truth[~m.false])
    assert (m.db_ids[m.false] != truth[m.false]).all()
    assert 0.4 < m.false.mean() < 0.6
    assert np.isin(m.db_ids, db.ids).all()


def test_matcher_dropout_by_class(urban):
    _, db, nav = urban
    cls = db.classes()[0]
    m = match_observations(nav, db, MatcherConfig(1.0, 0.0, {int(cls): 0.0}), seed=3)
    assert not np.isin(m.db_ids, db.ids[db.classes() == cls]).any()


def test_matcher_config_validation():
    with pytest.raises(ValueError):
        MatcherConfig(match_recall=1.5)
    with pytest.raises(ValueError):
        MatcherConfig(false_match_rate=-0.1)


def test_localize_needs_localization_policy(urban):
    _, db, nav = urban
    with pytest.raises(PreconditionError):
        localize(nav, db, policy=default_policy(Context.MAPPING))


# -- resection ----------------------------------------------------------------


def scene(rng, n):
    truth = Pose3.from_rt(Rotation.from_rotvec([0.05, -0.1, 0.2]).as_matrix(), [1.0, -2.0, 0.5])
    pc = np.column_stack([rng.uniform(-6, 6, n), rng.uniform(-4, 4, n), rng.uniform(8, 30, n)])
    points = truth.transform_from(pc)
    pixels = [geo.project(X, truth, K) for X in points]
    return truth, points, pixels


def test_resection_exact_matches(rng):
    truth, points, pixels = scene(rng, 10)
    d = rng.normal(size=3)
    initial = Pose3(truth.rotation, truth.translation + 0.5 * d / np.linalg.norm(d))
    res = resect_pose(zip(pixels, points), K, initial, ground_truth=truth)
    assert res.position_error < 1e-8
    assert res.rms_reprojection < 1e-6
    assert res.n_matches == 10


def test_resection_needs_four_matches(rng):
    truth, points, pixels = scene(rng, 3)
    with pytest.raises(InsufficientMatches, match="insufficient matches"):
        resect_pose(zip(pixels, points), K, truth)


def test_semantic_prefilter_helps_resection(rng):
    # 20 matches, 2 of them to dynamic landmarks that have since moved
    errs = {"on": [], "off": []}
    for _ in range(20):
        truth, points, pixels = scene(rng, 20)
        pixels = [u + rng.normal(0, 1.0, 2) for u in pixels]
        labels = ["Building"] * 18 + ["Vehicle"] * 2
        for i in (18, 19):
            moved = points[i] + np.array([rng.uniform(2, 6), rng.uniform(2, 6), 0.0])
            pixels[i] = geo.project(moved, truth, K)
        initial = truth.retract(np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.3, 3)]))
        policy = default_policy(Context.LOCALIZATION)
        kept = [(u, X) for u, X, c in zip(pixels, points, labels) if policy.accepts(c)]
        errs["on"].append(resect_pose(kept, K, initial, truth).position_error)
        errs["off"].append(resect_pose(zip(pixels, points), K, initial, truth).position_error)
    assert np.mean(errs["on"]) <= np.mean(errs["off"])
