import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from semgate import eval as ev
from semgate.errors import PreconditionError, TimestampMismatch
from semgate.geometry import Pose3
from semgate.trajectory import Trajectory

from conftest import noiseless, small_config


def straight(n=50, z=0.0):
    t = np.arange(n) * 0.1
    trans = np.column_stack([t * 10.0, np.zeros(n), np.full(n, z)])
    quat = np.tile([1.0, 0, 0, 0], (n, 1))
    return Trajectory(t, quat, trans)


def wiggly(rng, n=80):
    t = np.arange(n) * 0.05
    trans = np.cumsum(rng.normal(0, 1, (n, 3)), axis=0)
    quat = Rotation.random(n, random_state=rng.integers(1 << 31)).as_quat(scalar_first=True)
    return Trajectory(t, quat, trans)


def test_identical_trajectories_have_zero_error(rng):
    gt = wiggly(rng)
    s = ev.compute_stats(gt, gt)
    assert (s.rms_3d, s.median_3d, s.p90_3d, s.final_error, s.drift_rate) == (0.0, 0.0, 0.0, 0.0, 0.0)
    assert s.n == len(gt)


def test_constant_vertical_offset():
    gt = straight()
    est = Trajectory(gt.times, gt.quat, gt.trans + [0.0, 0.0, 1.0])
    s = ev.compute_stats(est, gt)
    assert s.rms_3d == s.median_3d == s.p90_3d == s.final_error == 1.0
    assert s.path_length == pytest.approx(49.0, abs=1e-12)


def test_drift_rate_arithmetic():
    assert ev.drift_rate(12.6363, 1710.0) == pytest.approx(0.7390, abs=5e-5)


def test_drift_rate_definition(rng):
    gt = wiggly(rng)
    est = Trajectory(gt.times, gt.quat, gt.trans + rng.normal(0, 0.2, gt.trans.shape))
    s = ev.compute_stats(est, gt)
    assert s.drift_rate == pytest.approx(100.0 * s.final_error / s.path_length, rel=1e-15)
    assert s.median_3d <= s.p90_3d


def test_percentile_conventions():
    x = np.arange(1, 11, dtype=float)
    assert ev.lower_median(x) == 5.0
    assert ev.nearest_rank(x, 90) == 9.0
    assert ev.nearest_rank(np.arange(1, 12, dtype=float), 90) == 10.0
    assert ev.nearest_rank([3.0], 90) == 3.0


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200), st.randoms())
def test_percentiles_are_order_independent(x, rnd):
    y = list(x)
    rnd.shuffle(y)
    assert ev.lower_median(x) == ev.lower_median(y)
    assert ev.nearest_rank(x, 90) == ev.nearest_rank(y, 90)
    assert ev.lower_median(x) <= ev.nearest_rank(x, 90)


def test_invariant_under_common_rigid_transform(rng):
    gt = wiggly(rng)
    est = Trajectory(gt.times, gt.quat, gt.trans + rng.normal(0, 0.5, gt.trans.shape))
    T = Pose3.from_rt(Rotation.random(random_state=7).as_matrix(), [100.0, -50.0, 3.0])
    a = ev.compute_stats(est, gt)
    b = ev.compute_stats(est.transformed(T), gt.transformed(T))
    for name in ("rms_3d", "median_3d", "p90_3d", "final_error", "path_length", "drift_rate"):
        assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-9)


def test_timestamp_mismatch(rng):
    gt = wiggly(rng)
    with pytest.raises(TimestampMismatch, match="timestamp mismatch"):
        ev.compute_stats(Trajectory(gt.times[:-1], gt.quat[:-1], gt.trans[:-1]), gt)
    with pytest.raises(TimestampMismatch):
        ev.compute_stats(Trajectory(gt.times + 0.01, gt.quat, gt.trans), gt)


def test_stats_csv(tmp_path, rng):
    gt = wiggly(rng)
    ev.write_stats_csv({"a": ev.compute_stats(gt, gt)}, tmp_path / "stats.csv")
    lines = (tmp_path / "stats.csv").read_text().splitlines()
    assert lines[0] == "run,rms_3d,median_3d,p90_3d,final_error,path_length,drift_rate,n"
    assert lines[1].startswith("a,0.0,")


def test_relative_improvement():
    assert ev.relative_improvement(0.8, 1.0) == pytest.approx(20.0)
    assert ev.relative_improvement(1.2, 1.0) == pytest.approx(-20.0)
    assert ev.relative_improvement(1.0, 1.0) == 0.0


def test_compare_needs_two_seeds():
    with pytest.raises(PreconditionError):
        ev.compare(small_config(), [1])
    with pytest.raises(PreconditionError):
        ev.compare(small_config(), [1, 1])


def test_identical_variants_give_zero_improvement(tmp_path):
    # all-static, noiseless, no false matches: the gate never rejects anything
    cfg = noiseless(small_config(n_landmarks=150))
    settings = ev.ExperimentSettings(matcher=ev.MatcherConfig(0.8, 0.0))
    cmp = ev.compare(cfg, [1, 2], settings, workers=1)
    assert all(v == 0.0 for v in cmp.improvement.values())
    assert cmp.wins == 0
    for r in cmp.rows:
        assert np.array_equal(r.trajectories["gated"].trans, r.trajectories["ungated"].trans)
    ev.write_compare_csv(cmp, tmp_path / "compare.csv")
    ev.write_compare_summary(cmp, tmp_path / "summary.csv")
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert rows[0].startswith("seed,variant,rms_3d")
    assert len(rows) == 1 + 2 * 2


def test_experiment_settings_from_shipped_config():
    from importlib.resources import files

    cfg, seeds, settings = ev.load_experiment(files("semgate") / "configs" / "desk_urban.cfg")
    assert seeds == list(range(1, 11))
    assert settings.matcher.false_match_rate > 0
    assert not settings.map_gating
