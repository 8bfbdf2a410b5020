import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from semgate import geometry as geo
from semgate.errors import BehindCamera, DegenerateGeometry, ParameterizationSingularity
from semgate.geometry import CameraIntrinsics, Pose3, Twist6

K = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def random_pose(rng, scale=5.0):
    return Pose3.from_rt(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), rng.normal(0, scale, 3))


vec6 = st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6).map(np.array)


def test_identity_is_neutral(rng):
    p = random_pose(rng)
    assert geo.compose(Pose3.identity(), p).almost_equal(p)
    assert geo.compose(p, Pose3.identity()).almost_equal(p)


def test_compose_with_inverse_is_identity(rng):
    for _ in range(20):
        p = random_pose(rng)
        assert geo.compose(p, geo.inverse(p)).almost_equal(Pose3.identity(), 1e-9)


def test_compose_matches_homogeneous_matrices():
    a = Pose3.from_rt(rz(90), [1, 0, 0])
    b = Pose3.from_rt(np.eye(3), [1, 0, 0])
    c = geo.compose(a, b)
    # oracle: 4x4 product
    T = a.matrix() @ b.matrix()
    assert np.allclose(c.matrix(), T, atol=1e-12)
    assert np.allclose(c.translation, [1, 1, 0], atol=1e-12)
    assert np.allclose(c.R, rz(90), atol=1e-12)


def test_compose_is_associative(rng):
    for _ in range(100):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert geo.compose(geo.compose(a, b), c).almost_equal(geo.compose(a, geo.compose(b, c)), 1e-9)


def test_quaternion_is_normalized_and_canonical():
    p = Pose3(np.array([-2.0, 0.0, 0.0, 0.0]), np.zeros(3))
    assert np.array_equal(p.rotation, [1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        Pose3(np.zeros(4), np.zeros(3))


def test_exp_of_zero_is_identity():
    assert geo.exp(Twist6.from_vector(np.zeros(6))) == Pose3.identity()


def test_exp_pure_rotation_about_z():
    p = geo.exp(Twist6.from_vector([0, 0, np.pi / 2, 0, 0, 0]))
    assert np.allclose(p.R, rz(90), atol=1e-12)
    assert np.allclose(p.translation, 0.0, atol=1e-15)


def test_log_exp_roundtrip_random(rng):
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        xi = np.concatenate([w, rng.normal(0, 3, 3)])
        back = geo.log(geo.exp(xi)).vector
        assert np.allclose(back, xi, atol=1e-9)


def test_exp_log_roundtrip_on_poses(rng):
    for _ in range(50):
        p = random_pose(rng)
        angle = np.linalg.norm(Rotation.from_matrix(p.R).as_rotvec())
        if angle < np.pi - 1e-3:
            assert geo.exp(geo.log(p)).almost_equal(p, 1e-9)


def test_small_angles_use_series():
    xi = np.array([1e-9, -2e-9, 3e-10, 0.1, 0.2, 0.3])
    assert np.allclose(geo.log(geo.exp(xi)).vector, xi, atol=1e-15)


def test_log_near_pi_raises():
    p = geo.exp([0, 0, np.pi - 1e-8, 0, 0, 0])
    with pytest.raises(ParameterizationSingularity):
        geo.log(p)


@given(vec6, vec6)
def test_retract_is_right_multiplication(a, b):
    p = geo.exp(a)
    assert p.retract(b).almost_equal(geo.compose(p, geo.exp(b)), 1e-12)


def test_right_jacobian_inverse_matches_finite_differences(rng):
    for _ in range(20):
        xi = rng.normal(0, 0.8, 6)
        Jinv = geo.se3_right_jacobian_inv(xi)
        # log(exp(xi) exp(d)) ~ xi + Jr^-1 d
        h = 1e-6
        num = np.zeros((6, 6))
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            num[:, i] = (geo.log(geo.exp(xi).retract(d)).vector - geo.log(geo.exp(xi).retract(-d)).vector) / (2 * h)
        assert np.allclose(num, Jinv, atol=1e-6)


def test_project_optical_axis():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
    assert np.array_equal(geo.project([0, 0, 1], Pose3.identity(), k), [0.0, 0.0])


def test_project_hand_evaluated():
    k = CameraIntrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)
    # u = 100 * 1/2 + 320, v = 100 * 0/2 + 240
    assert np.allclose(geo.project([1, 0, 2], Pose3.identity(), k), [370.0, 240.0], atol=1e-12)


def test_project_behind_camera():
    with pytest.raises(BehindCamera, match="behind camera"):
        geo.project([0, 0, -1], Pose3.identity(), K)
    with pytest.raises(BehindCamera):
        geo.project([0, 0, 1e-7], Pose3.identity(), K)


def test_outside_image_is_flagged_not_fatal():
    u = geo.project([10, 0, 1], Pose3.identity(), K)
    assert not K.contains(u)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 10.0, 0.0, 10, 10)


def _look_at(center, target):
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, [0, 0, 1.0])
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, [0, 1.0, 0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose3.from_rt(np.column_stack([x, y, z]), center)


def test_triangulate_two_exact_views():
    X = np.array([1.0, 2.0, 8.0])
    poses = [Pose3.identity(), Pose3.from_rt(np.eye(3), [1.5, 0, 0])]
    obs = [(p, geo.project(X, p, K)) for p in poses]
    assert np.allclose(geo.triangulate(obs, K), X, atol=1e-6)


def test_triangulate_reprojects_noiseless_pixels(rng):
    for _ in range(20):
        X = rng.uniform(-5, 5, 3) + [0, 0, 20]
        centers = rng.uniform(-3, 3, (4, 3))
        obs = [(p, geo.project(X, p, K)) for p in (_look_at(c, X + rng.normal(0, 0.5, 3)) for c in centers)]
        Xh = geo.triangulate(obs, K)
        for p, u in obs:
            assert np.allclose(geo.project(Xh, p, K), u, atol=1e-6)


def test_triangulate_identical_poses_is_degenerate():
    X = np.array([0.3, -0.2, 6.0])
    obs = [(Pose3.identity(), geo.project(X, Pose3.identity(), K))] * 3
    with pytest.raises(DegenerateGeometry, match="degenerate geometry"):
        geo.triangulate(obs, K)


def test_triangulate_needs_two_observations():
    with pytest.raises(DegenerateGeometry):
        geo.triangulate([(Pose3.identity(), np.array([320.0, 240.0]))], K)


def test_triangulate_noisy_monte_carlo():
    # 5 views, 0.5 px noise, baseline/depth 0.2, 718 px focal length at 5 m depth.
    # The error scales with depth^2 / focal length, so the bound is tied to this scene.
    k = CameraIntrinsics(718.0, 718.0, 320.0, 240.0, 640, 480)
    depth = 5.0
    xs = np.linspace(-0.1, 0.1, 5) * depth
    errs = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        X = np.array([0.0, 0.0, depth]) + r.normal(0, 0.05 * depth, 3)
        poses = [Pose3.from_rt(np.eye(3), [x, 0.0, 0.0]) for x in xs]
        obs = [(p, geo.project(X, p, k) + r.normal(0, 0.5, 2)) for p in poses]
        errs.append(np.linalg.norm(geo.triangulate(obs, k) - X))
    p95 = np.sort(errs)[94]
    # first-order depth sigma of a least-squares fit over the baseline positions
    sigma = depth**2 * 0.5 / 718.0 / np.sqrt(np.sum(xs**2))
    assert p95 < 0.05
    assert 1.2 * sigma < p95 < 2.5 * sigma
