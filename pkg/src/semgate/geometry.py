"""SE(3) pose algebra, pinhole camera model and triangulation.

Conventions
-----------
* A :class:`Pose3` maps body coordinates into the world frame,
  ``x_world = R @ x_body + t``. Camera poses use the optical frame
  (z forward, x right, y down).
* Tangent vectors are ordered rotation first: ``xi = (omega, v)``.
* Optimizer updates are right-multiplicative, ``p <- p * exp(xi)``.

SO(3) conversions are delegated to :class:`scipy.spatial.transform.Rotation`;
everything SE(3)-specific (exp/log, Jacobians, adjoint) lives here. The
``*_batch`` style helpers operate on stacked arrays and are what the solver
uses; the scalar API wraps them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateGeometry, ParameterizationSingularity

# angles below this use series expansions of the Jacobian coefficients
_SMALL_ANGLE = 1e-4
MIN_DEPTH = 1e-6
LOG_ANGLE_LIMIT = np.pi - 1e-6


# ---------------------------------------------------------------------------
# batched SO(3) / SE(3) helpers
# ---------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator on ``(..., 3)`` vectors, returning ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """``(..., 4)`` quaternions (w, x, y, z) to rotation matrices."""
    q = np.asarray(q, dtype=float)
    flat = q.reshape(-1, 4)
    mats = Rotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
    return mats.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices to (w, x, y, z) quaternions with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    xyzw = Rotation.from_matrix(flat).as_quat()
    q = xyzw[:, [3, 0, 1, 2]]
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(R.shape[:-2] + (4,))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions, broadcasting."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    flat = w.reshape(-1, 3)
    xyzw = Rotation.from_rotvec(flat).as_quat()
    return xyzw[:, [3, 0, 1, 2]].reshape(w.shape[:-1] + (4,))


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    flat = w.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(w.shape[:-1] + (3, 3))


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    return Rotation.from_matrix(flat).as_rotvec().reshape(R.shape[:-2] + (3,))


def _coefficients(theta: np.ndarray):
    """Series-safe coefficients used by the SO(3)/SE(3) Jacobians.

    Returns ``b = (1-cos)/t^2``, ``c = (t-sin)/t^3``, ``d`` (inverse-Jacobian
    coefficient), ``e = (t^2+2cos-2)/(2 t^4)`` and ``f = (2t+t cos-3 sin)/(2 t^5)``.
    """
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    s, c = np.sin(t), np.cos(t)
    th2 = theta * theta
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - c) / t2)
    cc = np.where(small, 1.0 / 6.0 - th2 / 120.0, (t - s) / (t2 * t))
    d = np.where(small, 1.0 / 12.0 + th2 / 720.0, 1.0 / t2 - (1.0 + c) / (2.0 * t * s))
    e = np.where(small, 1.0 / 24.0 - th2 / 720.0, (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2))
    f = np.where(small, 1.0 / 120.0 - th2 / 2520.0, (2.0 * t + t * c - 3.0 * s) / (2.0 * t2 * t2 * t))
    return b, cc, d, e, f


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    b, c, _, _, _ = _coefficients(theta)
    W = skew(w)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    _, _, d, _, _ = _coefficients(theta)
    W = skew(w)
    return np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)


def _se3_q(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    # off-diagonal block of the SE(3) left Jacobian
    theta = np.linalg.norm(w, axis=-1)
    _, c, _, e, f = _coefficients(theta)
    P, V = skew(w), skew(v)
    PV, VP = P @ V, V @ P
    PVP = PV @ P
    PP = P @ P
    c = c[..., None, None]
    e = e[..., None, None]
    f = f[..., None, None]
    return (
        0.5 * V
        + c * (PV + VP + PVP)
        + e * (PP @ V + V @ PP - 3.0 * PVP)
        + f * (PVP @ P + PP @ V @ P)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """``(..., 6)`` twists to ``(..., 6, 6)`` left Jacobians, (omega, v) order."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    J = np.zeros(xi.shape[:-1] + (6, 6))
    Jl = so3_left_jacobian(w)
    J[..., :3, :3] = Jl
    J[..., 3:, 3:] = Jl
    J[..., 3:, :3] = _se3_q(w, v)
    return J


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(w)
    J = np.zeros(xi.shape[:-1] + (6, 6))
    J[..., :3, :3] = Ji
    J[..., 3:, 3:] = Ji
    J[..., 3:, :3] = -Ji @ _se3_q(w, v) @ Ji
    return J


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint of ``(R, t)`` acting on (omega, v) twists."""
    R = np.asarray(R, dtype=float)
    A = np.zeros(R.shape[:-2] + (6, 6))
    A[..., :3, :3] = R
    A[..., 3:, 3:] = R
    A[..., 3:, :3] = skew(t) @ R
    return A


def se3_exp(xi: np.ndarray):
    """Batched exponential map. Returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    R = so3_exp(w)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(w), v)
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray, check: bool = True) -> np.ndarray:
    """Batched logarithm of ``(R, t)``; raises near a rotation angle of pi."""
    w = so3_log(R)
    if check:
        theta = np.linalg.norm(w, axis=-1)
        if np.any(theta >= LOG_ANGLE_LIMIT):
            raise ParameterizationSingularity(
                "parameterization singularity: rotation angle too close to pi"
            )
    v = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(w), np.asarray(t, dtype=float))
    return np.concatenate([w, v], axis=-1)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform stored as a unit quaternion (w, x, y, z) and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        if q[0] < 0:
            q = -q
        t = np.array(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose3":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "Pose3":
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose3") -> "Pose3":
        q = quat_multiply(self.rotation, other.rotation)
        return Pose3(q, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose3":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose3(q, -(self.R.T @ self.translation))

    def between(self, other: "Pose3") -> "Pose3":
        """Relative pose ``self^-1 * other``."""
        return self.inverse().compose(other)

    def transform_from(self, points) -> np.ndarray:
        """Body-frame points to world frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def transform_to(self, points) -> np.ndarray:
        """World-frame points to body frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.R

    def retract(self, xi) -> "Pose3":
        return self.compose(exp(xi))

    def almost_equal(self, other: "Pose3", tol: float = 1e-9) -> bool:
        dq = min(
            np.max(np.abs(self.rotation - other.rotation)),
            np.max(np.abs(self.rotation + other.rotation)),
        )
        return bool(dq <= tol and np.max(np.abs(self.translation - other.translation)) <= tol)

    def __eq__(self, other):
        if not isinstance(other, Pose3):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        q, t = self.rotation, self.translation
        return f"Pose3(q=[{q[0]:.6g}, {q[1]:.6g}, {q[2]:.6g}, {q[3]:.6g}], t=[{t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}])"


@dataclass(frozen=True, eq=False)
class Twist6:
    """Element of se(3): rotation part in radians, translation part in meters."""

    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotational", _frozen(np.reshape(self.rotational, 3)))
        object.__setattr__(self, "translational", _frozen(np.reshape(self.translational, 3)))

    @classmethod
    def from_vector(cls, xi) -> "Twist6":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotational, self.translational])

    def __eq__(self, other):
        if not isinstance(other, Twist6):
            return NotImplemented
        return bool(np.array_equal(self.vector, other.vector))

    def __hash__(self):
        return hash(self.vector.tobytes())


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def contains(self, pixels) -> np.ndarray:
        """True for pixels inside ``[0, width) x [0, height)``."""
        p = np.asarray(pixels, dtype=float)
        return (
            (p[..., 0] >= 0)
            & (p[..., 0] < self.image_width)
            & (p[..., 1] >= 0)
            & (p[..., 1] < self.image_height)
        )


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------


def compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def inverse(p: Pose3) -> Pose3:
    return p.inverse()


def exp(xi) -> Pose3:
    """Exponential map from a :class:`Twist6` (or 6-vector) to a pose."""
    vec = xi.vector if isinstance(xi, Twist6) else np.asarray(xi, dtype=float).reshape(6)
    R, t = se3_exp(vec)
    return Pose3.from_rt(R, t)


def log(p: Pose3) -> Twist6:
    """Logarithm map; raises :class:`ParameterizationSingularity` near angle pi."""
    return Twist6.from_vector(se3_log(p.R, p.translation))


def project(world_point, camera_pose: Pose3, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a world point.

    Pixels outside the image are returned as-is; use
    :meth:`CameraIntrinsics.contains` to flag them.
    """
    pc = camera_pose.transform_to(np.asarray(world_point, dtype=float).reshape(3))
    if pc[2] <= MIN_DEPTH:
        raise BehindCamera(f"behind camera: depth {pc[2]:.3g} m")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def projection_jacobian(pc: np.ndarray, kparams: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera-frame point) for stacked ``(..., 3)`` points."""
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    fx, fy = kparams[..., 0], kparams[..., 1]
    iz = 1.0 / z
    D = np.zeros(pc.shape[:-1] + (2, 3))
    D[..., 0, 0] = fx * iz
    D[..., 0, 2] = -fx * x * iz * iz
    D[..., 1, 1] = fy * iz
    D[..., 1, 2] = -fy * y * iz * iz
    return D


def triangulate(
    observations: Sequence[tuple[Pose3, np.ndarray]],
    k: CameraIntrinsics,
    max_refine_steps: int = 10,
    max_condition: float = 1e8,
) -> np.ndarray:
    """Triangulate a world point from ``(camera_pose, pixel)`` pairs.

    The linear midpoint solution (closest point to all back-projected rays)
    seeds up to ``max_refine_steps`` Gauss-Newton iterations on pixel error.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("degenerate geometry: need at least 2 observations")
    Rs = np.stack([p.R for p, _ in observations])
    centers = np.stack([p.translation for p, _ in observations])
    pix = np.array([np.asarray(u, dtype=float).reshape(2) for _, u in observations])
    return triangulate_arrays(Rs, centers, pix, k, max_refine_steps, max_condition)


def triangulate_arrays(
    Rs: np.ndarray,
    centers: np.ndarray,
    pix: np.ndarray,
    k: CameraIntrinsics,
    max_refine_steps: int = 10,
    max_condition: float = 1e8,
) -> np.ndarray:
    """:func:`triangulate` on stacked camera rotations (n,3,3), centers (n,3) and pixels (n,2)."""
    if len(pix) < 2:
        raise DegenerateGeometry("degenerate geometry: need at least 2 observations")
    rays_cam = np.column_stack(
        [(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy, np.ones(len(pix))]
    )
    d = np.einsum("nij,nj->ni", Rs, rays_cam)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    P = np.eye(3) - d[:, :, None] * d[:, None, :]
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, centers)
    if not np.isfinite(A).all() or np.linalg.cond(A) >= max_condition:
        raise DegenerateGeometry("degenerate geometry: rays are (nearly) parallel")
    X = np.linalg.solve(A, b)

    depth = np.einsum("nji,nj->ni", Rs, X - centers)[:, 2]
    if np.any(depth <= MIN_DEPTH):
        raise DegenerateGeometry("degenerate geometry: point behind a camera")

    kp = k.params
    for _ in range(max_refine_steps):
        pc = np.einsum("nji,nj->ni", Rs, X - centers)
        r = np.column_stack(
            [kp[0] * pc[:, 0] / pc[:, 2] + kp[2], kp[1] * pc[:, 1] / pc[:, 2] + kp[3]]
        ) - pix
        J = projection_jacobian(pc, kp) @ np.transpose(Rs, (0, 2, 1))
        J = J.reshape(-1, 3)
        step, *_ = np.linalg.lstsq(J, -r.reshape(-1), rcond=None)
        X_new = X + step
        if np.any(np.einsum("nji,nj->ni", Rs, X_new - centers)[:, 2] <= MIN_DEPTH):
            break
        X = X_new
        if np.linalg.norm(step) < 1e-12 * max(1.0, np.linalg.norm(X)):
            break
    return X
