"""Factor graph with semantically gated factors and a batch LM solver.

The cost minimized is the sum of squared whitened residuals over *active*
factors. A :class:`GatedFactor` is active only while its gate is open; a
closed gate removes the factor from the problem entirely, so a graph with
closed gates is indistinguishable from the graph with those factors deleted.

Pose variables are updated on the right, ``p <- p * exp(delta)``, and every
Jacobian is taken with respect to that local perturbation.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Hashable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu

from . import geometry as geo
from .errors import BehindCamera, Diverged, UnderconstrainedGraph, UnknownGate
from .geometry import CameraIntrinsics, Pose3


# above this many band entries the sparse LU is cheaper than banded Cholesky
_BANDED_MAX_ENTRIES = 6_000_000


class VarKind(IntEnum):
    NAV_STATE = 0
    LANDMARK = 1


_KIND_NAMES = {VarKind.NAV_STATE: "NavState", VarKind.LANDMARK: "Landmark"}


@dataclass(frozen=True, order=True)
class VariableKey:
    kind: VarKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("variable index must be non-negative")
        object.__setattr__(self, "kind", VarKind(self.kind))

    def __str__(self):
        return f"{'X' if self.kind is VarKind.NAV_STATE else 'L'}{self.index}"


def X(i: int) -> VariableKey:
    return VariableKey(VarKind.NAV_STATE, int(i))


def L(j: int) -> VariableKey:
    return VariableKey(VarKind.LANDMARK, int(j))


_WHITENER_CACHE: dict = {}


def _whitener(cov, dim: int) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    # large graphs share a handful of covariances; skip the repeated factorization
    cache_key = (dim, cov.shape, cov.tobytes())
    hit = _WHITENER_CACHE.get(cache_key)
    if hit is not None:
        return hit
    W = _compute_whitener(cov, dim)
    W.flags.writeable = False
    if len(_WHITENER_CACHE) < 4096:
        _WHITENER_CACHE[cache_key] = W
    return W


def _compute_whitener(cov: np.ndarray, dim: int) -> np.ndarray:
    if cov.shape != (dim, dim):
        raise ValueError(f"covariance must be {dim}x{dim}")
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-15):
        raise ValueError("covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be positive definite") from exc
    return np.linalg.inv(chol)


class _Factor:
    dim: ClassVar[int]
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sqrt_information", _whitener(self.covariance, self.dim))


@dataclass(frozen=True, eq=False)
class PriorPose(_Factor):
    key: VariableKey
    measured: Pose3
    covariance: np.ndarray
    dim: ClassVar[int] = 6

    @property
    def keys(self):
        return (self.key,)


@dataclass(frozen=True, eq=False)
class Odometry(_Factor):
    """Relative pose ``x_i^-1 * x_j`` measurement."""

    key_i: VariableKey
    key_j: VariableKey
    measured: Pose3
    covariance: np.ndarray
    dim: ClassVar[int] = 6

    def __post_init__(self):
        if self.key_i == self.key_j:
            raise ValueError("odometry needs two distinct states")
        super().__post_init__()

    @property
    def keys(self):
        return (self.key_i, self.key_j)


@dataclass(frozen=True, eq=False)
class GpsPosition(_Factor):
    key: VariableKey
    position: np.ndarray
    covariance: np.ndarray
    dim: ClassVar[int] = 3

    @property
    def keys(self):
        return (self.key,)


@dataclass(frozen=True, eq=False)
class Projection(_Factor):
    nav_key: VariableKey
    landmark_key: VariableKey
    pixel: np.ndarray
    covariance: np.ndarray
    intrinsics: CameraIntrinsics
    dim: ClassVar[int] = 2

    @property
    def keys(self):
        return (self.nav_key, self.landmark_key)


@dataclass(frozen=True, eq=False)
class MappedLandmark(_Factor):
    """Pixel observation of a fixed, pre-mapped 3D point."""

    nav_key: VariableKey
    point: np.ndarray
    pixel: np.ndarray
    covariance: np.ndarray
    intrinsics: CameraIntrinsics
    dim: ClassVar[int] = 2

    @property
    def keys(self):
        return (self.nav_key,)


@dataclass(frozen=True, eq=False)
class GatedFactor:
    inner: object
    gate: Hashable

    @property
    def keys(self):
        return self.inner.keys

    @property
    def dim(self):
        return self.inner.dim


FACTOR_TYPES = (PriorPose, Odometry, GpsPosition, Projection, MappedLandmark)
_ANCHORS = (PriorPose, GpsPosition, MappedLandmark)


def _unwrap(f):
    return f.inner if isinstance(f, GatedFactor) else f


class Graph:
    """Variables with initial values, an ordered factor list and gate states."""

    def __init__(self):
        self.variables: dict = {}
        self.factors: list = []
        self.gates: dict = {}

    def add_variable(self, key: VariableKey, value) -> None:
        if key in self.variables:
            raise ValueError(f"duplicate variable {key}")
        if key.kind is VarKind.NAV_STATE:
            if not isinstance(value, Pose3):
                raise TypeError("navigation states hold a Pose3")
        else:
            value = np.array(value, dtype=float).reshape(3)
            if not np.isfinite(value).all():
                raise ValueError("landmark position must be finite")
        self.variables[key] = value

    def add(self, factor) -> int:
        inner = _unwrap(factor)
        if not isinstance(inner, FACTOR_TYPES):
            raise TypeError(f"unsupported factor {type(inner).__name__}")
        for k in inner.keys:
            if k not in self.variables:
                raise KeyError(f"factor references unknown variable {k}")
        if isinstance(factor, GatedFactor) and factor.gate not in self.gates:
            self.gates[factor.gate] = False
        self.factors.append(factor)
        return len(self.factors) - 1

    def add_gate(self, gate, value: bool = False) -> None:
        self.gates[gate] = bool(value)

    def set_gate(self, gate, value: bool) -> None:
        if gate not in self.gates:
            raise UnknownGate(f"unknown gate id {gate!r}")
        self.gates[gate] = bool(value)

    def is_active(self, factor) -> bool:
        return not isinstance(factor, GatedFactor) or self.gates[factor.gate]

    def active_factors(self) -> list:
        return [_unwrap(f) for f in self.factors if self.is_active(f)]

    def active_factor_count(self) -> int:
        return sum(1 for f in self.factors if self.is_active(f))

    def copy(self) -> "Graph":
        g = Graph()
        g.variables = dict(self.variables)
        g.factors = list(self.factors)
        g.gates = dict(self.gates)
        return g


def set_gate(graph: Graph, gate, value: bool) -> None:
    graph.set_gate(gate, value)


def active_factor_count(graph: Graph) -> int:
    return graph.active_factor_count()


# ---------------------------------------------------------------------------
# residual kernels, all batched over a leading factor axis
# ---------------------------------------------------------------------------


def _whiten(W, r, Js):
    rw = np.einsum("nij,nj->ni", W, r)
    return rw, [W @ J for J in Js]


def _prior_kernel(R, t, Rm, tm, W):
    Rmt = np.transpose(Rm, (0, 2, 1))
    e = geo.se3_log(Rmt @ R, np.einsum("nij,nj->ni", Rmt, t - tm))
    return _whiten(W, e, [geo.se3_right_jacobian_inv(e)])


def _odometry_kernel(Ri, ti, Rj, tj, Rz, tz, W):
    Rit = np.transpose(Ri, (0, 2, 1))
    Rij = Rit @ Rj
    tij = np.einsum("nij,nj->ni", Rit, tj - ti)
    Rzt = np.transpose(Rz, (0, 2, 1))
    e = geo.se3_log(Rzt @ Rij, np.einsum("nij,nj->ni", Rzt, tij - tz))
    Jinv = geo.se3_right_jacobian_inv(e)
    Rji = np.transpose(Rij, (0, 2, 1))
    tji = -np.einsum("nij,nj->ni", Rji, tij)
    Ji = -Jinv @ geo.se3_adjoint(Rji, tji)
    return _whiten(W, e, [Ji, Jinv])


def _gps_kernel(R, t, z, W):
    J = np.zeros((len(t), 3, 6))
    J[:, :, 3:] = R
    return _whiten(W, t - z, [J])


def _pixel_kernel(R, t, Xw, z, W, kp):
    """Shared by Projection and MappedLandmark; returns (r, [J_pose, J_point], behind)."""
    pc = np.einsum("nji,nj->ni", R, Xw - t)
    behind = pc[:, 2] <= geo.MIN_DEPTH
    if behind.any():
        pc = pc.copy()
        pc[behind] = (0.0, 0.0, 1.0)
    pix = np.column_stack(
        [kp[:, 0] * pc[:, 0] / pc[:, 2] + kp[:, 2], kp[:, 1] * pc[:, 1] / pc[:, 2] + kp[:, 3]]
    )
    D = geo.projection_jacobian(pc, kp)
    Jpc = np.zeros((len(pc), 3, 6))
    Jpc[:, :, :3] = geo.skew(pc)
    Jpc[:, :, 3:] = -np.eye(3)
    r, (Jp, Jx) = _whiten(W, pix - z, [D @ Jpc, D @ np.transpose(R, (0, 2, 1))])
    if behind.any():
        r[behind] = 0.0
        Jp[behind] = 0.0
        Jx[behind] = 0.0
    return r, [Jp, Jx], behind


def _pose_arrays(values, keys):
    poses = [values[k] for k in keys]
    return geo.quat_to_matrix(np.array([p.rotation for p in poses])).reshape(-1, 3, 3), np.array(
        [p.translation for p in poses]
    ).reshape(-1, 3)


def residual(factor, values):
    """Whitened residual and Jacobians of a single factor.

    Returns ``(r, [J_k ...])`` with one Jacobian per entry of ``factor.keys``;
    pose Jacobians are 6 columns wide (right perturbation), landmark ones 3.
    """
    f = _unwrap(factor)
    W = f.sqrt_information[None]
    if isinstance(f, PriorPose):
        R, t = _pose_arrays(values, [f.key])
        r, Js = _prior_kernel(R, t, f.measured.R[None], f.measured.translation[None], W)
    elif isinstance(f, Odometry):
        Ri, ti = _pose_arrays(values, [f.key_i])
        Rj, tj = _pose_arrays(values, [f.key_j])
        r, Js = _odometry_kernel(Ri, ti, Rj, tj, f.measured.R[None], f.measured.translation[None], W)
    elif isinstance(f, GpsPosition):
        R, t = _pose_arrays(values, [f.key])
        r, Js = _gps_kernel(R, t, np.asarray(f.position, dtype=float)[None], W)
    elif isinstance(f, (Projection, MappedLandmark)):
        R, t = _pose_arrays(values, [f.nav_key])
        if isinstance(f, Projection):
            Xw = np.asarray(values[f.landmark_key], dtype=float)[None]
        else:
            Xw = np.asarray(f.point, dtype=float)[None]
        r, Js, behind = _pixel_kernel(
            R, t, Xw, np.asarray(f.pixel, dtype=float)[None], W, f.intrinsics.params[None]
        )
        if behind[0]:
            raise BehindCamera("behind camera")
        if isinstance(f, MappedLandmark):
            Js = Js[:1]
    else:
        raise TypeError(f"unsupported factor {type(f).__name__}")
    return r[0], [J[0] for J in Js]


# ---------------------------------------------------------------------------
# compiled problem
# ---------------------------------------------------------------------------


def _elimination_order(key: VariableKey):
    # landmarks first keeps fill-in inside the pose block
    return (0 if key.kind is VarKind.LANDMARK else 1, key.index)


class _Problem:
    """Active factors packed into per-type arrays over a fixed variable ordering."""

    def __init__(self, graph: Graph, values: dict, check_anchors: bool = True):
        active = graph.active_factors()
        keys = sorted({k for f in active for k in f.keys}, key=_elimination_order)
        self.lm_keys = [k for k in keys if k.kind is VarKind.LANDMARK]
        self.pose_keys = [k for k in keys if k.kind is VarKind.NAV_STATE]
        self.lm_index = {k: i for i, k in enumerate(self.lm_keys)}
        self.pose_index = {k: i for i, k in enumerate(self.pose_keys)}
        n_lm, n_pose = len(self.lm_keys), len(self.pose_keys)
        self.n_cols = 3 * n_lm + 6 * n_pose
        self.n_factors = len(active)

        if check_anchors:
            self._check_anchors(active)

        poses = [values[k] for k in self.pose_keys]
        self.quat = np.array([p.rotation for p in poses], dtype=float).reshape(-1, 4)
        self.trans = np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)
        self.points = np.array([values[k] for k in self.lm_keys], dtype=float).reshape(-1, 3)

        by_type = {t: [f for f in active if type(f) is t] for t in FACTOR_TYPES}
        pi = self.pose_index
        li = self.lm_index

        def W(fs):
            return np.array([f.sqrt_information for f in fs]).reshape(len(fs), fs[0].dim, fs[0].dim)

        self.batches = []
        fs = by_type[PriorPose]
        if fs:
            self.batches.append(
                (
                    "prior",
                    dict(
                        i=np.array([pi[f.key] for f in fs]),
                        Rm=np.array([f.measured.R for f in fs]),
                        tm=np.array([f.measured.translation for f in fs]),
                        W=W(fs),
                    ),
                )
            )
        fs = by_type[Odometry]
        if fs:
            self.batches.append(
                (
                    "odometry",
                    dict(
                        i=np.array([pi[f.key_i] for f in fs]),
                        j=np.array([pi[f.key_j] for f in fs]),
                        Rz=geo.quat_to_matrix(np.array([f.measured.rotation for f in fs])),
                        tz=np.array([f.measured.translation for f in fs]),
                        W=W(fs),
                    ),
                )
            )
        fs = by_type[GpsPosition]
        if fs:
            self.batches.append(
                (
                    "gps",
                    dict(
                        i=np.array([pi[f.key] for f in fs]),
                        z=np.array([np.asarray(f.position, dtype=float) for f in fs]),
                        W=W(fs),
                    ),
                )
            )
        fs = by_type[Projection]
        if fs:
            self.batches.append(
                (
                    "projection",
                    dict(
                        i=np.array([pi[f.nav_key] for f in fs]),
                        l=np.array([li[f.landmark_key] for f in fs]),
                        z=np.array([np.asarray(f.pixel, dtype=float) for f in fs]),
                        kp=np.array([f.intrinsics.params for f in fs]),
                        W=W(fs),
                    ),
                )
            )
        fs = by_type[MappedLandmark]
        if fs:
            self.batches.append(
                (
                    "mapped",
                    dict(
                        i=np.array([pi[f.nav_key] for f in fs]),
                        X=np.array([np.asarray(f.point, dtype=float) for f in fs]),
                        z=np.array([np.asarray(f.pixel, dtype=float) for f in fs]),
                        kp=np.array([f.intrinsics.params for f in fs]),
                        W=W(fs),
                    ),
                )
            )
        self._build_pattern()

    def _check_anchors(self, active):
        keys = self.lm_keys + self.pose_keys
        idx = {k: i for i, k in enumerate(keys)}
        parent = list(range(len(keys)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        anchored = set()
        for f in active:
            ids = [idx[k] for k in f.keys]
            root = find(ids[0])
            for other in ids[1:]:
                ro = find(other)
                if ro != root:
                    parent[ro] = root
            if isinstance(f, _ANCHORS):
                anchored.add(ids[0])
        anchored_roots = {find(a) for a in anchored}
        loose = [keys[i] for i in range(len(keys)) if find(i) not in anchored_roots]
        if loose:
            shown = ", ".join(str(k) for k in loose[:5])
            raise UnderconstrainedGraph(
                f"underconstrained graph: {len(loose)} variable(s) not tied to a prior, GPS "
                f"or mapped-landmark factor (e.g. {shown})"
            )

    def pose_col(self, i):
        return 3 * len(self.lm_keys) + 6 * np.asarray(i)

    def lm_col(self, l):
        return 3 * np.asarray(l)

    def _build_pattern(self):
        rows, cols = [], []
        row0 = 0
        self.row_slices = []
        for name, b in self.batches:
            n = len(b["i"])
            if name == "prior":
                blocks, d = [(self.pose_col(b["i"]), 6)], 6
            elif name == "odometry":
                blocks, d = [(self.pose_col(b["i"]), 6), (self.pose_col(b["j"]), 6)], 6
            elif name == "gps":
                blocks, d = [(self.pose_col(b["i"]), 6)], 3
            elif name == "projection":
                blocks, d = [(self.pose_col(b["i"]), 6), (self.lm_col(b["l"]), 3)], 2
            else:
                blocks, d = [(self.pose_col(b["i"]), 6)], 2
            for c0, w in blocks:
                r = row0 + np.arange(n)[:, None, None] * d + np.arange(d)[None, :, None]
                c = c0[:, None, None] + np.arange(w)[None, None, :]
                r, c = np.broadcast_arrays(r, c)
                rows.append(r.ravel())
                cols.append(c.ravel())
            self.row_slices.append((row0, row0 + n * d))
            row0 += n * d
        self.n_rows = row0
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        self._order = np.lexsort((cols, rows))
        self._indices = cols[self._order].astype(np.int32)
        counts = np.bincount(rows, minlength=self.n_rows)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

    def rotations(self, quat):
        return geo.quat_to_matrix(quat) if len(quat) else np.zeros((0, 3, 3))

    def evaluate(self, state, with_jacobian=True):
        """Returns ``(r, J or None, n_behind)`` at ``state = (quat, trans, points)``."""
        quat, trans, points = state
        R = self.rotations(quat)
        rs, vals = [], []
        n_behind = 0
        for name, b in self.batches:
            i = b["i"]
            if name == "prior":
                r, Js = _prior_kernel(R[i], trans[i], b["Rm"], b["tm"], b["W"])
            elif name == "odometry":
                j = b["j"]
                r, Js = _odometry_kernel(R[i], trans[i], R[j], trans[j], b["Rz"], b["tz"], b["W"])
            elif name == "gps":
                r, Js = _gps_kernel(R[i], trans[i], b["z"], b["W"])
            elif name == "projection":
                r, Js, behind = _pixel_kernel(R[i], trans[i], points[b["l"]], b["z"], b["W"], b["kp"])
                n_behind += int(behind.sum())
            else:
                r, Js, behind = _pixel_kernel(R[i], trans[i], b["X"], b["z"], b["W"], b["kp"])
                Js = Js[:1]
                n_behind += int(behind.sum())
            rs.append(r.ravel())
            if with_jacobian:
                vals.extend(J.ravel() for J in Js)
        r = np.concatenate(rs) if rs else np.zeros(0)
        if not with_jacobian:
            return r, None, n_behind
        data = np.concatenate(vals)[self._order] if vals else np.zeros(0)
        J = sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_rows, self.n_cols))
        return r, J, n_behind

    def initial_state(self):
        return self.quat.copy(), self.trans.copy(), self.points.copy()

    def retract(self, state, delta):
        quat, trans, points = state
        n_lm = len(self.lm_keys)
        dp = delta[: 3 * n_lm].reshape(-1, 3)
        dx = delta[3 * n_lm :].reshape(-1, 6)
        new_points = points + dp
        if len(quat):
            R = self.rotations(quat)
            dq = geo.rotvec_to_quat(dx[:, :3])
            q = geo.quat_multiply(quat, dq)
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            step_t = np.einsum("nij,nj->ni", geo.so3_left_jacobian(dx[:, :3]), dx[:, 3:])
            new_trans = trans + np.einsum("nij,nj->ni", R, step_t)
        else:
            q, new_trans = quat, trans
        return q, new_trans, new_points

    def to_values(self, state, base: dict) -> dict:
        quat, trans, points = state
        out = dict(base)
        for k, i in self.pose_index.items():
            out[k] = Pose3(quat[i], trans[i])
        for k, i in self.lm_index.items():
            out[k] = points[i].copy()
        return out


def _cost(r: np.ndarray) -> float:
    return float(np.dot(r, r))


def total_cost(graph: Graph, values: dict | None = None) -> float:
    """Sum of squared whitened residuals over active factors."""
    values = graph.variables if values is None else values
    problem = _Problem(graph, values, check_anchors=False)
    r, _, _ = problem.evaluate(problem.initial_state(), with_jacobian=False)
    return _cost(r)


@dataclass
class SolverOptions:
    max_iters: int = 100
    lm_lambda0: float = 1e-4
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    lambda_max: float = 1e12


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    behind_camera: int = 0
    active_factors: int = 0
    cost_history: list = field(default_factory=list)


def _splu_solve(A: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    try:
        lu = splu(A.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise UnderconstrainedGraph(f"underconstrained graph: factorization failed ({exc})") from exc
    return lu.solve(rhs)


def _banded_spd_solve(S: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    """Solve with a symmetric positive definite ``S`` via RCM ordering and banded Cholesky."""
    n = S.shape[0]
    perm = reverse_cuthill_mckee(S, symmetric_mode=True)
    P = S[perm][:, perm].tocoo()
    upper = P.row <= P.col
    rows, cols, data = P.row[upper], P.col[upper], P.data[upper]
    u = int((cols - rows).max()) if len(rows) else 0
    if (u + 1) * n > _BANDED_MAX_ENTRIES:
        return _splu_solve(S, rhs)
    ab = np.zeros((u + 1, n))
    ab[u + rows - cols, cols] = data
    try:
        c = cholesky_banded(ab, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise UnderconstrainedGraph(f"underconstrained graph: factorization failed ({exc})") from exc
    x = np.empty(n)
    x[perm] = cho_solve_banded((c, False), rhs[perm], check_finite=False)
    return x


def _landmark_blocks(A: sp.csr_matrix, n_lm: int) -> np.ndarray:
    B = A[: 3 * n_lm, : 3 * n_lm].tocoo()
    blocks = np.zeros((n_lm, 3, 3))
    np.add.at(blocks, (B.row // 3, B.row % 3, B.col % 3), B.data)
    return blocks


def _check_landmark_rank(H: sp.csr_matrix, lm_keys: list) -> None:
    """A landmark whose information block is singular (e.g. seen from one place) is unobservable."""
    if not lm_keys:
        return
    ev = np.linalg.eigvalsh(_landmark_blocks(H, len(lm_keys)))
    bad = np.flatnonzero(ev[:, 0] <= 1e-12 * np.maximum(ev[:, 2], 1e-300))
    if len(bad):
        shown = ", ".join(str(lm_keys[i]) for i in bad[:5])
        raise UnderconstrainedGraph(
            f"underconstrained graph: {len(bad)} landmark(s) with rank-deficient information (e.g. {shown})"
        )


def _solve_linear(H: sp.csr_matrix, g: np.ndarray, lam: float, n_lm: int = 0) -> np.ndarray:
    # landmark blocks are 3x3 block diagonal: eliminate them (Schur complement)
    # and factor the reduced pose system, which is banded up to a reordering
    diag = H.diagonal()
    A = (H + sp.diags(lam * np.maximum(diag, 1e-9))).tocsr()
    m = 3 * n_lm
    if m == 0:
        delta = _banded_spd_solve(A, -g)
    else:
        blocks = _landmark_blocks(A, n_lm)
        det = np.linalg.det(blocks)
        if not (np.isfinite(det).all() and (det > 0).all()):
            raise UnderconstrainedGraph("underconstrained graph: singular landmark block")
        Binv = sp.bsr_matrix((np.linalg.inv(blocks), np.arange(n_lm), np.arange(n_lm + 1)), shape=(m, m)).tocsr()
        E = A[m:, :m]
        EB = E @ Binv
        gl, gp = g[:m], g[m:]
        S = (A[m:, m:] - EB @ E.T).tocsr()
        S = ((S + S.T) * 0.5).tocsr()
        dp = _banded_spd_solve(S, -gp + EB @ gl) if S.shape[0] else np.zeros(0)
        dl = Binv @ (-gl - E.T @ dp)
        delta = np.concatenate([dl, dp])
    if not np.isfinite(delta).all():
        raise UnderconstrainedGraph("underconstrained graph: singular normal equations")
    return delta


def solve(graph: Graph, options: SolverOptions | None = None, **kwargs):
    """Batch Levenberg-Marquardt over all active factors.

    Variables untouched by active factors are returned unchanged. Returns
    ``(values, SolveReport)``.
    """
    opts = options or SolverOptions(**kwargs)
    problem = _Problem(graph, graph.variables)
    state = problem.initial_state()
    r, J, n_behind = problem.evaluate(state)
    cost = _cost(r)
    report = SolveReport(0, cost, cost, False, n_behind, problem.n_factors, [cost])
    if problem.n_cols == 0 or cost == 0.0:
        report.converged = True
        return problem.to_values(state, graph.variables), report

    lam = opts.lm_lambda0
    while report.iterations < opts.max_iters:
        Jt = J.T.tocsr()
        H = Jt @ J
        g = Jt @ r
        if report.iterations == 0:
            _check_landmark_rank(H, problem.lm_keys)
        report.iterations += 1
        while True:
            try:
                delta = _solve_linear(H, g, lam, len(problem.lm_keys))
            except UnderconstrainedGraph:
                # numerically indefinite at this damping; treat like a rejected step
                lam *= 10.0
                if lam > opts.lambda_max:
                    raise
                continue
            step_norm = float(np.linalg.norm(delta))
            new_state = problem.retract(state, delta)
            r_new, J_new, behind_new = problem.evaluate(new_state)
            new_cost = _cost(r_new)
            if new_cost < cost:
                rel = (cost - new_cost) / cost
                state, r, J, cost, n_behind = new_state, r_new, J_new, new_cost, behind_new
                report.cost_history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                if rel < opts.rel_tol or step_norm < opts.abs_tol or cost == 0.0:
                    report.converged = True
                break
            if step_norm < opts.abs_tol or (new_cost - cost) <= opts.rel_tol * cost:
                report.converged = True
                break
            lam *= 10.0
            if lam > opts.lambda_max:
                raise Diverged(f"diverged: damping exceeded {opts.lambda_max:g} at cost {cost:.6g}")
        if report.converged:
            break

    report.final_cost = cost
    report.behind_camera = n_behind
    return problem.to_values(state, graph.variables), report


# ---------------------------------------------------------------------------
# text dump
# ---------------------------------------------------------------------------

GRAPH_DUMP_VERSION = 1


def _fmt(a) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(a))


def format_graph(graph: Graph) -> str:
    """Line-oriented description of a graph; see README for the grammar."""
    out = io.StringIO()
    out.write(f"semgate-graph {GRAPH_DUMP_VERSION}\n")
    for key in sorted(graph.variables):
        v = graph.variables[key]
        if key.kind is VarKind.NAV_STATE:
            out.write(f"variable {key} pose {_fmt(v.rotation)} {_fmt(v.translation)}\n")
        else:
            out.write(f"variable {key} point {_fmt(v)}\n")
    for n, f in enumerate(graph.factors):
        inner = _unwrap(f)
        if isinstance(f, GatedFactor):
            gate = repr(f.gate).replace(" ", "")
            state = "open" if graph.gates[f.gate] else "closed"
        else:
            gate, state = "-", "none"
        keys = ",".join(str(k) for k in inner.keys)
        if isinstance(inner, (PriorPose, Odometry)):
            meas = f"{_fmt(inner.measured.rotation)} {_fmt(inner.measured.translation)}"
        elif isinstance(inner, GpsPosition):
            meas = _fmt(inner.position)
        elif isinstance(inner, Projection):
            meas = f"{_fmt(inner.pixel)} k {_fmt(inner.intrinsics.params)}"
        else:
            meas = f"{_fmt(inner.pixel)} point {_fmt(inner.point)} k {_fmt(inner.intrinsics.params)}"
        out.write(
            f"factor {n} {type(inner).__name__} keys {keys} gate {gate} {state} "
            f"meas {meas} cov {_fmt(inner.covariance)}\n"
        )
    return out.getvalue()


def dump_graph(graph: Graph, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_graph(graph))
