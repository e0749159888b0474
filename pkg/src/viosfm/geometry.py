"""Rigid-body, projective and triangulation primitives.

Poses are camera-to-world transforms: ``Pose(R, t)`` maps a point expressed
in the camera frame into the frame named by ``frame_tag``. Cameras look down
their +z axis (pinhole, no distortion).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import lie

NEAR_PI_TOL = 1e-6
DEGENERATE_T = 1e-9


class GeometryError(ValueError):
    pass


class NearSingularRotationError(GeometryError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class DegenerateMotionError(GeometryError):
    """Relative motion has (numerically) zero translation."""


class BehindCameraError(GeometryError):
    pass


class LowParallaxError(GeometryError):
    pass


class DegenerateTriangulationError(GeometryError):
    pass


class RankDeficientError(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``, canonicalized so that ``w >= 0``."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise GeometryError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        return cls(lie.matrix_to_quat(R))

    @classmethod
    def from_rotvec(cls, w) -> Rotation:
        w = np.asarray(w, dtype=float)
        theta = np.linalg.norm(w)
        half = 0.5 * theta
        # sin(half)/theta, stable at zero
        k = 0.5 - theta**2 / 48.0 if theta < 1e-4 else np.sin(half) / theta
        return cls(np.concatenate([[np.cos(half)], k * w]))

    def matrix(self) -> np.ndarray:
        """Rotation matrix (cached, read-only)."""
        R = self.__dict__.get("_matrix")
        if R is None:
            R = lie.quat_to_matrix(self.q)
            R.setflags(write=False)
            object.__setattr__(self, "_matrix", R)
        return R

    def as_rotvec(self) -> np.ndarray:
        return lie.quat_to_rotvec(self.q)[0]

    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), self.q[0]))

    def inverse(self) -> Rotation:
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def __mul__(self, other: Rotation) -> Rotation:
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(
            np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )
        )

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix().T

    def __repr__(self):
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_tag: str = "world"

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, frame_tag: str = "world") -> Pose:
        return cls(Rotation.identity(), np.zeros(3), frame_tag)

    @classmethod
    def from_matrix(cls, T, frame_tag: str = "world") -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3], frame_tag)

    @classmethod
    def from_rt(cls, R, t, frame_tag: str = "world") -> Pose:
        return cls(Rotation.from_matrix(R), t, frame_tag)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        inv = self.rotation.inverse()
        return Pose(inv, -inv.apply(self.translation), self.frame_tag)

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def transform(self, X) -> np.ndarray:
        """Map points from this pose's local frame to its parent frame."""
        return np.asarray(X, dtype=float) @ self.R.T + self.translation

    def to_camera(self, X) -> np.ndarray:
        """Map parent-frame points into the camera frame."""
        return (np.asarray(X, dtype=float) - self.translation) @ self.R

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.translation)) and np.all(np.isfinite(self.rotation.q)))

    def __repr__(self):
        return (
            f"Pose(q={np.array2string(self.rotation.q, precision=6)}, "
            f"t={np.array2string(self.translation, precision=6)}, frame={self.frame_tag!r})"
        )


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @classmethod
    def from_array(cls, a) -> Intrinsics:
        fx, fy, cx, cy = (float(v) for v in a)
        return cls(fx, fy, cx, cy)


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid transform applying ``b`` first, then ``a``."""
    return Pose(a.rotation * b.rotation, a.rotation.apply(b.translation) + a.translation, a.frame_tag)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def relative_pose(p_i: Pose, p_j: Pose) -> Pose:
    """Pose of camera j expressed in camera i's frame."""
    rel = compose(p_i.inverse(), p_j)
    return Pose(rel.rotation, rel.translation, "relative")


def log_map(p: Pose) -> np.ndarray:
    """SE(3) logarithm as a 6-vector ``[rho, omega]``.

    Raises NearSingularRotationError when the rotation angle is within
    1e-6 rad of pi.
    """
    if np.pi - p.rotation.angle() < NEAR_PI_TOL:
        raise NearSingularRotationError(f"rotation angle {p.rotation.angle():.9f} is within {NEAR_PI_TOL} of pi")
    w = p.rotation.as_rotvec()
    rho = lie.so3_left_jacobian_inv(w) @ p.translation
    return np.concatenate([rho, w])


def exp_map(v, frame_tag: str = "world") -> Pose:
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose(Rotation.from_rotvec(v[3:]), lie.so3_left_jacobian(v[3:]) @ v[:3], frame_tag)


def skew(t) -> np.ndarray:
    return lie.hat(np.asarray(t, dtype=float))


def fundamental_from_prior(K: Intrinsics, rel: Pose) -> np.ndarray:
    """Fundamental matrix from a known relative pose.

    ``rel`` maps coordinates of the first camera into the second
    (``X2 = R X1 + t``), so that ``x2^T F x1 = 0``.
    """
    t = rel.translation
    if np.linalg.norm(t) < DEGENERATE_T:
        raise DegenerateMotionError("relative translation is zero; epipolar geometry undefined")
    K_inv = K.K_inv
    return K_inv.T @ skew(t) @ rel.R @ K_inv


def _homog(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def epipolar_error(F, f_t, f_tp):
    """Distance in pixels from ``f_tp`` to the epipolar line ``F @ f_t``.

    Accepts single points or ``(N, 2)`` arrays. Degenerate lines give +inf.
    """
    F = np.asarray(F, dtype=float)
    lines = _homog(f_t) @ F.T
    num = np.abs(np.sum(lines * _homog(f_tp), axis=-1))
    den = np.hypot(lines[..., 0], lines[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return float(d) if d.ndim == 0 else d


def symmetric_epipolar_distance(F, x1, x2):
    """max of the two point-to-line distances; x1 in first image, x2 in second."""
    return np.maximum(epipolar_error(F, x1, x2), epipolar_error(np.asarray(F).T, x2, x1))


def project(p: Pose, X, K: Intrinsics) -> np.ndarray:
    """Pinhole projection of a world point (or ``(N, 3)`` points)."""
    Xc = p.to_camera(X)
    z = Xc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive depth in camera frame")
    return np.stack([K.fx * Xc[..., 0] / z + K.cx, K.fy * Xc[..., 1] / z + K.cy], axis=-1)


def ray_angles(centers, X) -> float:
    """Largest pairwise angle (radians) between rays from camera centers to X."""
    rays = np.asarray(X, dtype=float) - np.asarray(centers, dtype=float)
    norms = np.linalg.norm(rays, axis=1)
    if np.any(norms == 0):
        return 0.0
    u = rays / norms[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    return float(np.arccos(cos.min()))


def _hartley_transform(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def triangulate(observations: Sequence[tuple[Pose, np.ndarray]], K: Intrinsics, min_angle_deg: float = 1.5):
    """Linear (DLT) triangulation of one point from two or more views.

    Pixel coordinates are Hartley-normalized and the world frame is
    recentred on the mean camera center before the SVD.
    """
    if len(observations) < 2:
        raise DegenerateTriangulationError("need at least two observations")
    poses = [o[0] for o in observations]
    pix = np.array([np.asarray(o[1], dtype=float) for o in observations])
    centers = np.array([p.translation for p in poses])
    origin = centers.mean(axis=0)
    if np.linalg.norm(centers - origin, axis=1).max() < 1e-12:
        raise LowParallaxError("all observations share one camera center")

    T = _hartley_transform(pix)
    xn = _homog(pix) @ T.T
    A = []
    KK = K.K
    for p, x in zip(poses, xn):
        R = p.R
        # world (shifted by origin) -> camera: Xc = R^T (X + origin - t)
        P = T @ KK @ np.hstack([R.T, (R.T @ (origin - p.translation))[:, None]])
        A.append(x[0] * P[2] - x[2] * P[0])
        A.append(x[1] * P[2] - x[2] * P[1])
    A = np.array(A)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateTriangulationError("linear system is rank deficient")
    h = Vt[-1]
    if abs(h[3]) < 1e-12 * np.linalg.norm(h[:3]):
        raise DegenerateTriangulationError("point at infinity")
    X = h[:3] / h[3] + origin

    if np.degrees(ray_angles(centers, X)) < min_angle_deg:
        raise LowParallaxError("triangulation angle below threshold")
    depths = np.einsum("ij,ij->i", X - centers, np.array([p.R[:, 2] for p in poses]))
    if np.any(depths <= 0):
        raise BehindCameraError("triangulated point lies behind a camera")
    return X


def umeyama_align(estimated, reference, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimizing ``sum |ref - (s R est + t)|^2``."""
    src = np.asarray(estimated, dtype=float)
    dst = np.asarray(reference, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise GeometryError("point sets must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise RankDeficientError("need at least three points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    scale_ref = max(D[0], 1e-300)
    if var_s <= 0 or D[1] < 1e-10 * scale_ref:
        raise RankDeficientError("point set is collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, Rotation.from_matrix(R), t
