"""Rigid-body transforms on SE(3) with a twist (6-vector) local parameterization.

Twists are stored as plain ``(6,)`` arrays ordered ``[omega, v]``: the first
three entries are the rotation vector (radians), the last three the
translational part (meters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _Rot

SMALL_ANGLE = 1e-8
LOG_DOMAIN_MARGIN = 1e-6
RENORMALIZE_EVERY = 100


class SE3DomainError(ValueError):
    """Raised when ``log`` is requested at (or too near) a rotation of pi."""


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def project_to_so3(M):
    """Nearest rotation (polar decomposition) to a 3x3 matrix."""
    U, _, Vt = np.linalg.svd(M)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ S @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``.

    Composition ``a @ b`` applies ``b`` first. Values are immutable; the
    rotation is re-projected onto SO(3) every ``RENORMALIZE_EVERY``
    compositions to stop round-off drift.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _chain: int = 0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> Pose:
        R = _Rot.from_quat(np.asarray(quat_xyzw, dtype=float)).as_matrix()
        return cls(R, translation)

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = _Rot.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self._chain)

    def __matmul__(self, other: Pose) -> Pose:
        if not isinstance(other, Pose):
            return NotImplemented
        R = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        chain = max(self._chain, other._chain) + 1
        if chain >= RENORMALIZE_EVERY:
            R, chain = project_to_so3(R), 0
        return Pose(R, t, chain)

    def apply(self, points) -> np.ndarray:
        """Transform an ``(N, 3)`` array (or a single 3-vector)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol=1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        rv = _Rot.from_matrix(self.rotation).as_rotvec()
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def exp(xi) -> Pose:
    """Exponential map from a twist ``[omega, v]`` to a pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    W = skew(omega)
    W2 = W @ W
    if theta < SMALL_ANGLE:
        R = np.eye(3) + W + 0.5 * W2
        V = np.eye(3) + 0.5 * W + W2 / 6.0
        return Pose(R, V @ v)
    A = np.sin(theta) / theta
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        B = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
    else:
        B = (1.0 - np.cos(theta)) / theta**2
        C = (theta - np.sin(theta)) / theta**3
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return Pose(R, V @ v)


def log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`exp` for rotation angles below pi.

    Raises
    ------
    SE3DomainError
        If the rotation angle is within ``LOG_DOMAIN_MARGIN`` of pi, where the
        rotation axis is ill-defined and linearization is meaningless.
    """
    R = pose.rotation
    theta = rotation_angle(pose)
    if theta >= np.pi - LOG_DOMAIN_MARGIN:
        raise SE3DomainError(f"rotation angle {theta:.9f} too close to pi for log")
    if theta < SMALL_ANGLE:
        omega = 0.5 * vee(R - R.T)
    else:
        omega = theta / (2.0 * np.sin(theta)) * vee(R - R.T)
    V_inv = _so3_left_jacobian_inv(omega)
    return np.concatenate([omega, V_inv @ pose.translation])


def rotation_angle(pose: Pose) -> float:
    """Misalignment angle in ``[0, pi]`` of the pose's rotation.

    Equal to ``arccos((tr(R) - 1) / 2)``; evaluated through ``atan2`` so that
    small angles keep full precision. The cosine term is clamped to [-1, 1].
    """
    R = pose.rotation if isinstance(pose, Pose) else np.asarray(pose)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    sin_t = 0.5 * np.linalg.norm(vee(R - R.T))
    return float(np.arctan2(sin_t, cos_t))


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint acting on ``[omega, v]`` twists: ``exp(Ad xi) = T exp(xi) T^-1``."""
    R, t = pose.rotation, pose.translation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(t) @ R
    return Ad


def left_jacobian_inv(xi) -> np.ndarray:
    """Inverse left Jacobian of SE(3) for ``[omega, v]`` twists.

    Closed form from the SO(3) inverse Jacobian and the translational
    coupling block ``Q``; series expansions below ``_SERIES_ANGLE``.
    """
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    J_inv = _so3_left_jacobian_inv(omega)
    J = np.zeros((6, 6))
    J[:3, :3] = J_inv
    J[3:, 3:] = J_inv
    J[3:, :3] = -J_inv @ _coupling_block(omega, v) @ J_inv
    return J


def right_jacobian_inv(xi) -> np.ndarray:
    return left_jacobian_inv(-np.asarray(xi, dtype=float))


_SERIES_ANGLE = 0.1


def _so3_left_jacobian_inv(omega):
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * W + coef * (W @ W)


def _coupling_block(omega, v):
    theta = np.linalg.norm(omega)
    W, P = skew(omega), skew(v)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        a = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0
        b = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t4 * t2 / 3628800.0
        c = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0
    else:
        s, co = np.sin(theta), np.cos(theta)
        a = (theta - s) / theta**3
        b = (theta**2 + 2.0 * co - 2.0) / (2.0 * theta**4)
        c = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta**5)
    WP, PW, WPW = W @ P, P @ W, W @ P @ W
    return (
        0.5 * P
        + a * (WP + PW + WPW)
        + b * (W @ WP + PW @ W - 3.0 * WPW)
        + c * (WPW @ W + W @ WPW)
    )
