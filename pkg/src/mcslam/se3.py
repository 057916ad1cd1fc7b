"""SE(3) rigid-body arithmetic.

Poses are stored as a rotation matrix plus a translation vector. Twists are
6-vectors ordered ``(rho, phi)``: translational part first, rotational part
second. All increments are applied on the right, ``T <- T @ exp(xi)``.

The ``_``-prefixed functions are numba kernels reused by the filter's inner
loops; the public functions wrap them with validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

_SMALL_ANGLE = 1e-6
LOG_ANGLE_LIMIT = np.pi - 1e-6


class SE3Error(ValueError):
    """Raised on invalid or ill-conditioned SE(3) input."""


@nb.njit(cache=True)
def _skew(v):
    m = np.zeros((3, 3))
    m[0, 1] = -v[2]
    m[0, 2] = v[1]
    m[1, 0] = v[2]
    m[1, 2] = -v[0]
    m[2, 0] = -v[1]
    m[2, 1] = v[0]
    return m


@nb.njit(cache=True)
def _exp(xi):
    rho = xi[:3]
    phi = xi[3:]
    theta2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    theta = np.sqrt(theta2)
    K = _skew(phi)
    K2 = K @ K
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        s = np.sin(theta)
        co = np.cos(theta)
        a = s / theta
        b = (1.0 - co) / theta2
        c = (theta - s) / (theta2 * theta)
    R = np.eye(3) + a * K + b * K2
    V = np.eye(3) + b * K + c * K2
    return R, V @ rho


@nb.njit(cache=True)
def _log(R, t):
    """Return (xi, ok); ok is False when the angle is too close to pi."""
    w = np.empty(3)
    w[0] = 0.5 * (R[2, 1] - R[1, 2])
    w[1] = 0.5 * (R[0, 2] - R[2, 0])
    w[2] = 0.5 * (R[1, 0] - R[0, 1])
    s = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    theta = np.arctan2(s, c)
    xi = np.zeros(6)
    if theta > LOG_ANGLE_LIMIT:
        return xi, False
    if theta < _SMALL_ANGLE:
        phi = w * (1.0 + theta * theta / 6.0)
    else:
        phi = w * (theta / s)
    K = _skew(phi)
    if theta < _SMALL_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        d = (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    Vinv = np.eye(3) - 0.5 * K + d * (K @ K)
    xi[:3] = Vinv @ t
    xi[3:] = phi
    return xi, True


@nb.njit(cache=True)
def _right_apply(R, t, xi):
    """Return T @ exp(xi) for T = (R, t)."""
    dR, dt = _exp(xi)
    return R @ dR, R @ dt + t


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, xyz) -> "Pose":
        return cls(np.eye(3), xyz)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.translation, 6).tolist()}, R={np.round(self.rotation, 6).tolist()})"


def _check_finite(x, what):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SE3Error(f"non-finite {what}")
    return x


def exp(xi) -> Pose:
    xi = _check_finite(xi, "twist").reshape(6)
    R, t = _exp(xi)
    return Pose(R, t)


def log(pose: Pose) -> np.ndarray:
    xi, ok = _log(pose.rotation, pose.translation)
    if not ok:
        raise SE3Error("rotation angle too close to pi for a well-conditioned log")
    return xi


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def transform_point(p: Pose, x) -> np.ndarray:
    """Transform a point or an (n, 3) array of points."""
    x = np.asarray(x, dtype=float)
    return x @ p.rotation.T + p.translation


def transform_covariance(p: Pose, cov) -> np.ndarray:
    """Rotate a covariance (or an (n, 3, 3) stack) as R C R^T."""
    R = p.rotation
    return R @ np.asarray(cov, dtype=float) @ R.T


def transform_gaussian(p: Pose, g):
    from .pointcloud import GaussianPoint

    return GaussianPoint(transform_point(p, g.mean), transform_covariance(p, g.covariance))


def right_apply(p: Pose, xi) -> Pose:
    """p @ exp(xi)."""
    return compose(p, exp(xi))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition). Works on (..., 3, 3) stacks."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return exp(np.r_[np.zeros(3), angle * axis]).rotation


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng, max_angle), rng.normal(scale=scale, size=3))
