"""Rigid-motion algebra: se(3) twists, exponential/log maps, left Jacobian.

Twists are ordered (rho, phi): translational part first, rotational
(axis-angle) part second.  Small-angle branches switch to Taylor series
below SMALL_ANGLE so every map stays finite and smooth through zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle the closed forms divide by ~0; series are exact
# to double precision there.
SMALL_ANGLE = 1e-8

# log is rejected this close to the angle-pi branch point.
PI_SINGULARITY_MARGIN = 1e-9


class LogMapSingularityError(ValueError):
    """Rotation angle too close to pi for a stable principal-branch log."""


@dataclass(frozen=True)
class Twist:
    """Element of se(3): translational part rho, rotational part phi."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=np.float64).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64).reshape(3))

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Twist(v[:3], v[3:])

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True)
class RigidPose:
    """SE(3) element: 3x3 rotation and 3-vector translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self applied after other: (self @ other) x = self(other(x))."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack (n, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))
                and np.abs(r.T @ r - np.eye(3)).max() < tol
                and abs(np.linalg.det(r) - 1.0) < tol)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _rotation_coeffs(theta: float) -> tuple[float, float, float]:
    """(sin t/t, (1-cos t)/t^2, (t-sin t)/t^3) with series fallbacks."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / (theta * theta), (theta - s) / (theta ** 3)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix from an axis-angle vector."""
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _rotation_coeffs(theta)
    k = skew(phi)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Principal-branch axis-angle of a rotation matrix.

    Raises LogMapSingularityError within PI_SINGULARITY_MARGIN of angle pi.
    """
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if math.pi - theta < PI_SINGULARITY_MARGIN:
        raise LogMapSingularityError("rotation angle within tolerance of pi")
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * w * (1.0 + theta * theta / 6.0)
    return w * (theta / (2.0 * math.sin(theta)))


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """V such that exp_se3((rho, phi)) translates by V @ rho."""
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    _, b, c = _rotation_coeffs(theta)
    k = skew(phi)
    return np.eye(3) + b * k + c * (k @ k)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coeff = 1.0 / (theta * theta) - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * k + coeff * (k @ k)


def _check_finite_twist(xi: Twist):
    if not (np.all(np.isfinite(xi.rho)) and np.all(np.isfinite(xi.phi))):
        raise ValueError("twist has non-finite components")


def exp_se3(xi: Twist) -> RigidPose:
    """Matrix exponential of a twist: rotation by Rodrigues, translation V @ rho."""
    _check_finite_twist(xi)
    return RigidPose(so3_exp(xi.phi), so3_left_jacobian(xi.phi) @ xi.rho)


def log_se3(pose: RigidPose) -> Twist:
    """Principal-branch inverse of exp_se3.

    Raises LogMapSingularityError when the rotation angle is within
    PI_SINGULARITY_MARGIN of pi.
    """
    phi = so3_log(pose.rotation)
    rho = so3_left_jacobian_inv(phi) @ pose.translation
    return Twist(rho, phi)


def se3_left_jacobian(xi: Twist) -> np.ndarray:
    """6x6 left Jacobian of SE(3) at xi, in (rho, phi) block order.

    Relates an additive twist perturbation to the left-multiplied group
    perturbation: exp(xi + delta) = exp(J @ delta) exp(xi) to first order.
    Closed form after Barfoot, with Taylor fallbacks for small angles.
    """
    _check_finite_twist(xi)
    theta = float(np.linalg.norm(xi.phi))
    ph = skew(xi.phi)
    rh = skew(xi.rho)
    if theta < 1e-2:
        # The closed forms cancel catastrophically below ~1e-2 (numerators
        # shrink like theta^5); the quadratic Taylor terms are exact enough.
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta ** 3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta ** 4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta ** 5)
    q = (0.5 * rh
         + c1 * (ph @ rh + rh @ ph + ph @ rh @ ph)
         + c2 * (ph @ ph @ rh + rh @ ph @ ph - 3.0 * ph @ rh @ ph)
         + c3 * (ph @ rh @ ph @ ph + ph @ ph @ rh @ ph))
    jl = so3_left_jacobian(xi.phi)
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[:3, 3:] = q
    out[3:, 3:] = jl
    return out
