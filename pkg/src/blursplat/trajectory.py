"""Per-image camera motion: Bezier curves over twist coefficients and the
learnable monotone sub-frame sampling times.

A trajectory is a Bezier curve whose control points are se(3) twists; the
camera pose at curve parameter t is exp of the Bernstein-weighted blend.
Sub-frame sampling times are produced from unconstrained reals through a
softplus-increment reparameterization that keeps them sorted inside [0, 1]
and makes the even-spacing initialization exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lie import RigidPose, Twist, exp_se3, se3_left_jacobian


@dataclass
class BezierTrajectory:
    """Bezier curve in twist-coefficient space; control_twists is (order+1, 6)."""

    control_twists: np.ndarray

    def __post_init__(self):
        self.control_twists = np.asarray(self.control_twists, dtype=np.float64)
        if self.control_twists.ndim != 2 or self.control_twists.shape[1] != 6:
            raise ValueError("control_twists must have shape (order+1, 6)")
        if self.control_twists.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 control twists")

    @property
    def order(self) -> int:
        return self.control_twists.shape[0] - 1

    @staticmethod
    def constant(xi: Twist, order: int) -> "BezierTrajectory":
        """Zero-motion curve: every control twist equal to xi."""
        if order < 1:
            raise ValueError("order must be positive")
        return BezierTrajectory(np.tile(xi.as_vector(), (order + 1, 1)))


def bernstein_weights(order: int, t: float) -> np.ndarray:
    """All Bernstein basis values B_{k,order}(t), k = 0..order."""
    return np.array([math.comb(order, k) * t ** k * (1.0 - t) ** (order - k)
                     for k in range(order + 1)])


def _check_t(t: float):
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"curve parameter {t} outside [0, 1]")
    return t


def blend_twist(traj: BezierTrajectory, t: float) -> np.ndarray:
    """Bernstein-weighted twist at t, by de Casteljau recursion (6-vector)."""
    t = _check_t(t)
    pts = traj.control_twists.copy()
    while pts.shape[0] > 1:
        pts = (1.0 - t) * pts[:-1] + t * pts[1:]
    return pts[0]


def blend_twist_derivative(traj: BezierTrajectory, t: float) -> np.ndarray:
    """d/dt of the blended twist: hodograph of the coefficient curve."""
    t = _check_t(t)
    diffs = traj.control_twists[1:] - traj.control_twists[:-1]
    n = traj.order
    w = bernstein_weights(n - 1, t)
    return n * (w @ diffs)


def bezier_eval(traj: BezierTrajectory, t: float) -> RigidPose:
    """Camera pose at curve parameter t: exp of the blended twist."""
    return exp_se3(Twist.from_vector(blend_twist(traj, t)))


@dataclass
class AlignmentParams:
    """Unconstrained parameterization of N ordered sub-frame times."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        if self.raw.size < 2:
            raise ValueError("need at least 2 sub-frames")

    @property
    def n(self) -> int:
        return self.raw.size

    @staticmethod
    def even(n: int) -> "AlignmentParams":
        """Initialization whose derived times are exactly evenly spaced on [0,1]."""
        if n < 2:
            raise ValueError("need at least 2 sub-frames")
        return AlignmentParams(np.zeros(n))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), overflow-safe.
    return np.logaddexp(0.0, x)


def alignment_times(params: AlignmentParams) -> np.ndarray:
    """Monotone non-decreasing sampling times in [0, 1].

    Softplus increments are accumulated and normalized so that t_1 = 0 and
    t_N = 1; equal raw values give exactly even spacing, and the map is
    smooth in every raw entry (the first increment cancels and carries no
    gradient).  Increments are measured in units of softplus(0), so at the
    all-zero initialization the cumulative sums are exact small integers and
    the returned times are exactly (i-1)/(N-1).
    """
    w = _softplus(params.raw) / _softplus(np.zeros(1))[0]
    c = np.cumsum(w)
    span = c[-1] - c[0]
    return (c - c[0]) / span


def alignment_times_jacobian(params: AlignmentParams) -> np.ndarray:
    """(N, N) Jacobian of alignment_times with respect to the raw values."""
    n = params.n
    unit = _softplus(np.zeros(1))[0]
    w = _softplus(params.raw) / unit
    c = np.cumsum(w)
    span = c[-1] - c[0]
    num = c - c[0]
    # dt_i/dw_j = [j in 2..i]/span - num_i/span^2 * [j in 2..N]
    jac = np.zeros((n, n))
    in_range = np.zeros(n)
    in_range[1:] = 1.0
    for i in range(n):
        upto = np.zeros(n)
        upto[1:i + 1] = 1.0
        jac[i] = upto / span - num[i] / span ** 2 * in_range
    dsig = 1.0 / (1.0 + np.exp(-params.raw)) / unit  # d(softplus/unit)/d raw
    return jac * dsig[None, :]


def subframe_poses(traj: BezierTrajectory, params: AlignmentParams) -> list[RigidPose]:
    """Pose at each aligned sub-frame time."""
    return [bezier_eval(traj, t) for t in alignment_times(params)]


def subframe_pose_jacobians(traj: BezierTrajectory, t: float):
    """Pieces needed to backpropagate a left-perturbation twist gradient
    taken at the pose bezier_eval(traj, t).

    Returns (jl, weights, dxi_dt): the 6x6 left Jacobian at the blended
    twist, the Bernstein weights over control twists, and the curve's
    twist-space velocity.  The control-twist gradient is
    weights[k] * jl.T @ g and the time gradient (jl.T @ g) . dxi_dt.
    """
    xi = blend_twist(traj, t)
    jl = se3_left_jacobian(Twist.from_vector(xi))
    return jl, bernstein_weights(traj.order, t), blend_twist_derivative(traj, t)
