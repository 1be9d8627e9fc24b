"""Blur forward model: average sharp sub-frame renders along the estimated
trajectory in linear radiance, then gamma-correct.

The backward pass chains through gamma, the equal-weight average, each
render, the Bezier twist blend, and the alignment reparameterization, so
one call yields gradients for every trainable quantity the blur model
touches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import RigidPose, Twist, exp_se3
from .rasterizer import RenderGrads, render, render_backward
from .scene import Camera, GaussianScene
from .trajectory import (AlignmentParams, BezierTrajectory, alignment_times,
                         alignment_times_jacobian, bezier_eval, blend_twist,
                         subframe_pose_jacobians)

GAMMA = 1.0 / 2.2
# x^(1/2.2) has infinite slope at 0; the backward clamps the local
# derivative at its value in x = GAMMA_GRAD_FLOOR.
GAMMA_GRAD_FLOOR = 1e-6


def gamma_correct(img: np.ndarray) -> np.ndarray:
    """Elementwise x -> x^(1/2.2), clamped into [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if np.any(img < 0):
        raise ValueError("gamma correction requires non-negative input")
    return np.clip(img ** GAMMA, 0.0, 1.0)


def gamma_backward(pre_gamma: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Chain upstream through gamma_correct evaluated at pre_gamma."""
    x = np.maximum(pre_gamma, GAMMA_GRAD_FLOOR)
    deriv = GAMMA * x ** (GAMMA - 1.0)
    deriv = np.where(pre_gamma ** GAMMA >= 1.0, 0.0, deriv)  # clip region
    return upstream * deriv


@dataclass
class BlurryRender:
    """Gamma-space blurry image plus optionally retained linear sub-frames."""

    image: np.ndarray
    subframe_images: list[np.ndarray] | None = None
    times: np.ndarray | None = None
    poses: list[RigidPose] | None = None


@dataclass
class BlurGrads:
    """Gradients of a scalar loss through the full blur synthesis."""

    scene: RenderGrads
    control_twists: np.ndarray   # (order+1, 6)
    alignment_raw: np.ndarray    # (N,)


def synthesize_blur(scene: GaussianScene, traj: BezierTrajectory,
                    params: AlignmentParams, cam: Camera, background,
                    retain_subframes: bool = False) -> BlurryRender:
    """Render N sub-frames at the aligned times, average them in linear
    space, and gamma-correct the mean."""
    times = alignment_times(params)
    poses = [bezier_eval(traj, t) for t in times]
    frames = [render(scene, p, cam, background) for p in poses]
    mean = np.mean(frames, axis=0)
    return BlurryRender(image=gamma_correct(mean),
                        subframe_images=frames if retain_subframes else None,
                        times=times, poses=poses)


def synthesize_blur_backward(scene: GaussianScene, traj: BezierTrajectory,
                             params: AlignmentParams, cam: Camera, background,
                             upstream: np.ndarray,
                             upstream_subframes: list[np.ndarray] | None = None,
                             cached: BlurryRender | None = None) -> BlurGrads:
    """Backward pass of synthesize_blur.

    upstream is the gradient on the gamma-space blurry image;
    upstream_subframes optionally adds per-sub-frame gradients taken
    directly on the linear renders (the temporal smoothness term).
    Forward intermediates are recomputed unless a cached render with
    retained sub-frames is supplied.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream shape {upstream.shape} does not match the camera")

    if cached is not None and cached.subframe_images is not None:
        fwd = cached
    else:
        fwd = synthesize_blur(scene, traj, params, cam, background,
                              retain_subframes=True)
    times = fwd.times
    n_sub = params.n
    if upstream_subframes is not None and len(upstream_subframes) != n_sub:
        raise ValueError("upstream_subframes length does not match N")

    pre_gamma = np.mean(fwd.subframe_images, axis=0)
    up_mean = gamma_backward(pre_gamma, upstream)

    n_gauss = len(scene)
    total = RenderGrads(np.zeros((n_gauss, 3)), np.zeros((n_gauss, 3)),
                        np.zeros((n_gauss, 4)), np.zeros((n_gauss, 3)),
                        np.zeros(n_gauss), np.zeros(6), np.zeros(n_gauss),
                        np.zeros(n_gauss, dtype=bool))
    g_controls = np.zeros_like(traj.control_twists)
    g_times = np.zeros(n_sub)

    for i, t in enumerate(times):
        up_i = up_mean / n_sub
        if upstream_subframes is not None:
            up_i = up_i + upstream_subframes[i]
        rg = render_backward(scene, fwd.poses[i], cam, background, up_i,
                             cached_image=fwd.subframe_images[i])
        total.positions += rg.positions
        total.log_scales += rg.log_scales
        total.rotations_q += rg.rotations_q
        total.colors += rg.colors
        total.opacity_logits += rg.opacity_logits
        total.viewspace_norms += rg.viewspace_norms
        total.seen |= rg.seen

        jl, weights, dxi_dt = subframe_pose_jacobians(traj, t)
        g_blend = jl.T @ rg.pose_twist
        g_controls += weights[:, None] * g_blend[None, :]
        g_times[i] = g_blend @ dxi_dt

    g_raw = alignment_times_jacobian(params).T @ g_times
    return BlurGrads(scene=total, control_twists=g_controls, alignment_raw=g_raw)
