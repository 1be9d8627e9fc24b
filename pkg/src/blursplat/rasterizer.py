"""Differentiable forward splatting and its hand-written backward pass.

Forward: project every Gaussian through the camera, sort by view depth,
and alpha-composite front to back per pixel.  Backward: exact gradients
of <upstream, rendered> for every Gaussian field and for a left-multiplied
twist perturbation of the camera pose.

Per-pixel compositing walks the depth-sorted visible list with a
bounding-radius reject; kernels are compiled with numba and run
single-threaded, so output is bit-identical regardless of surrounding
parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .lie import RigidPose
from .scene import Camera, Gaussian3D, GaussianScene, quat_to_rotmat, sigmoid

NEAR_PLANE = 0.01
BLUR_FLOOR = 0.3          # px^2 added to cov2d diagonal (anti-alias dilation)
ALPHA_SKIP = 1.0 / 255.0
ALPHA_CLAMP = 0.99
T_EARLY_STOP = 1e-4
CULL_RADIUS_SIGMA = 3.0348  # sqrt(chi2_2df inverse cdf at 0.99)


@dataclass(frozen=True)
class Projected2D:
    """Screen-space footprint of one visible Gaussian."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderGrads:
    """Gradients from one backward pass, full-scene indexing."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations_q: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    pose_twist: np.ndarray          # (6,) left-perturbation (rho, phi)
    viewspace_norms: np.ndarray     # per-Gaussian |d loss / d mean2d|
    seen: np.ndarray                # bool, Gaussian contributed to this view


def _projection_arrays(scene: GaussianScene, pose: RigidPose, cam: Camera):
    """Vectorized projection of the whole scene; returns visible-subset arrays
    sorted front to back, plus the intermediates the backward pass reuses."""
    mu_cam = scene.positions @ pose.rotation.T + pose.translation
    z_ok = mu_cam[:, 2] > NEAR_PLANE

    idx = np.nonzero(z_ok)[0]
    mu = mu_cam[idx]
    x, y, z = mu[:, 0], mu[:, 1], mu[:, 2]

    rq = quat_to_rotmat(scene.rotations_q[idx])
    s2 = np.exp(2.0 * scene.log_scales[idx])
    sigma_world = np.einsum("nij,nj,nkj->nik", rq, s2, rq)
    sigma_cam = np.einsum("ij,njk,lk->nil", pose.rotation, sigma_world, pose.rotation)

    j = np.zeros((idx.size, 2, 3))
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * x / z ** 2
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * y / z ** 2

    cov2d = np.einsum("nab,nbc,ndc->nad", j, sigma_cam, j)
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    # 99%-mass radius from the larger eigenvalue of cov2d
    tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = tr + np.sqrt(np.maximum(tr ** 2 - det, 0.0))
    radius = CULL_RADIUS_SIGMA * np.sqrt(lam_max)

    on_image = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
                & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1))

    keep = np.nonzero(on_image)[0]
    order = keep[np.argsort(z[keep], kind="stable")]

    # Per-pixel footprint bound: beyond this distance alpha falls below the
    # skip threshold even along the widest axis, so the box reject can never
    # drop a contribution the compositor would keep.
    opac = sigmoid(scene.opacity_logits[idx])
    r_alpha = np.zeros_like(lam_max)
    vis = opac > ALPHA_SKIP
    r_alpha[vis] = np.sqrt(2.0 * lam_max[vis] * np.log(opac[vis] / ALPHA_SKIP))
    pix_radius = np.maximum(radius, r_alpha)

    inv_det = 1.0 / det[order]
    conic = np.stack([cov2d[order, 1, 1] * inv_det,
                      -cov2d[order, 0, 1] * inv_det,
                      cov2d[order, 0, 0] * inv_det], axis=1)

    return {
        "scene_idx": idx[order],
        "mu_cam": mu[order],
        "mean2d": mean2d[order],
        "cov2d": cov2d[order],
        "conic": conic,
        "radius": radius[order],
        "pix_radius": pix_radius[order],
        "j": j[order],
        "sigma_cam": sigma_cam[order],
        "rq": rq[order],
        "s2": s2[order],
        "color": scene.colors[idx[order]],
        "opacity": sigmoid(scene.opacity_logits[idx[order]]),
    }


def project_gaussian(g: Gaussian3D, pose: RigidPose, cam: Camera) -> Projected2D | None:
    """Project one Gaussian; None when culled (behind camera or off image)."""
    scene = GaussianScene(g.position[None], g.log_scale[None], g.rotation_q[None],
                          g.color[None], np.array([g.opacity_logit]))
    p = _projection_arrays(scene, pose, cam)
    if p["scene_idx"].size == 0:
        return None
    return Projected2D(p["mean2d"][0], p["cov2d"][0], float(p["mu_cam"][0, 2]),
                       p["color"][0], float(p["opacity"][0]))


@njit(cache=True)
def _forward_kernel(mean2d, conic, color, opac, radius, bg, height, width):
    m = mean2d.shape[0]
    img = np.empty((height, width, 3))
    row_idx = np.empty(m, np.int64)
    for py in range(height):
        cnt = 0
        for g in range(m):
            if abs(py - mean2d[g, 1]) <= radius[g]:
                row_idx[cnt] = g
                cnt += 1
        for px in range(width):
            t = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for k in range(cnt):
                gi = row_idx[k]
                dx = px - mean2d[gi, 0]
                if abs(dx) > radius[gi]:
                    continue
                dy = py - mean2d[gi, 1]
                power = -0.5 * (conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy
                                + conic[gi, 2] * dy * dy)
                if power < -7.0:
                    continue
                alpha = opac[gi] * math.exp(power)
                if alpha < ALPHA_SKIP:
                    continue
                if alpha > ALPHA_CLAMP:
                    alpha = ALPHA_CLAMP
                w = t * alpha
                cr += w * color[gi, 0]
                cg += w * color[gi, 1]
                cb += w * color[gi, 2]
                t *= 1.0 - alpha
                if t < T_EARLY_STOP:
                    break
            img[py, px, 0] = cr + t * bg[0]
            img[py, px, 1] = cg + t * bg[1]
            img[py, px, 2] = cb + t * bg[2]
    return img


@njit(cache=True)
def _backward_kernel(mean2d, conic, color, opac, radius, bg, img, upstream,
                     height, width):
    """Per-Gaussian screen-space gradients, walking pixels in the same order
    as the forward pass.  Columns: [gmx, gmy, ga, gb, gc, gr, gg, gb_, gsigma]."""
    m = mean2d.shape[0]
    grads = np.zeros((m, 9))
    row_idx = np.empty(m, np.int64)
    for py in range(height):
        cnt = 0
        for g in range(m):
            if abs(py - mean2d[g, 1]) <= radius[g]:
                row_idx[cnt] = g
                cnt += 1
        for px in range(width):
            u0 = upstream[py, px, 0]
            u1 = upstream[py, px, 1]
            u2 = upstream[py, px, 2]
            if u0 == 0.0 and u1 == 0.0 and u2 == 0.0:
                continue
            c0 = img[py, px, 0]
            c1 = img[py, px, 1]
            c2 = img[py, px, 2]
            t = 1.0
            pr = 0.0
            pg = 0.0
            pb = 0.0
            for k in range(cnt):
                gi = row_idx[k]
                dx = px - mean2d[gi, 0]
                if abs(dx) > radius[gi]:
                    continue
                dy = py - mean2d[gi, 1]
                power = -0.5 * (conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy
                                + conic[gi, 2] * dy * dy)
                if power < -7.0:
                    continue
                gexp = math.exp(power)
                alpha = opac[gi] * gexp
                if alpha < ALPHA_SKIP:
                    continue
                clamped = alpha > ALPHA_CLAMP
                if clamped:
                    alpha = ALPHA_CLAMP
                w = t * alpha
                pr += w * color[gi, 0]
                pg += w * color[gi, 1]
                pb += w * color[gi, 2]
                grads[gi, 5] += u0 * w
                grads[gi, 6] += u1 * w
                grads[gi, 7] += u2 * w
                one_m = 1.0 - alpha
                dl_dalpha = (u0 * (t * color[gi, 0] - (c0 - pr) / one_m)
                             + u1 * (t * color[gi, 1] - (c1 - pg) / one_m)
                             + u2 * (t * color[gi, 2] - (c2 - pb) / one_m))
                if not clamped:
                    grads[gi, 8] += dl_dalpha * gexp
                    dl_dpower = dl_dalpha * alpha
                    grads[gi, 2] += dl_dpower * (-0.5 * dx * dx)
                    grads[gi, 3] += dl_dpower * (-dx * dy)
                    grads[gi, 4] += dl_dpower * (-0.5 * dy * dy)
                    grads[gi, 0] += dl_dpower * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                    grads[gi, 1] += dl_dpower * (conic[gi, 1] * dx + conic[gi, 2] * dy)
                t *= one_m
                if t < T_EARLY_STOP:
                    break
    return grads


def render(scene: GaussianScene, pose: RigidPose, cam: Camera,
           background) -> np.ndarray:
    """Front-to-back alpha-composited linear-radiance image, (H, W, 3)."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    p = _projection_arrays(scene, pose, cam)
    return _forward_kernel(p["mean2d"], p["conic"], p["color"], p["opacity"],
                           p["pix_radius"], bg, cam.height, cam.width)


def _quat_grad(qn: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Contract dR/dq_hat with grad_r for a batch of unit quaternions."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = grad_r
    gw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
                - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2.0 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0]
                - 2 * x * g[:, 1, 1] - w * g[:, 1, 2] + z * g[:, 2, 0]
                + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2.0 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
                + x * g[:, 1, 0] + z * g[:, 1, 2] - w * g[:, 2, 0]
                + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2.0 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
                + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
                + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def render_backward(scene: GaussianScene, pose: RigidPose, cam: Camera,
                    background, upstream: np.ndarray,
                    cached_image: np.ndarray | None = None) -> RenderGrads:
    """Exact gradients of sum(upstream * rendered) for all Gaussian fields
    and a left-multiplied camera twist perturbation.

    cached_image, when given, must be the forward render for exactly these
    inputs; it skips the recomputation the suffix accumulation needs.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream shape {upstream.shape} does not match the camera")
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    n = len(scene)
    out = RenderGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                      np.zeros((n, 3)), np.zeros(n), np.zeros(6),
                      np.zeros(n), np.zeros(n, dtype=bool))

    p = _projection_arrays(scene, pose, cam)
    m = p["scene_idx"].size
    if m == 0:
        return out

    if cached_image is not None:
        img = np.asarray(cached_image, dtype=np.float64)
    else:
        img = _forward_kernel(p["mean2d"], p["conic"], p["color"], p["opacity"],
                              p["pix_radius"], bg, cam.height, cam.width)
    g9 = _backward_kernel(p["mean2d"], p["conic"], p["color"], p["opacity"],
                          p["pix_radius"], bg, img, upstream, cam.height, cam.width)

    gmean2d = g9[:, 0:2]
    ga, gb, gc = g9[:, 2], g9[:, 3], g9[:, 4]
    gcolor = g9[:, 5:8]
    gsigma = g9[:, 8]

    # conic -> cov2d  (A = Sigma2d^-1; dL/dSigma = -A Ghat A)
    a_mat = np.empty((m, 2, 2))
    a_mat[:, 0, 0] = p["conic"][:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = p["conic"][:, 1]
    a_mat[:, 1, 1] = p["conic"][:, 2]
    ghat = np.empty((m, 2, 2))
    ghat[:, 0, 0] = ga
    ghat[:, 0, 1] = ghat[:, 1, 0] = 0.5 * gb
    ghat[:, 1, 1] = gc
    g_cov2d = -np.einsum("mab,mbc,mcd->mad", a_mat, ghat, a_mat)

    # cov2d = J Sigma_cam J^T (+ floor)
    j = p["j"]
    sig_cam = p["sigma_cam"]
    g_sig_cam = np.einsum("maj,mab,mbk->mjk", j, g_cov2d, j)
    g_j = 2.0 * np.einsum("mab,mbj,mjk->mak", g_cov2d, j, sig_cam)

    # mean2d and J both depend on the camera-frame mean
    mu = p["mu_cam"]
    x, y, z = mu[:, 0], mu[:, 1], mu[:, 2]
    g_mu = np.einsum("maj,ma->mj", j, gmean2d)
    g_mu[:, 0] += g_j[:, 0, 2] * (-cam.fx / z ** 2)
    g_mu[:, 1] += g_j[:, 1, 2] * (-cam.fy / z ** 2)
    g_mu[:, 2] += (g_j[:, 0, 0] * (-cam.fx / z ** 2)
                   + g_j[:, 0, 2] * (2.0 * cam.fx * x / z ** 3)
                   + g_j[:, 1, 1] * (-cam.fy / z ** 2)
                   + g_j[:, 1, 2] * (2.0 * cam.fy * y / z ** 3))

    # Sigma_cam = R Sigma_world R^T
    r = pose.rotation
    g_sig_world = np.einsum("ij,mik,kl->mjl", r, g_sig_cam, r)

    # Sigma_world = Rq diag(exp(2 s)) Rq^T
    rq = p["rq"]
    s2 = p["s2"]
    b_mat = np.einsum("mij,mik,mkl->mjl", rq, g_sig_world, rq)
    g_log_scale = 2.0 * s2 * np.stack([b_mat[:, 0, 0], b_mat[:, 1, 1], b_mat[:, 2, 2]], axis=1)
    g_rq = 2.0 * np.einsum("mij,mjk,mk->mik", g_sig_world, rq, s2)

    q = scene.rotations_q[p["scene_idx"]]
    qnorm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / qnorm
    g_qhat = _quat_grad(qn, g_rq)
    g_q = (g_qhat - qn * np.sum(g_qhat * qn, axis=1, keepdims=True)) / qnorm

    g_pos = np.einsum("mi,ij->mj", g_mu, r)

    # camera twist: translation sees g_mu directly; rotation sees the
    # mean (omega x mu) and the conjugation of Sigma_cam
    g_rho = g_mu.sum(axis=0)
    g_omega = np.cross(mu, g_mu).sum(axis=0)
    gs, sc = g_sig_cam, sig_cam
    g_omega[0] += 2.0 * np.sum(-gs[:, 1, :] * sc[:, 2, :] + gs[:, 2, :] * sc[:, 1, :])
    g_omega[1] += 2.0 * np.sum(gs[:, 0, :] * sc[:, 2, :] - gs[:, 2, :] * sc[:, 0, :])
    g_omega[2] += 2.0 * np.sum(-gs[:, 0, :] * sc[:, 1, :] + gs[:, 1, :] * sc[:, 0, :])

    sid = p["scene_idx"]
    out.positions[sid] = g_pos
    out.log_scales[sid] = g_log_scale
    out.rotations_q[sid] = g_q
    out.colors[sid] = gcolor
    sig = p["opacity"]
    out.opacity_logits[sid] = gsigma * sig * (1.0 - sig)
    out.pose_twist = np.concatenate([g_rho, g_omega])
    out.viewspace_norms[sid] = np.linalg.norm(gmean2d, axis=1)
    out.seen[sid] = True
    return out
