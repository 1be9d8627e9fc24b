"""Blur synthesis: gamma correction, sub-frame averaging, and its backward."""

import numpy as np
import pytest

from blursplat.blur import (gamma_backward, gamma_correct, synthesize_blur,
                            synthesize_blur_backward)
from blursplat.lie import Twist
from blursplat.rasterizer import render
from blursplat.trajectory import (AlignmentParams, BezierTrajectory,
                                  alignment_times, bezier_eval)
from helpers import (fd_matches, front_pose, random_alignment, random_scene,
                     random_trajectory, small_camera)


def test_gamma_fixed_points():
    assert gamma_correct(np.array([0.0]))[0] == 0.0
    assert gamma_correct(np.array([1.0]))[0] == 1.0


def test_gamma_half():
    assert abs(gamma_correct(np.array([0.5]))[0] - 0.5 ** (1 / 2.2)) < 1e-12
    assert abs(gamma_correct(np.array([0.5]))[0] - 0.72974) < 1e-5


def test_gamma_uniform_quarter():
    img = np.full((4, 4, 3), 0.25)
    out = gamma_correct(img)
    assert np.allclose(out, 0.25 ** (1 / 2.2))
    # direct evaluation: 0.25^(1/2.2) = 0.5325205...
    assert abs(out[0, 0, 0] - 0.53252) < 1e-5


def test_gamma_rejects_negative():
    with pytest.raises(ValueError):
        gamma_correct(np.array([-0.01]))


def test_gamma_monotone_and_bounded():
    x = np.linspace(0.0, 1.2, 500)
    y = gamma_correct(x)
    assert np.all(np.diff(y) >= 0.0)
    assert y.min() >= 0.0 and y.max() <= 1.0
    assert np.all(np.diff(gamma_correct(np.linspace(0, 1, 500))) > 0.0)


def test_gamma_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.01, 0.9, (5, 5, 3))
    up = rng.normal(0, 1, (5, 5, 3))
    h = 1e-7
    fd = (np.sum(up * gamma_correct(x + h)) - np.sum(up * gamma_correct(x - h))) / (2 * h)
    analytic = np.sum(gamma_backward(x, up))
    assert abs(fd - analytic) < 1e-4 * max(1.0, abs(fd))


def test_gamma_backward_clamps_near_zero():
    up = np.ones((2,))
    g = gamma_backward(np.array([0.0, 1e-12]), up)
    expected = (1 / 2.2) * 1e-6 ** (1 / 2.2 - 1.0)
    assert np.allclose(g, expected)
    assert np.all(np.isfinite(g))


def test_constant_trajectory_equals_sharp_render():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 15)
    cam = small_camera(24)
    pose = front_pose(rng)
    from blursplat.lie import log_se3
    traj = BezierTrajectory.constant(log_se3(pose), order=9)
    out = synthesize_blur(scene, traj, AlignmentParams.even(5), cam, np.zeros(3))
    sharp = gamma_correct(render(scene, pose, cam, np.zeros(3)))
    assert np.max(np.abs(out.image - sharp)) < 1e-7


def test_blur_compositional_oracle():
    # equals gamma of the arithmetic mean of N independent render calls
    rng = np.random.default_rng(2)
    scene = random_scene(rng, 15)
    cam = small_camera(24)
    traj = random_trajectory(rng, order=5, scale=0.03)
    params = random_alignment(rng, 7)
    bg = rng.uniform(0, 1, 3)
    out = synthesize_blur(scene, traj, params, cam, bg, retain_subframes=True)
    frames = [render(scene, bezier_eval(traj, t), cam, bg)
              for t in alignment_times(params)]
    expected = gamma_correct(np.mean(frames, axis=0))
    assert np.max(np.abs(out.image - expected)) < 1e-7
    # retained sub-frames satisfy the defining invariant
    assert np.max(np.abs(out.image - gamma_correct(np.mean(out.subframe_images, axis=0)))) < 1e-7


def test_blur_average_linearity():
    # scaling injected sub-frames by s scales the pre-gamma average by s
    rng = np.random.default_rng(3)
    frames = [rng.uniform(0, 0.5, (8, 8, 3)) for _ in range(4)]
    mean1 = np.mean(frames, axis=0)
    mean2 = np.mean([0.5 * f for f in frames], axis=0)
    assert np.allclose(mean2, 0.5 * mean1, atol=1e-15)


def test_blur_is_function_of_pose_multiset():
    # mirrored raw increments give times 1 - reverse(t); pairing them with
    # the time-reversed curve (reversed control twists) yields the same pose
    # multiset, so the blurry image must agree up to summation order.
    rng = np.random.default_rng(4)
    scene = random_scene(rng, 10)
    cam = small_camera(16)
    traj = random_trajectory(rng, order=4, scale=0.03)
    raw = rng.normal(0.0, 0.8, 5)
    params = AlignmentParams(raw)
    mirrored = AlignmentParams(np.concatenate([[raw[-1]], raw[1:][::-1]]))
    t = alignment_times(params)
    tm = alignment_times(mirrored)
    assert np.allclose(tm, 1.0 - t[::-1], atol=1e-12)
    reversed_traj = BezierTrajectory(traj.control_twists[::-1].copy())
    a = synthesize_blur(scene, traj, params, cam, np.zeros(3))
    b = synthesize_blur(scene, reversed_traj, mirrored, cam, np.zeros(3))
    assert np.max(np.abs(a.image - b.image)) < 1e-10


def test_blur_riemann_sum_convergence():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 12)
    cam = small_camera(16)
    traj = random_trajectory(rng, order=4, scale=0.05)
    diffs = []
    for n in (3, 6, 12, 24):
        a = synthesize_blur(scene, traj, AlignmentParams.even(n), cam, np.zeros(3))
        b = synthesize_blur(scene, traj, AlignmentParams.even(2 * n), cam, np.zeros(3))
        diffs.append(np.max(np.abs(a.image - b.image)))
    assert all(d2 <= d1 for d1, d2 in zip(diffs, diffs[1:]))


def test_blur_backward_zero_upstream():
    rng = np.random.default_rng(6)
    scene = random_scene(rng, 8)
    cam = small_camera(16)
    traj = random_trajectory(rng, order=3, scale=0.03)
    params = random_alignment(rng, 4)
    g = synthesize_blur_backward(scene, traj, params, cam, np.zeros(3),
                                 np.zeros((16, 16, 3)))
    assert not g.scene.positions.any()
    assert not g.control_twists.any()
    assert not g.alignment_raw.any()


def test_blur_backward_constant_trajectory_symmetry():
    # identical sub-frames + partition of unity -> identical control grads
    rng = np.random.default_rng(7)
    scene = random_scene(rng, 8)
    cam = small_camera(16)
    from blursplat.lie import log_se3
    traj = BezierTrajectory.constant(log_se3(front_pose(None)), order=4)
    g = synthesize_blur_backward(scene, traj, AlignmentParams.even(5), cam,
                                 np.zeros(3), np.ones((16, 16, 3)))
    per_weight = g.control_twists / np.array(
        [np.sum([__import__("math").comb(4, k) * t ** k * (1 - t) ** (4 - k)
                 for t in np.arange(5) / 4.0]) for k in range(5)])[:, None]
    for k in range(1, 5):
        assert np.allclose(per_weight[k], per_weight[0], atol=1e-9)


def test_blur_backward_rejects_mismatched_upstream():
    rng = np.random.default_rng(8)
    scene = random_scene(rng, 4)
    cam = small_camera(16)
    traj = random_trajectory(rng, order=3, scale=0.02)
    with pytest.raises(ValueError):
        synthesize_blur_backward(scene, traj, AlignmentParams.even(3), cam,
                                 np.zeros(3), np.zeros((4, 4, 3)))


def test_blur_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    scene = random_scene(rng, 6)
    cam = small_camera(16)
    traj = random_trajectory(rng, order=3, scale=0.03,
                             around=np.array([0, 0, 2.5, 0, 0, 0.0]))
    params = random_alignment(rng, 4)
    bg = np.array([0.1, 0.1, 0.1])
    upstream = rng.normal(0, 1, (16, 16, 3))
    g = synthesize_blur_backward(scene, traj, params, cam, bg, upstream)

    def loss(scn=None, tr=None, pr=None):
        out = synthesize_blur(scn or scene, tr or traj, pr or params, cam, bg)
        return float(np.sum(upstream * out.image))

    # control twists
    for k in range(4):
        for j in range(6):
            def shifted(delta, k=k, j=j):
                c = traj.control_twists.copy()
                c[k, j] += delta
                return loss(tr=BezierTrajectory(c))

            ok, err = fd_matches(shifted, g.control_twists[k, j])
            assert ok, ("control", k, j, err)

    # alignment raws (first entry has an identically zero gradient)
    for j in range(4):
        def shifted(delta, j=j):
            r = params.raw.copy()
            r[j] += delta
            return loss(pr=AlignmentParams(r))

        ok, err = fd_matches(shifted, g.alignment_raw[j])
        assert ok, ("raw", j, err)

    # a sample of scene parameters through the full pipeline
    for i in (0, 3, 5):
        for k in range(3):
            def shifted(delta, i=i, k=k):
                s = scene.copy()
                s.positions[i, k] += delta
                return loss(scn=s)

            ok, err = fd_matches(shifted, g.scene.positions[i, k])
            assert ok, ("pos", i, k, err)
