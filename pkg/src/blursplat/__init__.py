"""Differentiable 3D Gaussian splatting with joint camera-motion deblurring."""

from .lie import RigidPose, Twist, exp_se3, log_se3
from .scene import Camera, Gaussian3D, GaussianScene, covariance3d, init_scene
from .trajectory import AlignmentParams, BezierTrajectory, alignment_times, bezier_eval, subframe_poses
from .rasterizer import render, render_backward, project_gaussian
from .blur import synthesize_blur, synthesize_blur_backward, gamma_correct
from .losses import LossReport, lambda_schedule, rgb_loss, smoothness_loss
from .metrics import psnr, ssim

__version__ = "0.1.0"
