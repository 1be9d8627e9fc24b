"""Joint optimization loop: Adam parameter groups, learning-rate and
densification-threshold schedules, Gaussian densify/prune, checkpoints.

Camera-motion learning rates follow the published recipe (1e-2 translation,
1e-3 rotation, 3e-3 alignment, halved every 15k iterations); scene-parameter
rates follow base-3DGS defaults.  The densification threshold anneals
geometrically from a multiple of its floor so the scene stays coarse until
camera motion has converged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .blur import synthesize_blur, synthesize_blur_backward
from .dataio import Dataset, load_trajectory, save_trajectory
from .lie import Twist, log_se3
from .losses import (LossReport, lambda_schedule, rgb_loss, rgb_loss_backward,
                     smoothness_loss, smoothness_loss_backward)
from .scene import GaussianScene, init_scene, load_scene_ply, logit, quat_to_rotmat, save_scene_ply
from .trajectory import AlignmentParams, BezierTrajectory


class NonFiniteLossError(RuntimeError):
    def __init__(self, observation_index: int):
        super().__init__(f"non-finite loss at observation {observation_index}")
        self.observation_index = observation_index


@dataclass(frozen=True)
class TrainConfig:
    # blur model
    n_subframes: int = 21
    bezier_order: int = 9
    total_iters: int = 10000
    # camera-motion learning rates
    lr_translation: float = 1e-2
    lr_rotation: float = 1e-3
    lr_alignment: float = 3e-3
    lr_decay_half_life: int = 15000
    # scene learning rates (base-3DGS defaults; position scaled by extent)
    lr_position: float = 1.6e-4
    lr_position_final_mult: float = 0.01
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_quat: float = 1e-3
    # densification
    theta_final: float = 2e-4
    theta_init_mult: float = 5.0
    theta_anneal_end_frac: float = 0.3
    anneal_densification: bool = True
    densify_interval: int = 200
    densify_start: int = 400
    densify_end_frac: float = 0.8
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 0
    percent_dense: float = 0.01
    split_scale_shrink: float = 1.6
    # loss
    lambda_start: float = 0.05
    lambda_end: float = 0.01
    # staged optimization: optionally fit the scene alone first (cameras
    # frozen at their initial poses), and/or finish with camera-only
    # polish against the frozen scene (camera optimizer moments restarted
    # at each polish phase). With polish_cycles > 1, polish phases
    # alternate with scene-only re-fit phases of polish_scene_iters each,
    # ending on a camera phase (block-coordinate descent: a scene re-fit
    # under the polished cameras removes pose bias baked in by the joint
    # phase, which the next camera polish can then recover from).
    warmup_scene_only_iters: int = 0
    polish_camera_only_iters: int = 0
    polish_cycles: int = 1
    polish_scene_iters: int = 0
    # camera lrs are rescaled by this during polish phases; each phase
    # restarts the lr-decay clock, so a fraction < 1 keeps the restarted
    # steps proportionate to the small remaining pose error
    polish_lr_mult: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_translation, self.lr_rotation, self.lr_alignment,
               self.lr_position, self.lr_color, self.lr_opacity,
               self.lr_scale, self.lr_quat) <= 0:
            raise ValueError("learning rates must be positive")
        if self.theta_init_mult < 1:
            raise ValueError("theta_init_mult must be >= 1")
        if not (0 < self.theta_anneal_end_frac <= 1):
            raise ValueError("theta_anneal_end_frac must be in (0, 1]")
        if (self.warmup_scene_only_iters < 0 or self.polish_camera_only_iters < 0
                or self.polish_scene_iters < 0):
            raise ValueError("stage lengths must be non-negative")
        if self.polish_cycles < 1:
            raise ValueError("polish_cycles must be >= 1")
        if self.polish_lr_mult <= 0:
            raise ValueError("polish_lr_mult must be positive")
        if (self.warmup_scene_only_iters + self.polish_block_iters()
                >= self.total_iters):
            raise ValueError("warmup + polish must leave joint iterations")

    def polish_block_iters(self) -> int:
        """Total length of the trailing polish block (camera phases plus the
        scene re-fits between them); zero when polishing is disabled."""
        if self.polish_camera_only_iters == 0:
            return 0
        return (self.polish_cycles * self.polish_camera_only_iters
                + (self.polish_cycles - 1) * self.polish_scene_iters)


def config_to_text(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(config))


def config_from_text(text: str) -> TrainConfig:
    kwargs = {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    defaults = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'name = value'")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in types:
            raise ValueError(f"config line {lineno}: unknown field {name!r}")
        current = getattr(defaults, name)
        if isinstance(current, bool):
            kwargs[name] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            kwargs[name] = int(value)
        else:
            kwargs[name] = float(value)
    return TrainConfig(**kwargs)


def lr_at(config: TrainConfig, group: str, iteration: int) -> float:
    """Camera-motion learning rate: base * 0.5^(iter / half_life)."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    bases = {"translation": config.lr_translation,
             "rotation": config.lr_rotation,
             "alignment": config.lr_alignment}
    if group not in bases:
        raise ValueError(f"unknown parameter group {group!r}")
    return bases[group] * 0.5 ** (iteration / config.lr_decay_half_life)


def theta_at(config: TrainConfig, iteration: int) -> float:
    """Densification threshold: geometric anneal from init_mult * final
    down to final over the first theta_anneal_end_frac of training."""
    if not config.anneal_densification:
        return config.theta_final
    end = config.theta_anneal_end_frac * config.total_iters
    u = min(iteration / end, 1.0) if end > 0 else 1.0
    return config.theta_final * config.theta_init_mult ** (1.0 - u)


class Adam:
    """First/second-moment adaptive updates, one moment pair per named
    parameter; per-Gaussian rows are remapped through densify/prune."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float):
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
            self.t[key] = 0
        self.t[key] += 1
        t = self.t[key]
        self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
        self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad ** 2
        m_hat = self.m[key] / (1 - self.beta1 ** t)
        v_hat = self.v[key] / (1 - self.beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, key: str, keep_mask: np.ndarray, n_new: int):
        """Row-filter the moments and append zero rows for new Gaussians."""
        if key not in self.m:
            return
        for buf in (self.m, self.v):
            kept = buf[key][keep_mask]
            pad = np.zeros((n_new,) + kept.shape[1:])
            buf[key] = np.concatenate([kept, pad], axis=0)

    def reset(self, key: str):
        if key in self.m:
            self.m[key][:] = 0.0
            self.v[key][:] = 0.0
            self.t[key] = 0


_SCENE_KEYS = ("positions", "log_scales", "rotations_q", "colors", "opacity_logits")


class TrainState:
    """Everything the loop mutates: scene, per-image motion parameters,
    optimizer moments, iteration counter, RNG."""

    def __init__(self, scene: GaussianScene, trajectories, alignments,
                 config: TrainConfig, extent: float, iteration: int = 0):
        self.scene = scene
        self.trajectories = trajectories
        self.alignments = alignments
        self.config = config
        self.extent = extent
        self.iteration = iteration
        self.adam = Adam()
        self.rng = np.random.default_rng(config.seed)
        self._epoch_order = []
        self.loss_history = []

    def next_observation(self) -> int:
        """Uniform without replacement per epoch."""
        if not self._epoch_order:
            order = self.rng.permutation(len(self.trajectories))
            self._epoch_order = list(order)
        return int(self._epoch_order.pop())


def init_training(dataset: Dataset, config: TrainConfig) -> TrainState:
    """Scene from the sparse points; each trajectory a constant curve at the
    image's initial pose; alignment times exactly evenly spaced."""
    if not dataset.observations:
        raise ValueError("dataset has no observations")
    if dataset.points.shape[0] == 0:
        raise ValueError("dataset has no sparse points")
    scene = init_scene(dataset.points, dataset.point_colors)
    trajectories = []
    alignments = []
    for obs in dataset.observations:
        xi = log_se3(obs.initial_pose)
        trajectories.append(BezierTrajectory.constant(xi, config.bezier_order))
        alignments.append(AlignmentParams.even(config.n_subframes))
    extent = float(np.linalg.norm(dataset.points.max(axis=0) - dataset.points.min(axis=0)))
    return TrainState(scene, trajectories, alignments, config, extent)


def _position_lr(state: TrainState) -> float:
    cfg = state.config
    decay = cfg.lr_position_final_mult ** (state.iteration / cfg.total_iters)
    return cfg.lr_position * state.extent * decay


def train_step(state: TrainState, dataset: Dataset, indices=None) -> LossReport:
    """One optimization step over a batch of observations (default: one,
    sampled without replacement per epoch)."""
    cfg = state.config
    if indices is None:
        indices = [state.next_observation()]
    it = state.iteration
    camera_frozen = it < cfg.warmup_scene_only_iters
    scene_frozen = False
    camera_lr_it = it    # iteration driving the camera lr decay
    camera_lr_mult = 1.0
    polish_block = cfg.polish_block_iters()
    polish_start = cfg.total_iters - polish_block
    if polish_block > 0 and it >= polish_start:
        period = cfg.polish_camera_only_iters + cfg.polish_scene_iters
        offset = (it - polish_start) % period
        scene_frozen = offset < cfg.polish_camera_only_iters
        camera_frozen = not scene_frozen
        if scene_frozen:
            # each polish phase is a restart: fresh Adam moments and a
            # fresh lr-decay clock, like a standalone alignment run
            camera_lr_it = offset
            camera_lr_mult = cfg.polish_lr_mult
            if offset == 0:
                for i in range(len(state.trajectories)):
                    for key in (f"traj{i}_trans", f"traj{i}_rot", f"align{i}"):
                        state.adam.reset(key)
    lam = lambda_schedule(min(it, cfg.total_iters), cfg.total_iters,
                          cfg.lambda_start, cfg.lambda_end)
    background = np.zeros(3)
    scale = 1.0 / len(indices)

    rgb_total = smooth_total = 0.0
    scene_grads = {k: np.zeros_like(getattr(state.scene, k)) for k in _SCENE_KEYS}
    motion_grads = []
    for i in indices:
        obs = dataset.observations[i]
        traj = state.trajectories[i]
        params = state.alignments[i]
        fwd = synthesize_blur(state.scene, traj, params, obs.camera, background,
                              retain_subframes=True)
        l_rgb = rgb_loss(fwd.image, obs.image)
        l_smooth = smoothness_loss(fwd.subframe_images)
        if not np.isfinite(l_rgb + l_smooth):
            raise NonFiniteLossError(i)
        rgb_total += l_rgb
        smooth_total += l_smooth

        upstream = rgb_loss_backward(fwd.image, obs.image)
        up_sub = [lam * g for g in smoothness_loss_backward(fwd.subframe_images)]
        g = synthesize_blur_backward(state.scene, traj, params, obs.camera,
                                     background, upstream,
                                     upstream_subframes=up_sub, cached=fwd)
        for k in _SCENE_KEYS:
            scene_grads[k] += scale * getattr(g.scene, k)
        motion_grads.append((i, g.control_twists, g.alignment_raw))
        state.scene.accumulate_grad_stats(g.scene.viewspace_norms, g.scene.seen)

    if not scene_frozen:
        state.adam.step("positions", state.scene.positions,
                        scene_grads["positions"], _position_lr(state))
        state.adam.step("log_scales", state.scene.log_scales,
                        scene_grads["log_scales"], cfg.lr_scale)
        state.adam.step("rotations_q", state.scene.rotations_q,
                        scene_grads["rotations_q"], cfg.lr_quat)
        state.adam.step("colors", state.scene.colors,
                        scene_grads["colors"], cfg.lr_color)
        state.adam.step("opacity_logits", state.scene.opacity_logits,
                        scene_grads["opacity_logits"], cfg.lr_opacity)
        state.scene.normalize_quaternions()
        # colors are plain RGB; project back into [0, 1] after the step
        np.clip(state.scene.colors, 0.0, 1.0, out=state.scene.colors)

    if not camera_frozen:
        for i, g_ctrl, g_raw in motion_grads:
            ctrl = state.trajectories[i].control_twists
            state.adam.step(f"traj{i}_trans", ctrl[:, 0:3], g_ctrl[:, 0:3],
                            camera_lr_mult * lr_at(cfg, "translation", camera_lr_it))
            state.adam.step(f"traj{i}_rot", ctrl[:, 3:6], g_ctrl[:, 3:6],
                            camera_lr_mult * lr_at(cfg, "rotation", camera_lr_it))
            state.adam.step(f"align{i}", state.alignments[i].raw, g_raw,
                            camera_lr_mult * lr_at(cfg, "alignment", camera_lr_it))

    state.iteration += 1
    it = state.iteration

    if (not scene_frozen
            and cfg.densify_start <= it <= cfg.densify_end_frac * cfg.total_iters
            and it % cfg.densify_interval == 0):
        densify_and_prune(state)
    if cfg.opacity_reset_interval > 0 and it % cfg.opacity_reset_interval == 0:
        cap = float(logit(0.01))
        np.minimum(state.scene.opacity_logits, cap, out=state.scene.opacity_logits)
        state.adam.reset("opacity_logits")

    report = LossReport(rgb_total * scale, smooth_total * scale, lam)
    state.loss_history.append((state.iteration, report))
    return report


@dataclass
class DensifySummary:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(state: TrainState) -> DensifySummary:
    """Split high-gradient large Gaussians (scales shrunk, parent removed),
    clone high-gradient small ones, prune near-transparent ones; optimizer
    moments and gradient statistics are remapped to match."""
    cfg = state.config
    scene = state.scene
    theta = theta_at(cfg, state.iteration)
    denom = np.maximum(scene.grad_count, 1.0)
    avg = scene.grad_accum / denom
    exceed = avg > theta
    big = scene.scales.max(axis=1) > cfg.percent_dense * state.extent
    split_mask = exceed & big
    clone_mask = exceed & ~big

    n_old = len(scene)
    new = {k: [] for k in _SCENE_KEYS}

    cloned = int(clone_mask.sum())
    if cloned:
        for k in _SCENE_KEYS:
            new[k].append(getattr(scene, k)[clone_mask])

    n_split = int(split_mask.sum())
    if n_split:
        idx = np.nonzero(split_mask)[0]
        rot = quat_to_rotmat(scene.rotations_q[idx])
        scales = scene.scales[idx]
        for _ in range(2):
            samples = state.rng.normal(size=(n_split, 3)) * scales
            child_pos = scene.positions[idx] + np.einsum("nij,nj->ni", rot, samples)
            new["positions"].append(child_pos)
            new["log_scales"].append(scene.log_scales[idx]
                                     - np.log(cfg.split_scale_shrink))
            new["rotations_q"].append(scene.rotations_q[idx])
            new["colors"].append(scene.colors[idx])
            new["opacity_logits"].append(scene.opacity_logits[idx])

    keep = ~split_mask
    n_new = cloned + 2 * n_split
    scene.keep(keep)
    if n_new:
        scene.append(*[np.concatenate(new[k], axis=0) for k in _SCENE_KEYS])
    for k in _SCENE_KEYS:
        state.adam.remap(k, keep, n_new)

    prune_mask = scene.opacities < cfg.prune_opacity
    pruned = int(prune_mask.sum())
    if pruned:
        scene.keep(~prune_mask)
        for k in _SCENE_KEYS:
            state.adam.remap(k, ~prune_mask, 0)

    scene.reset_grad_stats()
    scene.check_consistent()
    return DensifySummary(cloned=cloned, split=n_split, pruned=pruned)


# --- checkpoints ---

def save_checkpoint(state: TrainState, dataset: Dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scene_ply(state.scene, directory / "scene.ply", state.iteration)
    for i, obs in enumerate(dataset.observations):
        save_trajectory(directory / f"traj_{i:03d}.bin",
                        state.trajectories[i], state.alignments[i])
    np.savez(directory / "optimizer.npz",
             **{f"m_{k}": v for k, v in state.adam.m.items()},
             **{f"v_{k}": v for k, v in state.adam.v.items()},
             t_json=np.array([f"{k}={v}" for k, v in sorted(state.adam.t.items())]))
    manifest = ["[run]", f"iteration = {state.iteration}",
                f"extent = {state.extent}",
                f"observations = {len(dataset.observations)}", "",
                "[config]", config_to_text(state.config)]
    (directory / "manifest.txt").write_text("\n".join(manifest))
    with open(directory / "losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "rgb_loss", "smooth_loss", "lambda", "total"])
        for it, rep in state.loss_history:
            w.writerow([it, repr(rep.rgb_loss), repr(rep.smooth_loss),
                        repr(rep.lam), repr(rep.total)])


def load_checkpoint(directory, dataset: Dataset) -> TrainState:
    directory = Path(directory)
    scene, iteration = load_scene_ply(directory / "scene.ply")
    manifest = (directory / "manifest.txt").read_text()
    extent = 1.0
    cfg_lines = []
    in_cfg = False
    for line in manifest.splitlines():
        if line.strip() == "[config]":
            in_cfg = True
            continue
        if in_cfg:
            cfg_lines.append(line)
        elif line.startswith("extent"):
            extent = float(line.split("=", 1)[1])
    config = config_from_text("\n".join(cfg_lines))
    trajectories, alignments = [], []
    for i in range(len(dataset.observations)):
        traj, params = load_trajectory(directory / f"traj_{i:03d}.bin")
        trajectories.append(traj)
        alignments.append(params)
    state = TrainState(scene, trajectories, alignments, config, extent, iteration)
    opt_path = directory / "optimizer.npz"
    if opt_path.exists():
        with np.load(opt_path, allow_pickle=True) as data:
            for name in data.files:
                if name.startswith("m_"):
                    state.adam.m[name[2:]] = data[name]
                elif name.startswith("v_"):
                    state.adam.v[name[2:]] = data[name]
                elif name == "t_json":
                    for entry in data[name]:
                        k, v = str(entry).split("=")
                        state.adam.t[k] = int(v)
    return state
