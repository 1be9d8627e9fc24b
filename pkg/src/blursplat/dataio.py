"""Dataset ingestion and generation: COLMAP text models, 8-bit images,
trajectory files, and self-contained synthetic ground-truth bundles."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .blur import gamma_correct, synthesize_blur
from .lie import RigidPose, Twist, exp_se3, log_se3
from .rasterizer import render
from .scene import Camera, GaussianScene, logit, quat_to_rotmat, save_scene_ply
from .trajectory import AlignmentParams, BezierTrajectory, bezier_eval


class ParseError(ValueError):
    """Malformed line in a COLMAP text table."""


class UnsupportedFormatError(ValueError):
    """Camera model this loader does not handle."""


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# --- COLMAP text model ---

@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray     # (w, x, y, z), world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str

    @property
    def pose(self) -> RigidPose:
        return RigidPose(quat_to_rotmat(self.qvec), self.tvec)


@dataclass
class ColmapModel:
    cameras: dict
    images: list
    points: np.ndarray        # (n, 3)
    point_colors: np.ndarray  # (n, 3) in [0, 1]
    point_errors: np.ndarray
    point_ids: np.ndarray


def _data_lines(path: Path):
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield lineno, stripped


def load_colmap_text(directory) -> ColmapModel:
    """Parse cameras.txt / images.txt / points3D.txt from a directory.

    Supports PINHOLE and SIMPLE_PINHOLE camera models; COLMAP's
    world-to-camera pose convention is kept as-is.
    """
    directory = Path(directory)
    cameras = {}
    path = directory / "cameras.txt"
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed camera line") from exc
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params
            cameras[cam_id] = Camera(f, f, cx, cy, width, height)
        elif model == "PINHOLE":
            fx, fy, cx, cy = params
            cameras[cam_id] = Camera(fx, fy, cx, cy, width, height)
        else:
            raise UnsupportedFormatError(f"{path}:{lineno}: camera model {model}")

    images = []
    path = directory / "images.txt"
    expect_points2d = False
    # Image records are two lines each (the second, possibly empty, lists 2D
    # features), so blank lines must be kept while pairing.
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if expect_points2d:
            expect_points2d = False  # 2D feature line, ignored
            continue
        if not line:
            continue
        parts = line.split()
        try:
            images.append(ColmapImage(
                image_id=int(parts[0]),
                qvec=np.array([float(p) for p in parts[1:5]]),
                tvec=np.array([float(p) for p in parts[5:8]]),
                camera_id=int(parts[8]),
                name=parts[9]))
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed image line") from exc
        expect_points2d = True

    pts, cols, errs, ids = [], [], [], []
    path = directory / "points3D.txt"
    for lineno, line in _data_lines(path):
        parts = line.split()
        try:
            ids.append(int(parts[0]))
            pts.append([float(p) for p in parts[1:4]])
            cols.append([int(p) / 255.0 for p in parts[4:7]])
            errs.append(float(parts[7]))
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed point line") from exc
    return ColmapModel(cameras, images,
                       np.array(pts).reshape(-1, 3),
                       np.array(cols).reshape(-1, 3),
                       np.array(errs), np.array(ids, dtype=np.int64))


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_colmap_text(model: ColmapModel, directory):
    """Re-emit the three text tables with stable float formatting, so a
    write -> read -> write cycle is byte-identical."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cameras.txt", "w") as f:
        f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam_id in sorted(model.cameras):
            c = model.cameras[cam_id]
            f.write(f"{cam_id} PINHOLE {c.width} {c.height} "
                    f"{_fmt(c.fx)} {_fmt(c.fy)} {_fmt(c.cx)} {_fmt(c.cy)}\n")
    with open(directory / "images.txt", "w") as f:
        f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        for im in model.images:
            vals = " ".join(_fmt(v) for v in np.concatenate([im.qvec, im.tvec]))
            f.write(f"{im.image_id} {vals} {im.camera_id} {im.name}\n\n")
    with open(directory / "points3D.txt", "w") as f:
        f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
        for pid, p, c, e in zip(model.point_ids, model.points,
                                model.point_colors, model.point_errors):
            rgb = " ".join(str(int(round(v * 255.0))) for v in c)
            f.write(f"{pid} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {rgb} {_fmt(e)}\n")


# --- images ---

def read_image(path) -> np.ndarray:
    """8-bit RGB file -> float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise IOError(f"cannot read image {path}") from exc
    return arr / 255.0


def write_image(image: np.ndarray, path):
    """Float [0, 1] -> rounded 8-bit RGB file."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits without touching disk."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# --- trajectory files ---

_TRAJ_MAGIC = b"BSTRAJ01"


def save_trajectory(path, traj: BezierTrajectory, params: AlignmentParams):
    """Versioned binary: control twists then alignment raws, little-endian f64."""
    with open(path, "wb") as f:
        f.write(_TRAJ_MAGIC)
        f.write(struct.pack("<ii", traj.order, params.n))
        f.write(traj.control_twists.astype("<f8").tobytes())
        f.write(params.raw.astype("<f8").tobytes())


def load_trajectory(path) -> tuple[BezierTrajectory, AlignmentParams]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _TRAJ_MAGIC:
        raise ValueError(f"{path} is not a trajectory file")
    order, n = struct.unpack("<ii", blob[8:16])
    off = 16
    ctrl = np.frombuffer(blob, dtype="<f8", count=(order + 1) * 6, offset=off)
    off += (order + 1) * 6 * 8
    raw = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
    return (BezierTrajectory(ctrl.reshape(order + 1, 6).copy()),
            AlignmentParams(raw.copy()))


# --- datasets ---

@dataclass
class BlurObservation:
    """One training datum: blurry gamma-space image, initial pose, intrinsics."""

    image: np.ndarray
    initial_pose: RigidPose
    camera: Camera
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != (self.camera.height, self.camera.width):
            raise ValueError("image dimensions do not match the camera")


@dataclass
class Dataset:
    observations: list
    points: np.ndarray
    point_colors: np.ndarray


def load_dataset(directory) -> Dataset:
    """Bundle directory: sparse/ COLMAP text model + images/ 8-bit files."""
    directory = Path(directory)
    model = load_colmap_text(directory / "sparse")
    obs = []
    for im in model.images:
        cam = model.cameras[im.camera_id]
        obs.append(BlurObservation(read_image(directory / "images" / im.name),
                                   im.pose, cam, im.name))
    if not obs:
        raise ValueError(f"no observations in {directory}")
    return Dataset(obs, model.points, model.point_colors)


# --- synthetic ground-truth bundles ---

@dataclass(frozen=True)
class SyntheticConfig:
    n_gaussians: int = 300
    n_cameras: int = 20
    n_eval_views: int = 4
    image_size: int = 128
    n_subframes: int = 21
    bezier_order: int = 9
    blur_rotation_deg: float = 2.0
    blur_translation_frac: float = 0.02
    perturb_rotation_deg: float = 1.0
    perturb_translation_frac: float = 0.01
    # primitive footprint/opacity ranges: smaller, more opaque primitives
    # sharpen the images' texture (better pose observability at 8 bits) but
    # make the scene harder to fit at a fixed resolution and budget
    scale_min: float = 0.018
    scale_max: float = 0.05
    opacity_min: float = 0.5
    opacity_max: float = 0.97
    seed: int = 0


@dataclass
class SyntheticBundle:
    observations: list
    gt_scene: GaussianScene
    gt_trajectories: dict      # id -> (BezierTrajectory, AlignmentParams)
    gt_alignment: dict         # id -> AlignmentParams (same objects, by name)
    sharp_eval_views: list     # (RigidPose, gamma-space image)
    pose_perturbations: dict   # id -> (rotation degrees, translation fraction)
    extent: float


def _look_at_pose(center: np.ndarray, target: np.ndarray) -> RigidPose:
    """World-to-camera pose for a camera at center looking toward target,
    +z forward, y roughly down-aligned with world -z up convention."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_c2w = np.stack([right, down, fwd], axis=1)
    rot = r_c2w.T
    return RigidPose(rot, -rot @ center)


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _trajectory_deviation(traj, mid_pose, samples=9):
    """Max (rotation rad, translation) deviation from mid_pose over the curve."""
    rot = trans = 0.0
    for t in np.linspace(0.0, 1.0, samples):
        p = bezier_eval(traj, t)
        rel = p.compose(mid_pose.inverse())
        ang = math.acos(np.clip((np.trace(rel.rotation) - 1.0) / 2.0, -1.0, 1.0))
        rot = max(rot, ang)
        # translation deviation measured between camera centers
        c_p = -p.rotation.T @ p.translation
        c_m = -mid_pose.rotation.T @ mid_pose.translation
        trans = max(trans, float(np.linalg.norm(c_p - c_m)))
    return rot, trans


def _perturb_pose(pose: RigidPose, rot_rad: float, trans: float, rng) -> RigidPose:
    axis = _random_unit(rng)
    delta_r = exp_se3(Twist(np.zeros(3), axis * rot_rad)).rotation
    delta_t = _random_unit(rng) * trans
    return RigidPose(delta_r @ pose.rotation, delta_r @ pose.translation + delta_t)


def generate_synthetic(config: SyntheticConfig, out_dir) -> SyntheticBundle:
    """Build a random colorful Gaussian scene, hand-shake trajectories, and
    blurry observations; write the whole bundle to out_dir.

    Reported initial poses are the mid-trajectory (t = 0.5) poses with the
    configured perturbation applied, simulating SfM error; images are
    quantized to 8 bits exactly as written to disk.
    """
    if config.n_cameras < 1 or config.n_gaussians < 1:
        raise ValueError("need at least one camera and one Gaussian")
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir)
    (out_dir / "sparse").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    (out_dir / "ground_truth" / "eval").mkdir(parents=True, exist_ok=True)

    n = config.n_gaussians
    positions = rng.uniform(-0.5, 0.5, size=(n, 3))
    extent = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    log_scales = (np.repeat(np.log(rng.uniform(config.scale_min, config.scale_max,
                                               size=(n, 1))), 3, axis=1)
                  + rng.normal(scale=0.25, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    opacity = logit(rng.uniform(config.opacity_min, config.opacity_max, size=n))
    gt_scene = GaussianScene(positions, log_scales, quats, colors, opacity)
    gt_scene.normalize_quaternions()

    size = config.image_size
    focal = 1.0 * size
    cam = Camera(focal, focal, size / 2.0, size / 2.0, size, size)
    background = np.zeros(3)

    total_views = config.n_cameras + config.n_eval_views
    angles = np.linspace(-0.6, 0.6, total_views)
    rng.shuffle(angles)
    train_angles = np.sort(angles[:config.n_cameras])
    eval_angles = np.sort(angles[config.n_cameras:])

    def base_pose(theta):
        # cameras orbit close to the cloud: a short working distance keeps
        # parallax strong, which is what makes translation observable
        center = np.array([1.7 * math.sin(theta),
                           0.35 * math.sin(2.1 * theta),
                           -1.7 * math.cos(theta)])
        return _look_at_pose(center, np.zeros(3))

    rot_bound = math.radians(config.blur_rotation_deg)
    trans_bound = config.blur_translation_frac * extent

    observations = []
    gt_trajectories = {}
    gt_alignment = {}
    perturbations = {}
    colmap_images = []
    manifest_lines = []
    for i, theta in enumerate(train_angles):
        name = f"blur_{i:03d}.png"
        base = base_pose(theta)
        xi_mid = log_se3(base).as_vector()
        sweep = np.concatenate([_random_unit(rng) * trans_bound,
                                _random_unit(rng) * rot_bound])
        wiggle = rng.normal(size=(config.bezier_order + 1, 6)) * 0.15
        offsets = (np.linspace(-0.5, 0.5, config.bezier_order + 1)[:, None] * sweep
                   + wiggle * np.abs(sweep)[None, :])
        traj = BezierTrajectory(xi_mid[None, :] + offsets)
        # rescale until the realized pose deviation honors the blur bounds
        for _ in range(8):
            mid = bezier_eval(traj, 0.5)
            rot_dev, trans_dev = _trajectory_deviation(traj, mid)
            scale = max(rot_dev / rot_bound if rot_bound > 0 else 0.0,
                        trans_dev / trans_bound if trans_bound > 0 else 0.0)
            if scale <= 1.0:
                break
            traj = BezierTrajectory(xi_mid[None, :]
                                    + (traj.control_twists - xi_mid[None, :]) / scale)
        params = AlignmentParams(rng.normal(scale=0.2, size=config.n_subframes))

        blurry = synthesize_blur(gt_scene, traj, params, cam, background)
        img = quantize(blurry.image)
        write_image(img, out_dir / "images" / name)

        rot_p = math.radians(rng.uniform(0.3, 1.0) * config.perturb_rotation_deg)
        trans_p = rng.uniform(0.3, 1.0) * config.perturb_translation_frac * extent
        mid = bezier_eval(traj, 0.5)
        reported = (_perturb_pose(mid, rot_p, trans_p, rng)
                    if (config.perturb_rotation_deg > 0 or config.perturb_translation_frac > 0)
                    else mid)

        observations.append(BlurObservation(img, reported, cam, name))
        gt_trajectories[name] = (traj, params)
        gt_alignment[name] = params
        perturbations[name] = (math.degrees(rot_p), trans_p / extent)
        save_trajectory(out_dir / "ground_truth" / f"traj_{i:03d}.bin", traj, params)
        colmap_images.append(ColmapImage(i + 1, rotmat_to_quat(reported.rotation),
                                         reported.translation, 1, name))
        manifest_lines.append(f"perturb {name} {perturbations[name][0]:.6f} "
                              f"{perturbations[name][1]:.6f}")

    sharp_eval = []
    eval_pose_lines = []
    for i, theta in enumerate(eval_angles):
        pose = base_pose(theta)
        img = quantize(gamma_correct(render(gt_scene, pose, cam, background)))
        name = f"eval_{i:03d}.png"
        write_image(img, out_dir / "ground_truth" / "eval" / name)
        sharp_eval.append((pose, img))
        q = rotmat_to_quat(pose.rotation)
        vals = " ".join(_fmt(v) for v in np.concatenate([q, pose.translation]))
        eval_pose_lines.append(f"{name} {vals}")

    model = ColmapModel(
        cameras={1: cam},
        images=colmap_images,
        points=gt_scene.positions,
        point_colors=gt_scene.colors,
        point_errors=np.zeros(n),
        point_ids=np.arange(1, n + 1))
    write_colmap_text(model, out_dir / "sparse")
    save_scene_ply(gt_scene, out_dir / "ground_truth" / "scene.ply")
    (out_dir / "ground_truth" / "eval_poses.txt").write_text(
        "\n".join(eval_pose_lines) + "\n")

    cfg_lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    (out_dir / "manifest.txt").write_text(
        "\n".join(["[config]"] + cfg_lines + [f"extent = {_fmt(extent)}", "",
                   "[perturbations]"] + manifest_lines) + "\n")

    return SyntheticBundle(observations, gt_scene, gt_trajectories, gt_alignment,
                           sharp_eval, perturbations, extent)
