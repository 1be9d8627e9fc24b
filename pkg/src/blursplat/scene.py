"""Gaussian primitive storage, covariance construction, scene initialization,
and point-cloud checkpoint serialization.

The scene is stored struct-of-arrays so renders and optimizer updates
vectorize; `Gaussian3D` is a convenience view of a single primitive.
Constrained quantities live in unconstrained coordinates: per-axis scales
as logs, opacity as a logit, orientation as a quaternion renormalized
after every optimizer step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

INIT_OPACITY = 0.1  # base-3DGS default


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics, pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class Gaussian3D:
    """One primitive: position, log scales, unit quaternion, RGB, opacity logit."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation_q: np.ndarray
    color: np.ndarray
    opacity_logit: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation_q = np.asarray(self.rotation_q, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions (w, x, y, z); accepts (4,) or (n, 4).

    Quaternions are normalized internally, so any nonzero q is valid.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class GaussianScene:
    """Growable primitive set plus densification bookkeeping.

    grad_accum holds the running sum of view-space positional gradient
    magnitudes per Gaussian, grad_count the matching denominators; both
    are kept in lockstep with the primitive arrays through every
    densify/prune mutation.
    """

    def __init__(self, positions, log_scales, rotations_q, colors, opacity_logits):
        # copy so the scene owns its storage: training mutates these arrays
        # in place and must never alias caller data (e.g. dataset points)
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations_q = np.array(rotations_q, dtype=np.float64).reshape(n, 4)
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.positions[i], self.log_scales[i], self.rotations_q[i],
                          self.colors[i], float(self.opacity_logits[i]))

    def normalize_quaternions(self):
        self.rotations_q /= np.linalg.norm(self.rotations_q, axis=1, keepdims=True)

    def covariances(self) -> np.ndarray:
        """(n, 3, 3) stack of R S S^T R^T covariances."""
        r = quat_to_rotmat(self.rotations_q)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def accumulate_grad_stats(self, norms: np.ndarray, seen: np.ndarray):
        """Add view-space gradient magnitudes for the Gaussians hit this pass."""
        self.grad_accum += norms
        self.grad_count += seen.astype(np.float64)

    def reset_grad_stats(self):
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self))

    def keep(self, mask: np.ndarray):
        """Drop all Gaussians where mask is False, bookkeeping included."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.log_scales = self.log_scales[mask]
        self.rotations_q = self.rotations_q[mask]
        self.colors = self.colors[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.grad_accum = self.grad_accum[mask]
        self.grad_count = self.grad_count[mask]

    def append(self, positions, log_scales, rotations_q, colors, opacity_logits):
        """Add Gaussians with fresh (zero) gradient statistics."""
        k = np.asarray(positions).reshape(-1, 3).shape[0]
        self.positions = np.vstack([self.positions, np.asarray(positions).reshape(-1, 3)])
        self.log_scales = np.vstack([self.log_scales, np.asarray(log_scales).reshape(-1, 3)])
        self.rotations_q = np.vstack([self.rotations_q, np.asarray(rotations_q).reshape(-1, 4)])
        self.colors = np.vstack([self.colors, np.asarray(colors).reshape(-1, 3)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.asarray(opacity_logits).reshape(-1)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(k)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(k)])

    def check_consistent(self):
        n = len(self)
        assert self.log_scales.shape == (n, 3)
        assert self.rotations_q.shape == (n, 4)
        assert self.colors.shape == (n, 3)
        assert self.opacity_logits.shape == (n,)
        assert self.grad_accum.shape == (n,)
        assert self.grad_count.shape == (n,)
        assert np.all(self.grad_count >= 0)

    def copy(self) -> "GaussianScene":
        out = GaussianScene(self.positions.copy(), self.log_scales.copy(),
                            self.rotations_q.copy(), self.colors.copy(),
                            self.opacity_logits.copy())
        out.grad_accum = self.grad_accum.copy()
        out.grad_count = self.grad_count.copy()
        return out


def covariance3d(g: Gaussian3D) -> np.ndarray:
    """3x3 covariance R(q) diag(exp(2 log_scale)) R(q)^T of one primitive."""
    r = quat_to_rotmat(g.rotation_q)
    s2 = np.exp(2.0 * g.log_scale)
    return r @ np.diag(s2) @ r.T


def init_scene(points, colors) -> GaussianScene:
    """One Gaussian per sparse point.

    Initial scale is isotropic at the mean distance to the 3 nearest
    neighbors (base-3DGS rule), opacity starts at INIT_OPACITY, rotation
    at identity.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ValueError("point list is empty")
    if colors.shape[0] != points.shape[0]:
        raise ValueError("points and colors differ in length")
    n = points.shape[0]
    if n == 1:
        mean_dist = np.array([0.1])
    else:
        k = min(4, n)  # self + up to 3 neighbors
        dists, _ = cKDTree(points).query(points, k=k)
        mean_dist = dists[:, 1:].mean(axis=1)
    mean_dist = np.maximum(mean_dist, 1e-7)
    log_scales = np.log(mean_dist)[:, None].repeat(3, axis=1)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    opacity = np.full(n, float(logit(INIT_OPACITY)))
    return GaussianScene(points, log_scales, quats, colors, opacity)


# --- point-cloud checkpoint (binary little-endian PLY) ---

_PLY_FIELDS = (["x", "y", "z"]
               + [f"log_scale_{i}" for i in range(3)]
               + [f"rot_{i}" for i in range(4)]
               + ["red", "green", "blue", "opacity_logit"])


def save_scene_ply(scene: GaussianScene, path, iteration: int = 0):
    """Write the scene as binary little-endian PLY, one vertex per Gaussian.

    Positions and colors use standard names so generic viewers can show
    them; the iteration count rides in a comment line.
    """
    data = np.hstack([scene.positions, scene.log_scales, scene.rotations_q,
                      scene.colors, scene.opacity_logits[:, None]]).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0",
              f"comment iteration {iteration}",
              f"element vertex {len(scene)}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_scene_ply(path) -> tuple[GaussianScene, int]:
    """Read a scene checkpoint written by save_scene_ply; returns (scene, iteration)."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    lines = blob[:end].decode("ascii").splitlines()
    iteration = 0
    n = None
    props = []
    for line in lines:
        if line.startswith("comment iteration"):
            iteration = int(line.split()[-1])
        elif line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if n is None or props != _PLY_FIELDS:
        raise ValueError(f"{path} is not a scene checkpoint PLY")
    data = np.frombuffer(blob[end:], dtype="<f4").reshape(n, len(props)).astype(np.float64)
    scene = GaussianScene(data[:, 0:3], data[:, 3:6], data[:, 6:10],
                          data[:, 10:13], data[:, 13])
    return scene, iteration
