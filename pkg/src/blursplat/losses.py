"""Training objective: L1 reconstruction, temporal smoothness over adjacent
sub-frames, and the annealed weighting between them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossReport:
    rgb_loss: float
    smooth_loss: float
    lam: float

    @property
    def total(self) -> float:
        return self.rgb_loss + self.lam * self.smooth_loss


def _check_pair(pred, obs):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    return pred, obs


def rgb_loss(pred, obs) -> float:
    """Mean absolute difference over all pixels and channels.

    The mean (rather than sum) keeps the loss scale independent of image
    resolution.
    """
    pred, obs = _check_pair(pred, obs)
    return float(np.mean(np.abs(pred - obs)))


def rgb_loss_backward(pred, obs) -> np.ndarray:
    """d rgb_loss / d pred (subgradient sign at ties)."""
    pred, obs = _check_pair(pred, obs)
    return np.sign(pred - obs) / pred.size


def smoothness_loss(subframes) -> float:
    """(1/N) sum over adjacent sub-frame pairs of the global L2 norm of
    their per-pixel RGB difference."""
    if len(subframes) < 2:
        raise ValueError("need at least 2 sub-frames")
    n = len(subframes)
    total = 0.0
    for a, b in zip(subframes[:-1], subframes[1:]):
        a, b = _check_pair(a, b)
        total += float(np.sqrt(np.sum((b - a) ** 2)))
    return total / n


def smoothness_loss_backward(subframes) -> list[np.ndarray]:
    """Gradients of smoothness_loss with respect to each sub-frame."""
    if len(subframes) < 2:
        raise ValueError("need at least 2 sub-frames")
    n = len(subframes)
    grads = [np.zeros_like(np.asarray(f, dtype=np.float64)) for f in subframes]
    for i in range(n - 1):
        a = np.asarray(subframes[i], dtype=np.float64)
        b = np.asarray(subframes[i + 1], dtype=np.float64)
        diff = b - a
        norm = np.sqrt(np.sum(diff ** 2))
        if norm > 0.0:
            g = diff / (norm * n)
            grads[i + 1] += g
            grads[i] -= g
    return grads


def lambda_schedule(iteration: int, total_iters: int,
                    start: float = 0.05, end: float = 0.01) -> float:
    """Linear anneal of the smoothness weight from start down to end."""
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not (0 <= iteration <= total_iters):
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    frac = iteration / total_iters
    # convex combination so both endpoints are hit exactly
    return (1.0 - frac) * start + frac * end
