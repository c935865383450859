"""Training objective: surrogate task losses, the switch load-balancing
penalty, and their weighted combination.

The switch loss is N * sum_i f_i * P_i over N experts, where f is the
realized fraction of (example, slot) assignments and P the mean routing
probability.  Its gradient flows through P only; the discrete loads f are
treated as constants.  The three task losses are declared surrogates:
perception reconstructs the planted channel templates from the aligned
features, prediction decodes the next ego displacement from the motion
query, planning regresses the future trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .router import LoadStats


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.5    # perception
    alpha2: float = 0.5    # prediction
    alpha3: float = 1.0    # planning
    alpha4: float = 0.01   # switch

    def __post_init__(self):
        values = (self.alpha1, self.alpha2, self.alpha3, self.alpha4)
        if any(a < 0 for a in values):
            raise ValueError("loss weights must be non-negative")
        if all(a == 0 for a in values):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    perception: float
    prediction: float
    planning: float
    switch: float
    total: float

    def recompute_total(self, weights: LossWeights) -> float:
        return (weights.alpha1 * self.perception
                + weights.alpha2 * self.prediction
                + weights.alpha3 * self.planning
                + weights.alpha4 * self.switch)


def switch_loss(stats: LoadStats) -> float:
    """N * sum_i f_i * P_i; 1.0 at uniform f = P, N at full concentration."""
    n = stats.f.shape[0]
    return float(n * (stats.f @ stats.P))


def switch_loss_probs_grad(stats: LoadStats, batch_size: int) -> np.ndarray:
    """Gradient w.r.t. each example's probability vector (f held constant).

    P is the batch mean of per-example probs, so dL/dprobs_b = N * f / B.
    """
    n = stats.f.shape[0]
    return n * stats.f / batch_size


def planning_loss(pred_traj: np.ndarray, gt_traj: np.ndarray):
    """Mean over examples and steps of the squared Euclidean error.

    pred_traj, gt_traj: (B, horizon, 2).  Returns (value, d_pred).
    """
    diff = pred_traj - gt_traj
    B, h = diff.shape[0], diff.shape[1]
    value = float((diff * diff).sum() / (B * h))
    return value, 2.0 * diff / (B * h)


def prediction_loss(pred_next: np.ndarray, gt_next: np.ndarray):
    """Mean over examples of the squared next-step displacement error."""
    diff = pred_next - gt_next
    B = diff.shape[0]
    value = float((diff * diff).sum() / B)
    return value, 2.0 * diff / B


def perception_loss(aligned_by_task: dict, clean: np.ndarray,
                    planted_idx: np.ndarray):
    """Reconstruction error of the planted channels, averaged over tasks.

    aligned_by_task maps task name to (B, T, d, H, W) aligned features;
    clean is (B, T, p, H, W).  Returns (value, d_aligned_by_task) where
    the gradients are full-shaped with zeros off the planted channels.
    """
    n_tasks = len(aligned_by_task)
    count = clean.size
    value = 0.0
    grads = {}
    for task, aligned in aligned_by_task.items():
        diff = aligned[:, :, planted_idx] - clean
        value += float((diff * diff).sum() / count)
        g = np.zeros_like(aligned)
        g[:, :, planted_idx] = 2.0 * diff / (count * n_tasks)
        grads[task] = g
    return value / n_tasks, grads


def total_loss(parts, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of (perception, prediction, planning, switch)."""
    perception, prediction, planning, switch = (float(p) for p in parts)
    total = (weights.alpha1 * perception + weights.alpha2 * prediction
             + weights.alpha3 * planning + weights.alpha4 * switch)
    return LossBreakdown(perception=perception, prediction=prediction,
                         planning=planning, switch=switch, total=total)
