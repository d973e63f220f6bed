"""Evaluation metrics: zero-mean MPJPE with best-of-two depth flip, Stress,
and mutual coherence of the latent basis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import depth_flip

__all__ = ["mpjpe", "mpjpe_with_flag", "stress", "mutual_coherence", "EvalReport"]


def _center(x):
    return x - x.mean(axis=1, keepdims=True)


def mpjpe_with_flag(pred, gt):
    """(error, flipped_won): zero-center both point sets, score the predicted
    set and its depth-flipped twin, keep the better. Ties count as unflipped."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] != 3 or pred.shape[1] < 1:
        raise ValueError(f"mpjpe: expected matching 3xK arrays, got {pred.shape} and {gt.shape}")
    pc = _center(pred)
    gc = _center(gt)
    direct = np.linalg.norm(pc - gc, axis=0).mean()
    flipped = np.linalg.norm(depth_flip(pc) - gc, axis=0).mean()
    if flipped < direct:
        return float(flipped), True
    return float(direct), False


def mpjpe(pred, gt):
    return mpjpe_with_flag(pred, gt)[0]


def stress(pred, gt):
    """Mean absolute difference of pairwise distances, denominator K(K-1)
    with the sum running over unordered pairs (kept exactly as printed in
    the evaluation protocol, so values are half the ordered-pair mean)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] != 3:
        raise ValueError(f"stress: expected matching 3xK arrays, got {pred.shape} and {gt.shape}")
    k = pred.shape[1]
    if k < 2:
        raise ValueError("stress: needs at least 2 points")
    iu = np.triu_indices(k, 1)
    dp = np.linalg.norm(pred[:, iu[0]] - pred[:, iu[1]], axis=0)
    dg = np.linalg.norm(gt[:, iu[0]] - gt[:, iu[1]], axis=0)
    return float(np.abs(dp - dg).sum() / (k * (k - 1)))


def mutual_coherence(w):
    """Max absolute cosine between distinct columns of an F x D matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] < 2:
        raise ValueError(f"mutual_coherence: expected F x D with D >= 2, got {w.shape}")
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("mutual_coherence: zero column")
    g = (w / norms).T @ (w / norms)
    np.fill_diagonal(g, 0.0)
    return float(min(np.max(np.abs(g)), 1.0))


@dataclass
class EvalReport:
    mpjpe: float
    stress: float
    flip_fraction: float
    per_category: dict = field(default_factory=dict)
    sample_count: int = 0

    def __post_init__(self):
        if self.mpjpe < 0 or self.stress < 0 or not 0.0 <= self.flip_fraction <= 1.0:
            raise ValueError("EvalReport fields out of range")

    def table(self):
        lines = [
            f"{'category':<16}{'mpjpe':>10}{'stress':>10}{'flip%':>8}{'n':>7}",
            "-" * 51,
        ]
        for name, row in self.per_category.items():
            lines.append(
                f"{name:<16}{row['mpjpe']:>10.4f}{row['stress']:>10.4f}"
                f"{100 * row['flip_fraction']:>7.1f}%{row['count']:>7d}"
            )
        lines.append("-" * 51)
        lines.append(
            f"{'all':<16}{self.mpjpe:>10.4f}{self.stress:>10.4f}"
            f"{100 * self.flip_fraction:>7.1f}%{self.sample_count:>7d}"
        )
        return "\n".join(lines)

    def to_kv(self):
        lines = [
            f"mpjpe={self.mpjpe!r}",
            f"stress={self.stress!r}",
            f"flip_fraction={self.flip_fraction!r}",
            f"sample_count={self.sample_count}",
        ]
        for name, row in self.per_category.items():
            for key in ("mpjpe", "stress", "flip_fraction"):
                lines.append(f"{name}.{key}={row[key]!r}")
            lines.append(f"{name}.count={row['count']}")
        return "\n".join(lines) + "\n"
