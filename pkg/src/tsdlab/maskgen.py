"""Learnable part classifier over patch features.

Class 0 is background; classes 1..P are body parts. The hard mask handed
to the teacher is the per-patch argmax and carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module, param, trunc_normal
from .tensor import Tensor, log_softmax, matmul, softmax

POOL_EPS = 1e-12


@dataclass
class PartHeatmaps:
    soft: Tensor     # [..., N, P+1], rows sum to 1
    logits: Tensor   # [..., N, P+1]


class MaskGenerator(Module):
    def __init__(self, parts: int, dim: int, rng: np.random.Generator):
        self.parts = parts
        self.weight = param(trunc_normal(rng, (parts + 1, dim)))

    def __call__(self, patches: Tensor) -> PartHeatmaps:
        return heatmaps(patches, self.weight)


def heatmaps(patches: Tensor, weight: Tensor) -> PartHeatmaps:
    logits = matmul(patches, weight.T)
    return PartHeatmaps(softmax(logits, axis=-1), logits)


def binarize(h: PartHeatmaps | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels [..., N] and the binary part mask [..., P, N].

    Ties go to the lowest class index, so a uniform row is background.
    """
    soft = h.soft.data if isinstance(h, PartHeatmaps) else np.asarray(h)
    labels = np.argmax(soft, axis=-1)
    return labels_to_mask(labels, soft.shape[-1] - 1), labels


def labels_to_mask(labels: np.ndarray, parts: int) -> np.ndarray:
    labels = np.asarray(labels)
    ids = np.arange(1, parts + 1).reshape((parts, 1))
    return (labels[..., None, :] == ids).astype(np.float64)


def part_pool(patches: Tensor, h: PartHeatmaps) -> tuple[Tensor, Tensor]:
    """Heatmap-weighted average of patch features per foreground part.

    Returns (parts [..., P, D], concatenated [..., P*D]).
    """
    w = h.soft[..., 1:]                          # [..., N, P]
    wt = w.swapaxes(-1, -2)                      # [..., P, N]
    num = matmul(wt, patches)                    # [..., P, D]
    den = wt.sum(axis=-1, keepdims=True) + POOL_EPS
    pooled = num / den
    flat = pooled.reshape(pooled.shape[:-2] + (-1,))
    return pooled, flat


def visibility_labels(labels: np.ndarray, parts: int, min_fraction: float = 0.0) -> np.ndarray:
    """Binary visibility [..., P]: part p is visible when enough patches carry label p.

    At least one patch is always required; ``min_fraction`` raises the bar to
    that fraction of all N patches.
    """
    labels = np.asarray(labels)
    n = labels.shape[-1]
    counts = np.stack([(labels == p).sum(axis=-1) for p in range(1, parts + 1)], axis=-1)
    need = max(1.0, min_fraction * n)
    return (counts >= need).astype(np.float64)


def parsing_loss(h: PartHeatmaps, labels: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy between patch heatmaps and part labels."""
    k = h.logits.shape[-1]
    target = np.full(h.logits.shape, smoothing / k)
    np.put_along_axis(target, np.asarray(labels)[..., None], 1.0 - smoothing + smoothing / k, axis=-1)
    logp = log_softmax(h.logits, axis=-1)
    return -(logp * Tensor(target)).sum(axis=-1).mean()
