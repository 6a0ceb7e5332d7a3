"""Training objectives: distillation, diversity, focal visibility, BNNeck
cross-entropy, batch-hard and part-averaged triplet losses, and their sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Module, param, trunc_normal
from .tensor import COS_EPS, Tensor, cosine_similarity, log_softmax, matmul, relu

DIST_EPS = 1e-12
FOCAL_CLAMP = 1e-7


def distillation_loss(student: Tensor, teacher: Tensor, stop_gradient: bool = True) -> Tensor:
    """Mean over parts of ``1 - cos(student_p, teacher_p)``; value in [0, 2].

    With ``stop_gradient`` the teacher is a fixed target.
    """
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch {student.shape} vs {teacher.shape}")
    target = teacher.detach() if stop_gradient else teacher
    return (1.0 - cosine_similarity(student, target, axis=-1)).mean()


def pairwise_cosine(x: Tensor, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity matrix between the rows of ``x`` [..., P, D]."""
    dots = matmul(x, x.swapaxes(-1, -2))
    norms = (x * x).sum(axis=-1).sqrt()
    *lead, p = norms.shape
    outer = norms.reshape(*lead, p, 1) * norms.reshape(*lead, 1, p)
    return (dots / (outer + eps)).clip(-1.0, 1.0)  # rounding can overshoot for parallel rows


def diversity_loss(parts: Tensor) -> Tensor:
    """Mean cosine similarity over ordered pairs of distinct parts; value in [-1, 1]."""
    p = parts.shape[-2]
    if p < 2:
        raise ValueError("diversity loss needs at least two parts")
    off = 1.0 - np.eye(p)
    sims = pairwise_cosine(parts) * Tensor(off)
    per_sample = sims.sum(axis=(-1, -2)).scale(1.0 / (p * (p - 1)))
    return per_sample.mean()


def focal_visibility_loss(v: Tensor, v_hat: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Binary focal loss on visibility probabilities, averaged over parts (and batch)."""
    v = v.clip(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    y = np.asarray(v_hat, dtype=np.float64)
    pos = (1.0 - v) ** gamma * v.log() * (-alpha)
    neg = v ** gamma * (1.0 - v).log() * (-(1.0 - alpha))
    return (pos * Tensor(y) + neg * Tensor(1.0 - y)).mean()


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy with optional label smoothing ``(1-e)*onehot + e/K``."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    target = np.full(logits.shape, smoothing / k)
    np.put_along_axis(target, labels[..., None], 1.0 - smoothing + smoothing / k, axis=-1)
    return -(log_softmax(logits, axis=-1) * Tensor(target)).sum(axis=-1).mean()


class BNNeckHead(Module):
    """Batch-norm neck followed by a bias-free identity classifier.

    Training mode normalises with batch statistics and updates the running
    averages; eval mode uses the running averages.
    """

    def __init__(self, dim: int, num_ids: int, rng: np.random.Generator, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.classifier = param(trunc_normal(rng, (dim, num_ids), std=0.01))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def normalize(self, feat: Tensor) -> Tensor:
        if self.training:
            mu = feat.mean(axis=0, keepdims=True)
            xc = feat - mu
            var = (xc * xc).mean(axis=0, keepdims=True)
            n = feat.shape[0]
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu.data[0]
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var.data[0] * n / max(n - 1, 1)
            xhat = xc / (var + self.eps).sqrt()
        else:
            xhat = (feat - Tensor(self.running_mean)) / Tensor(np.sqrt(self.running_var + self.eps))
        return xhat * self.gain + self.bias

    def __call__(self, feat: Tensor) -> Tensor:
        return matmul(self.normalize(feat), self.classifier)


def ce_bnneck(feature: Tensor, labels: np.ndarray, head: BNNeckHead, smoothing: float = 0.0) -> Tensor:
    return cross_entropy(head(feature), labels, smoothing)


def pairwise_distance(x: Tensor) -> Tensor:
    """Euclidean distance matrix between rows of x [B, D]."""
    diff = x.reshape(x.shape[0], 1, -1) - x.reshape(1, x.shape[0], -1)
    return ((diff * diff).sum(axis=-1) + DIST_EPS).sqrt()


def part_distance(parts: Tensor, visibility: np.ndarray | None = None) -> Tensor:
    """Sample distance = mean per-part Euclidean distance over mutually visible parts.

    ``parts`` is [B, P, D]; ``visibility`` [B, P] binary. Pairs with no
    mutually visible part fall back to the mean over all parts.
    """
    b, p, _ = parts.shape
    diff = parts.reshape(b, 1, p, -1) - parts.reshape(1, b, p, -1)
    d = ((diff * diff).sum(axis=-1) + DIST_EPS).sqrt()  # [B, B, P]
    if visibility is None:
        w = np.ones((b, b, p))
    else:
        vis = np.asarray(visibility, dtype=np.float64)
        w = vis[:, None, :] * vis[None, :, :]
        none = w.sum(axis=-1) == 0
        w[none] = 1.0
    w = w / w.sum(axis=-1, keepdims=True)
    return (d * Tensor(w)).sum(axis=-1)


def _check_batch(ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    uniq, counts = np.unique(ids, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError("batch-hard triplet needs >= 2 identities with >= 2 samples each")


def batch_hard_from_distances(dist: Tensor, ids: np.ndarray, margin: float = 0.3) -> Tensor:
    """Hinge on (hardest positive - hardest negative + margin), averaged over anchors."""
    ids = np.asarray(ids)
    _check_batch(ids)
    n = len(ids)
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    d = dist.data
    pos_idx = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(~same, d, np.inf), axis=1)
    rows = np.arange(n)
    hardest_pos = dist[rows, pos_idx]
    hardest_neg = dist[rows, neg_idx]
    return relu(hardest_pos - hardest_neg + margin).mean()


def triplet_batch_hard(features: Tensor, ids: np.ndarray, margin: float = 0.3) -> Tensor:
    return batch_hard_from_distances(pairwise_distance(features), ids, margin)


def part_avg_triplet(parts: Tensor, visibility: np.ndarray | None, ids: np.ndarray,
                     margin: float = 0.3) -> Tensor:
    return batch_hard_from_distances(part_distance(parts, visibility), ids, margin)


# Order mirrors the composition of the overall objective; the three mask
# terms together form the mask-generator loss.
LOSS_TERMS = (
    "ce_global", "tri_global",
    "ce_student", "tri_student",
    "ce_teacher", "tri_teacher",
    "ce_part", "tri_part", "parsing",
    "distill", "diversity", "visibility",
)
MASK_TERMS = ("ce_part", "tri_part", "parsing")


@dataclass
class LossReport:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()

    @property
    def mask(self) -> float:
        return sum(self.terms.get(k, 0.0) for k in MASK_TERMS)

    def as_record(self) -> dict[str, float]:
        rec = {k: self.terms.get(k, 0.0) for k in LOSS_TERMS}
        rec["mask"] = self.mask
        rec["total"] = self.value
        return rec


def total_loss(components: dict[str, Tensor | None]) -> LossReport:
    """Unweighted sum of every present component."""
    unknown = set(components) - set(LOSS_TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = None
    terms = {}
    for name in LOSS_TERMS:
        t = components.get(name)
        if t is None:
            continue
        terms[name] = t.item()
        total = t if total is None else total + t
    if total is None:
        total = Tensor(0.0)
    return LossReport(total, terms)
