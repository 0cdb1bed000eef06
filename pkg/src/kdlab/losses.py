"""Distillation gaps and the loss zoo, plus the task losses.

The per-sample gap is the mean squared difference between a student value
and its (constant) teacher target, with maps flattened first. Weighted
averages of those gaps make up the classic distillation objective; the
soft-target KL loss and attention-map matching cover the non-L2 routes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor

TARGET_KINDS = ("embedding", "logits", "feature_map", "attention_map")


@dataclass
class DistillTarget:
    """One batch of teacher knowledge and the student value chasing it.

    ``teacher_value`` is treated as a constant: it is detached on
    construction so no gradient can reach teacher parameters.
    """

    kind: str
    teacher_value: Tensor
    student_value: Tensor

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown distillation target kind '{self.kind}'")
        if self.teacher_value.requires_grad or self.teacher_value._node is not None:
            self.teacher_value = self.teacher_value.detach()


def gap(target: DistillTarget) -> Tensor:
    """Per-sample gap vector [N]: mean over target dimensions of the
    squared student-teacher difference (maps are flattened first)."""
    s, t = target.student_value, target.teacher_value
    if s.shape != t.shape:
        raise ShapeError(f"gap: student shape {s.shape} does not match teacher shape {t.shape}")
    diff = T.sub(s, t)
    if diff.ndim > 2:
        diff = T.reshape(diff, (diff.shape[0], -1))
    elif diff.ndim == 1:
        diff = T.reshape(diff, (diff.shape[0], 1))
    return T.mean(T.square(diff), axis=1)


def weighted_distill_loss(d: Tensor, weights: np.ndarray) -> Tensor:
    """(1/N) * sum_i w_i * d_i, differentiable through ``d`` only."""
    w = np.asarray(weights, dtype=np.float64)
    if d.ndim != 1:
        raise ShapeError(f"weighted_distill_loss: gap vector must be 1-D, got {d.shape}")
    if w.shape != d.shape:
        raise ShapeError(f"weighted_distill_loss: {len(w)} weights for {d.shape[0]} gaps")
    if np.any(w < 0):
        raise DomainError("weighted_distill_loss: negative weight")
    return T.mean(T.mul(d, Tensor(w)))


def total_loss(task: Tensor, distill: Tensor, lam: float) -> Tensor:
    """task + lambda * distill."""
    if lam < 0:
        raise DomainError(f"total_loss: lambda must be non-negative, got {lam}")
    if task.size != 1 or distill.size != 1:
        raise ShapeError("total_loss: both terms must be scalars")
    return T.add(task, T.scale(distill, lam))


def kl_distill_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-softened KL between teacher and student class
    distributions, scaled by T^2 and averaged over the batch."""
    if temperature <= 0:
        raise DomainError(f"kl_distill_loss: temperature must be positive, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"kl_distill_loss: logits shapes differ, {student_logits.shape} vs {teacher_logits.shape}"
        )
    tl = teacher_logits.data / temperature
    tl = tl - tl.max(axis=1, keepdims=True)
    pt = np.exp(tl)
    pt /= pt.sum(axis=1, keepdims=True)
    # teacher-side entropy term, constant w.r.t. the student
    neg_entropy = np.sum(np.where(pt > 0, pt * np.log(np.maximum(pt, 1e-300)), 0.0), axis=1)

    ps = T.softmax(T.scale(student_logits, 1.0 / temperature), axis=1)
    log_ps = T.log(T.clamp(ps, 1e-300, 1.0))
    cross = T.sum(T.mul(log_ps, Tensor(pt)), axis=1)
    kl = T.sub(Tensor(neg_entropy), cross)
    return T.scale(T.mean(kl), temperature * temperature)


def attention_map(feature_map: Tensor) -> Tensor:
    """Spatial attention of a [N,C,H,W] map: channel-summed squared
    activations, L2-normalized over the flattened spatial extent.

    An all-zero map normalizes to an all-zero map (a tiny epsilon keeps the
    norm positive) rather than raising.
    """
    if feature_map.ndim != 4:
        raise ShapeError(f"attention_map: expects [N,C,H,W], got {feature_map.shape}")
    n, _, h, w = feature_map.shape
    att = T.sum(T.square(feature_map), axis=1)
    flat = T.reshape(att, (n, h * w))
    ss = T.sum(T.square(flat), axis=1, keepdims=True)
    norm = T.exp(T.scale(T.log(T.shift(ss, 1e-24)), 0.5))
    tiled = T.matmul(norm, Tensor(np.ones((1, h * w))))
    return T.div(flat, tiled)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for batch of {n}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    log_p = T.log(T.clamp(T.softmax(logits, axis=1), 1e-300, 1.0))
    return T.scale(T.sum(T.mul(log_p, Tensor(onehot))), -1.0 / n)


def _smooth_sqrt(t: Tensor, eps: float = 1e-24) -> Tensor:
    return T.exp(T.scale(T.log(T.shift(t, eps)), 0.5))


def triplet_loss(embeddings: Tensor, labels: np.ndarray, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss on Euclidean embedding distances.

    For each anchor the hardest positive (same label, largest distance) and
    hardest negative (different label, smallest distance) are mined from the
    current batch; mining uses detached distances. Anchors without a
    positive or negative in the batch are skipped.
    """
    if embeddings.ndim != 2:
        raise ShapeError(f"triplet_loss: expects [N, D] embeddings, got {embeddings.shape}")
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    e = embeddings.data
    sq = (e * e).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (e @ e.T), 0.0)
    dist = np.sqrt(d2)

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    pos_sel = np.zeros((n, n))
    neg_sel = np.zeros((n, n))
    valid = np.zeros(n)
    for i in range(n):
        if not pos_mask[i].any() or not neg_mask[i].any():
            continue
        p = np.where(pos_mask[i], dist[i], -np.inf).argmax()
        q = np.where(neg_mask[i], dist[i], np.inf).argmin()
        pos_sel[i, p] = 1.0
        neg_sel[i, q] = 1.0
        valid[i] = 1.0
    n_valid = valid.sum()
    if n_valid == 0:
        raise DomainError("triplet_loss: no anchor has both a positive and a negative in the batch")

    e_pos = T.matmul(Tensor(pos_sel), embeddings)
    e_neg = T.matmul(Tensor(neg_sel), embeddings)
    d_pos = _smooth_sqrt(T.sum(T.square(T.sub(embeddings, e_pos)), axis=1))
    d_neg = _smooth_sqrt(T.sum(T.square(T.sub(embeddings, e_neg)), axis=1))
    viol = T.relu(T.shift(T.sub(d_pos, d_neg), margin))
    return T.scale(T.sum(T.mul(viol, Tensor(valid))), 1.0 / n_valid)
