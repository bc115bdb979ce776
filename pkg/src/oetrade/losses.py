"""Training objectives.

All cross-entropies are evaluated from logits through ``log_softmax`` so a
vanishing probability never reaches a raw ``log``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, PreconditionError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    reg: float = 5.0
    kd: float = 1.0
    sc: float = 1.0
    t_kd: float = 4.0
    tau_sc: float = 0.1

    def __post_init__(self):
        for name in ("reg", "kd", "sc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ParameterError(f"weight {name} must be finite and nonnegative, got {v}")
        for name in ("t_kd", "tau_sc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"temperature {name} must be finite and positive, got {v}")


@dataclass
class LossBreakdown:
    classification: float
    reg: float
    kd: float
    sc: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels.astype(int)] = 1.0
    return out


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log p_y``; ``labels`` are class ids or one-hot rows."""
    logits = ad.as_tensor(logits)
    target = one_hot(labels, logits.shape[1])
    if target.shape != logits.shape:
        raise ShapeError(f"labels {target.shape} do not match logits {logits.shape}")
    logp = ad.log_softmax(logits)
    return -(ad.tsum(logp * target) * (1.0 / logits.shape[0]))


def oe_uniform_loss(logits_out: Tensor) -> Tensor:
    """Batch mean of the cross-entropy from the uniform distribution to ``p``.

    An empty outlier batch contributes exactly zero.
    """
    logits_out = ad.as_tensor(logits_out)
    if logits_out.shape[0] == 0:
        return Tensor(0.0)
    n, k = logits_out.shape
    return -(ad.tsum(ad.log_softmax(logits_out)) * (1.0 / (n * k)))


def kd_loss(student_logits: Tensor, teacher_logits, t_kd: float = 4.0) -> Tensor:
    """Softened-target distillation, ``T^2 * H(p_teacher(T), p_student(T))`` averaged over the batch.

    ``teacher_logits`` is treated as a constant.
    """
    student_logits = ad.as_tensor(student_logits)
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    if teacher.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {teacher.shape} vs student logits {student_logits.shape}")
    with ad.no_grad():
        target = ad.softmax(teacher, temperature=t_kd).data
    logq = ad.log_softmax(student_logits, temperature=t_kd)
    return -(ad.tsum(logq * target) * (t_kd**2 / student_logits.shape[0]))


def _check_unit(emb: np.ndarray, what: str) -> None:
    if emb.size and np.max(np.abs(np.linalg.norm(emb, axis=1) - 1.0)) > 1e-6:
        raise PreconditionError(f"{what} embeddings must be unit norm")


def oscl_anchor_losses(emb_in: Tensor, labels, emb_out: Tensor | None = None, tau: float = 0.1) -> Tensor:
    """Per-anchor outlier-aware supervised contrastive terms, shape ``(B_in,)``.

    Anchors and positives are in-distribution rows only; outlier rows appear
    solely in the denominator. Anchors without a same-class partner give 0.
    """
    if not tau > 0:
        raise ParameterError(f"tau_sc must be positive, got {tau}")
    emb_in = ad.as_tensor(emb_in)
    labels = np.asarray(labels)
    b_in = emb_in.shape[0]
    if b_in < 1:
        raise PreconditionError("oscl needs at least one in-distribution embedding")
    if labels.shape != (b_in,):
        raise ShapeError(f"labels shape {labels.shape} vs {b_in} embeddings")
    _check_unit(emb_in.data, "in-distribution")
    if emb_out is not None and emb_out.shape[0] > 0:
        emb_out = ad.as_tensor(emb_out)
        _check_unit(emb_out.data, "outlier")
        allemb = ad.concat([emb_in, emb_out])
    else:
        allemb = emb_in
    b_all = allemb.shape[0]

    positives = np.zeros((b_in, b_all))
    positives[:, :b_in] = labels[:, None] == labels[None, :]
    np.fill_diagonal(positives[:, :b_in], 0.0)
    counts = positives.sum(axis=1)
    if b_all == 1 or not counts.any():
        return ad.tsum(emb_in * 0.0, axis=1)

    not_self = np.ones((b_in, b_all))
    np.fill_diagonal(not_self[:, :b_in], 0.0)
    sim = ad.matmul(emb_in * (1.0 / tau), ad.transpose(allemb))
    log_prob = ad.masked_log_softmax(sim, not_self, axis=1)
    weights = positives / np.maximum(counts, 1.0)[:, None]
    return -ad.tsum(log_prob * weights, axis=1)


def oscl_loss(
    emb_in: Tensor, labels, emb_out: Tensor | None = None, tau: float = 0.1, reduction: str = "sum"
) -> Tensor:
    per_anchor = oscl_anchor_losses(emb_in, labels, emb_out, tau)
    if reduction == "sum":
        return ad.tsum(per_anchor)
    if reduction == "mean":
        return ad.mean(per_anchor)
    raise ParameterError(f"unknown reduction {reduction!r}")


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(classification, reg, kd, sc, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective ``cls + reg_w*reg + kd_w*kd + sc_w*sc`` and its breakdown.

    Components may be tensors or plain numbers; terms with zero weight are
    left out of the graph.
    """
    total = ad.as_tensor(classification)
    for w, term in ((weights.reg, reg), (weights.kd, kd), (weights.sc, sc)):
        if w != 0:
            total = total + ad.as_tensor(term) * w
    c, r, k, s = (_value(v) for v in (classification, reg, kd, sc))
    breakdown = LossBreakdown(
        classification=c, reg=r, kd=k, sc=s, total=c + weights.reg * r + weights.kd * k + weights.sc * s
    )
    return total, breakdown
