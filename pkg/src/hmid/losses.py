"""Training objectives in hyperbolic space, plus the Euclidean CLIP baseline.

All similarities are negative Lorentz distances divided by the temperature.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import lorentz as L
from .lorentz import LorentzPoint

log = logging.getLogger(__name__)

TAU_MIN = 0.01
EPS_ROOT = 1e-6


class LossContractError(ValueError):
    pass


@dataclass
class LossWeights:
    distillation: float = 1.0
    entailment: float = 0.2
    hierarchy: float = 0.0

    def __post_init__(self):
        if min(self.distillation, self.entailment, self.hierarchy) < 0:
            raise LossContractError("loss weights must be non-negative")


@dataclass
class EmbeddingBatch:
    """Paired hyperbolic embeddings; row ``i`` of ``image`` matches row ``i`` of ``text``."""

    image: LorentzPoint
    text: LorentzPoint
    source: str = "student"

    def __len__(self) -> int:
        return np.shape(E.as_array(self.image.space))[0]


@dataclass
class LossReport:
    total: object
    contrastive: object
    distillation: object
    entailment: object
    distill_i2t: object = 0.0
    distill_t2i: object = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    hierarchy: object = 0.0

    def as_floats(self) -> dict[str, float]:
        keys = ("total", "contrastive", "distillation", "entailment", "hierarchy", "distill_i2t",
                "distill_t2i")
        return {k: float(E.as_array(getattr(self, k))) for k in keys}


# Counts text embeddings that reached the root, where the cone aperture is undefined.
root_warnings = {"count": 0}


def _check_tau(tau) -> None:
    if float(E.as_array(tau)) < TAU_MIN - 1e-12:
        raise LossContractError(f"temperature {float(E.as_array(tau))} below tau_min={TAU_MIN}")


def _row_cross_entropy(logits):
    """Mean over rows of ``-log softmax(logits)[i, i]``."""
    n = np.shape(E.as_array(logits))[0]
    return -E.mean(E.gather_rows(E.log_softmax_rows(logits), np.arange(n)))


def hyperbolic_logits(x: LorentzPoint, y: LorentzPoint, tau, c):
    return -L.pairwise_distance(x, y, c) / tau


def hyperbolic_contrastive_terms(image: LorentzPoint, text: LorentzPoint, tau, c):
    """``(L_image->text, L_text->image)`` for one batch."""
    _check_tau(tau)
    logits = hyperbolic_logits(image, text, tau, c)
    return _row_cross_entropy(logits), _row_cross_entropy(E.transpose(logits))


def hyperbolic_contrastive_loss(batch: EmbeddingBatch, tau, c):
    i2t, t2i = hyperbolic_contrastive_terms(batch.image, batch.text, tau, c)
    return 0.5 * (i2t + t2i)


def interaction_distillation_terms(student: EmbeddingBatch, teacher: EmbeddingBatch, tau, c):
    """Cross-model contrastive terms: student images vs teacher texts, and
    student texts vs teacher images."""
    if len(student) != len(teacher):
        raise LossContractError(
            f"student batch {len(student)} and teacher batch {len(teacher)} differ")
    _check_tau(tau)
    i2t = _row_cross_entropy(hyperbolic_logits(student.image, teacher.text, tau, c))
    t2i = _row_cross_entropy(hyperbolic_logits(student.text, teacher.image, tau, c))
    return i2t, t2i


def interaction_distillation_loss(student: EmbeddingBatch, teacher: EmbeddingBatch, tau, c):
    i2t, t2i = interaction_distillation_terms(student, teacher, tau, c)
    return 0.5 * (i2t + t2i)


def entailment_violations(parent: LorentzPoint, child: LorentzPoint, c, K: float = L.DEFAULT_K):
    """Per-pair ``max(0, exterior(parent, child) - aperture(parent))``."""
    norms = np.linalg.norm(E.as_array(parent.space), axis=-1)
    at_root = int(np.count_nonzero(norms <= EPS_ROOT))
    if at_root:
        root_warnings["count"] += at_root
        log.warning("%d entailment parent(s) at the root; using the clamped aperture", at_root)
    angle = L.exterior_angle(parent, child, c, check=False)
    aperture = L.half_aperture(parent, c, K, check=False)
    return E.clamp(angle - aperture, 0.0)


def entailment_loss(batch: EmbeddingBatch, c, K: float = L.DEFAULT_K):
    """Mean cone violation with each caption as the parent of its image."""
    return E.mean(entailment_violations(batch.text, batch.image, c, K))


def total_loss(student: EmbeddingBatch, teacher: EmbeddingBatch | None, tau, c,
               K: float = L.DEFAULT_K, weights: LossWeights | None = None,
               hierarchy: list[tuple[LorentzPoint, LorentzPoint]] | None = None) -> LossReport:
    """Contrastive + weighted distillation + weighted entailment.

    ``hierarchy`` optionally lists (parent, child) caption pairs; the mean of
    their cone violations enters with ``weights.hierarchy``.
    """
    weights = weights or LossWeights()
    contrastive = hyperbolic_contrastive_loss(student, tau, c)
    if teacher is not None and weights.distillation > 0:
        d_i2t, d_t2i = interaction_distillation_terms(student, teacher, tau, c)
        distillation = 0.5 * (d_i2t + d_t2i)
    else:
        d_i2t = d_t2i = distillation = 0.0
    entail = entailment_loss(student, c, K) if weights.entailment > 0 else 0.0
    total = contrastive + weights.distillation * distillation + weights.entailment * entail
    hier = 0.0
    if hierarchy and weights.hierarchy > 0:
        hier = E.mean(E.concat([entailment_violations(p, q, c, K) for p, q in hierarchy], axis=0))
        total = total + weights.hierarchy * hier
    return LossReport(total, contrastive, distillation, entail, d_i2t, d_t2i, weights, hier)


def euclidean_clip_loss(image_vecs, text_vecs, tau):
    """Symmetric InfoNCE on cosine similarities divided by ``tau``."""
    _check_tau(tau)

    def normalize(v):
        sq = E.sum(v * v, axis=-1)
        if np.any(E.as_array(sq) == 0):
            raise LossContractError("zero-norm embedding has no direction")
        return v / E.reshape(E.sqrt(sq), (-1, 1))

    logits = E.matmul(normalize(image_vecs), E.transpose(normalize(text_vecs))) / tau
    return 0.5 * (_row_cross_entropy(logits) + _row_cross_entropy(E.transpose(logits)))
