"""Training objectives with hand-derived gradients.

Every loss is a mean over valid samples, so magnitudes do not depend on the
batch size.  Probabilities inside logarithms are floored at ``clamp_floor``
for finiteness; wherever a floor is active the corresponding analytic
gradient is zero, keeping the gradients exactly consistent with the values
(finite differences agree everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .denoise import IGNORE, hard_label
from .errors import DimensionError
from .nn import softmax_vjp

DEFAULT_CLAMP = 1e-4


@dataclass
class LossWeights:
    """Coefficients of the composite objectives."""

    alpha: float = 0.1        # SCE forward term
    beta_sce: float = 1.0     # SCE reverse term
    gamma1: float = 10.0      # consistency weight in the stage-1 total
    gamma2: float = 0.1       # anti-degeneration weight in the stage-1 total
    beta_kd: float = 1.0      # KL weight in the distillation loss
    clamp_floor: float = DEFAULT_CLAMP

    def __post_init__(self):
        for name in ("alpha", "beta_sce", "gamma1", "gamma2", "beta_kd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.clamp_floor < 1.0:
            raise ValueError("clamp_floor must be in (0, 1)")


class ScalarLoss(NamedTuple):
    value: float
    grad_logits: np.ndarray
    n_valid: int


class SceLoss(NamedTuple):
    value: float
    grad_logits: np.ndarray
    n_valid: int
    forward_ce: float
    reverse_ce: float


class KlLoss(NamedTuple):
    value: float
    grad_target: np.ndarray  # gradient wrt the second (student/strong) argument


class KdLoss(NamedTuple):
    value: float
    grad_source_logits: np.ndarray
    grad_target_logits: np.ndarray
    source_ce: float
    target_ce: float
    kl: float
    n_valid_target: int


def _valid_mask(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels >= classes) | ((labels < 0) & (labels != IGNORE))
    if bad.any():
        raise DimensionError("labels must lie in [0, K) or be IGNORE")
    return labels != IGNORE


def ce_loss(probs, labels, clamp_floor: float = DEFAULT_CLAMP) -> ScalarLoss:
    """Cross-entropy against hard labels, IGNORE rows excluded.

    Gradient wrt logits is (p - onehot) / n_valid on unclamped rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    valid = _valid_mask(labels, probs.shape[1] if probs.ndim == 2 else 0)
    n_valid = int(valid.sum())
    grad = np.zeros_like(probs)
    if n_valid == 0:
        return ScalarLoss(0.0, grad, 0)
    labels = np.asarray(labels)
    rows = np.nonzero(valid)[0]
    picked = probs[rows, labels[rows]]
    clamped = picked < clamp_floor
    value = float(-np.log(np.maximum(picked, clamp_floor)).sum() / n_valid)
    live = rows[~clamped]
    grad[live] = probs[live] / n_valid
    grad[live, labels[live]] -= 1.0 / n_valid
    return ScalarLoss(value, grad, n_valid)


def ce_loss_soft(probs, targets, clamp_floor: float = DEFAULT_CLAMP) -> ScalarLoss:
    """Cross-entropy against constant soft targets: mean of -sum_k t log p."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise DimensionError("probs and targets must share a shape")
    n = probs.shape[0]
    if n == 0:
        return ScalarLoss(0.0, np.zeros_like(probs), 0)
    safe = np.maximum(probs, clamp_floor)
    value = float(-(targets * np.log(safe)).sum() / n)
    grad_probs = np.where(probs >= clamp_floor, -targets / safe, 0.0) / n
    return ScalarLoss(value, softmax_vjp(probs, grad_probs), n)


def _reverse_ce(probs, labels, valid, clamp_floor):
    """-sum_k p log(onehot clamped to [floor, 1]), mean over valid rows."""
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(probs)
    labels = np.asarray(labels)
    rows = np.nonzero(valid)[0]
    c = -np.log(clamp_floor)
    picked = probs[rows, labels[rows]]
    value = float((c * (1.0 - picked)).sum() / n_valid)
    # d/dp_k of -sum p log(onehot_clamped): 0 at the label, c elsewhere
    grad_probs = np.zeros_like(probs)
    grad_probs[rows] = c / n_valid
    grad_probs[rows, labels[rows]] = 0.0
    return value, softmax_vjp(probs, grad_probs)


def sce_loss(probs, labels, alpha: float = 0.1, beta_sce: float = 1.0,
             clamp_floor: float = DEFAULT_CLAMP) -> SceLoss:
    """Symmetric cross-entropy: alpha * CE(p, y) + beta * CE(y, p).

    The reverse term clamps the one-hot label into [clamp_floor, 1].
    """
    probs = np.asarray(probs, dtype=np.float64)
    valid = _valid_mask(labels, probs.shape[1] if probs.ndim == 2 else 0)
    fwd = ce_loss(probs, labels, clamp_floor)
    rev_value, rev_grad = _reverse_ce(probs, labels, valid, clamp_floor)
    value = alpha * fwd.value + beta_sce * rev_value
    grad = alpha * fwd.grad_logits + beta_sce * rev_grad
    return SceLoss(float(value), grad, fwd.n_valid, fwd.value, rev_value)


def sce_loss_soft(probs, targets, alpha: float = 0.1, beta_sce: float = 1.0,
                  clamp_floor: float = DEFAULT_CLAMP) -> SceLoss:
    """SCE with constant soft targets instead of one-hot labels."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    fwd = ce_loss_soft(probs, targets, clamp_floor)
    n = probs.shape[0]
    if n == 0:
        return SceLoss(0.0, np.zeros_like(probs), 0, 0.0, 0.0)
    safe_t = np.maximum(targets, clamp_floor)
    rev_value = float(-(probs * np.log(safe_t)).sum() / n)
    rev_grad = softmax_vjp(probs, -np.log(safe_t) / n)
    value = alpha * fwd.value + beta_sce * rev_value
    grad = alpha * fwd.grad_logits + beta_sce * rev_grad
    return SceLoss(float(value), grad, n, fwd.value, rev_value)


def kl_consistency(z_ref, z_train, clamp_floor: float = DEFAULT_CLAMP) -> KlLoss:
    """Mean KL(z_ref || z_train); z_ref is a constant (the teacher side).

    z_train is floored at clamp_floor inside the log; the gradient is wrt
    z_train and is zero wherever the floor is active.
    """
    z_ref = np.asarray(z_ref, dtype=np.float64)
    z_train = np.asarray(z_train, dtype=np.float64)
    if z_ref.shape != z_train.shape:
        raise DimensionError("assignments must share a shape")
    n = z_ref.shape[0]
    if n == 0:
        return KlLoss(0.0, np.zeros_like(z_train))
    safe = np.maximum(z_train, clamp_floor)
    log_ref = np.where(z_ref > 0.0, np.log(np.maximum(z_ref, 1e-300)), 0.0)
    terms = np.where(z_ref > 0.0, z_ref * (log_ref - np.log(safe)), 0.0)
    value = float(terms.sum() / n)
    grad = np.where((z_train >= clamp_floor) & (z_ref > 0.0),
                    -z_ref / safe, 0.0) / n
    return KlLoss(value, grad)


def regularizer(probs, clamp_floor: float = DEFAULT_CLAMP) -> ScalarLoss:
    """Anti-degeneration term: mean over samples of -sum_k log p(i, k).

    Pushes every prediction away from collapsed one-hot outputs so no class
    empties out.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if n == 0:
        return ScalarLoss(0.0, np.zeros_like(probs), 0)
    safe = np.maximum(probs, clamp_floor)
    value = float(-np.log(safe).sum() / n)
    grad_probs = np.where(probs >= clamp_floor, -1.0 / safe, 0.0) / n
    return ScalarLoss(value, softmax_vjp(probs, grad_probs), n)


def total_stage1_loss(source_ce: float, target_sce: float, kl: float, reg: float,
                      gamma1: float = 10.0, gamma2: float = 0.1) -> float:
    """Stage-1 objective: ce_s + sce_t + gamma1 * kl + gamma2 * reg."""
    return float(source_ce + target_sce + gamma1 * kl + gamma2 * reg)


def kd_loss(student_source_probs, source_labels, student_target_probs,
            teacher_target_probs, threshold: float = 0.95, beta_kd: float = 1.0,
            clamp_floor: float = DEFAULT_CLAMP) -> KdLoss:
    """Distillation objective for one student update.

    ce_s(student, source labels)
      + ce_t(student, thresholded teacher hard labels)
      + beta_kd * KL(teacher || student) on the target batch.

    Teacher probabilities are constants.  Rows whose teacher confidence is
    below ``threshold`` drop out of the hard-label CE but still count in the
    KL term.
    """
    teacher_target_probs = np.asarray(teacher_target_probs, dtype=np.float64)
    student_target_probs = np.asarray(student_target_probs, dtype=np.float64)
    src = ce_loss(student_source_probs, source_labels, clamp_floor)
    pseudo = hard_label(teacher_target_probs, threshold)
    tgt = ce_loss(student_target_probs, pseudo, clamp_floor)
    kl = kl_consistency(teacher_target_probs, student_target_probs, clamp_floor)
    grad_target = tgt.grad_logits + beta_kd * softmax_vjp(student_target_probs,
                                                          kl.grad_target)
    value = src.value + tgt.value + beta_kd * kl.value
    return KdLoss(float(value), src.grad_logits, grad_target,
                  src.value, tgt.value, kl.value, tgt.n_valid)
