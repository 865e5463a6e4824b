"""Online pseudo-label rectification.

The boilerplate soft predictions are frozen once; every later refinement
multiplies them by prototype-trust weights and re-takes the argmax, so the
labels can be corrected on the fly without ever drifting far from the
initial prediction.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError

IGNORE = -1

_ROW_SUM_TOL = 1e-6


def _check_row_stochastic(probs: np.ndarray, what: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {probs.shape}")
    if probs.shape[0]:
        sums = probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > _ROW_SUM_TOL:
            raise DimensionError(f"{what} rows must sum to 1 within {_ROW_SUM_TOL}")
    return probs


class PseudoLabelStore:
    """Frozen boilerplate soft predictions plus the current rectified labels.

    The boilerplate is write-once: the backing array is read-only and there
    is no setter, so any attempt to overwrite it raises.
    """

    def __init__(self, boilerplate, temperature: float = 1.0):
        if temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        boilerplate = _check_row_stochastic(boilerplate, "boilerplate").copy()
        boilerplate.setflags(write=False)
        self._boilerplate = boilerplate
        self.temperature = float(temperature)
        self.current_hard = hard_label(boilerplate, 0.0)

    @property
    def boilerplate(self) -> np.ndarray:
        return self._boilerplate

    def __setattr__(self, name, value):
        if name == "_boilerplate" and "_boilerplate" in self.__dict__:
            raise StateError("boilerplate is write-once")
        super().__setattr__(name, value)

    def __len__(self) -> int:
        return self._boilerplate.shape[0]

    @property
    def class_count(self) -> int:
        return self._boilerplate.shape[1]


def hard_label(probs, threshold: float) -> np.ndarray:
    """Argmax per row, IGNORE where the max probability is below threshold.

    Ties break to the lowest class index.
    """
    probs = _check_row_stochastic(probs, "probs")
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    labels = probs.argmax(axis=1).astype(np.int64)
    top = probs[np.arange(probs.shape[0]), labels]
    labels[top < threshold] = IGNORE
    return labels


def modulation_weights(dist, tau: float) -> np.ndarray:
    """Softmax over negative feature-to-prototype distances.

    omega(i, k) = exp(-d(i,k)/tau) / sum_k' exp(-d(i,k')/tau), where the sum
    runs over seen classes only; +inf distances receive weight 0.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if dist.ndim != 2:
        raise DimensionError(f"distances must be 2-D, got shape {dist.shape}")
    if dist.shape[0] == 0:
        return dist.copy()
    if np.isinf(dist).all(axis=1).any():
        raise StateError("no seen prototype class: modulation weights undefined")
    scores = -dist / tau
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) -> 0 handles unseen classes
    return e / e.sum(axis=1, keepdims=True)


def rectified_soft(base_probs, omega) -> np.ndarray:
    """Row-normalised product omega * base, the soft form of the refined label."""
    base_probs = np.asarray(base_probs, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if base_probs.shape != omega.shape:
        raise DimensionError("omega and base probabilities must share a shape")
    prod = omega * base_probs
    total = prod.sum(axis=1, keepdims=True)
    return prod / np.maximum(total, 1e-300)


def rectified_labels(base_probs, omega, threshold: float = 0.0) -> np.ndarray:
    """argmax_k omega(i,k) * base(i,k), without touching any store.

    When ``threshold`` > 0 the product is renormalised per row first and
    rows whose maximum stays below the threshold become IGNORE.
    """
    base = np.asarray(base_probs, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != base.shape:
        raise DimensionError("omega shape does not match the label base")
    if threshold > 0.0:
        return hard_label(rectified_soft(base, omega), threshold)
    prod = omega * base
    if prod.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return prod.argmax(axis=1).astype(np.int64)


def rectify(store: PseudoLabelStore, omega, rows=None, threshold: float = 0.0,
            base_probs=None) -> np.ndarray:
    """Refresh the store's rectified hard labels for the given rows.

    ``base`` is the frozen boilerplate unless ``base_probs`` overrides it
    (the degenerate dynamic-label mode).  Returns the labels for the
    affected rows (all rows by default).
    """
    if base_probs is None:
        base = store.boilerplate if rows is None else store.boilerplate[rows]
    else:
        base = np.asarray(base_probs, dtype=np.float64)
    labels = rectified_labels(base, omega, threshold)
    if rows is None:
        store.current_hard = labels.copy()
    else:
        store.current_hard[rows] = labels
    return labels


def write_label_csv(path, boiler_hard, rectified, max_omega, correct=None) -> None:
    """Dump per-sample label state for offline inspection."""
    n = len(rectified)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,boilerplate_label,rectified_label,max_omega,correct\n")
        for i in range(n):
            flag = "" if correct is None else str(int(correct[i]))
            fh.write(f"{i},{boiler_hard[i]},{rectified[i]},"
                     f"{format(max_omega[i], '.10g')},{flag}\n")
