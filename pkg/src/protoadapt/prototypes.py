"""Class prototypes: feature-space centroids tracked by exponential moving average."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


class PrototypeBank:
    """K class centroids in feature space plus their EMA state.

    Classes that have never contributed a feature keep a zero centroid and
    ``seen[k] == False``; distance queries return ``+inf`` for them so they
    drop out of any downstream softmax.
    """

    def __init__(self, class_count: int, feature_dim: int, momentum: float):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.class_count = int(class_count)
        self.feature_dim = int(feature_dim)
        self.momentum = float(momentum)
        self.centroids = np.zeros((self.class_count, self.feature_dim))
        self.seen = np.zeros(self.class_count, dtype=bool)

    def copy(self) -> "PrototypeBank":
        dup = PrototypeBank(self.class_count, self.feature_dim, self.momentum)
        dup.centroids = self.centroids.copy()
        dup.seen = self.seen.copy()
        return dup


def init_prototypes(features, hard_labels, class_count, momentum=0.9999) -> PrototypeBank:
    """Dataset-level initialisation: centroid k is the mean feature of class k.

    Labels outside [0, class_count) (e.g. the IGNORE marker) are skipped.
    Classes with no samples stay at zero with seen=False.
    """
    features = np.asarray(features, dtype=np.float64)
    hard_labels = np.asarray(hard_labels)
    if features.ndim != 2 or features.shape[0] != hard_labels.shape[0]:
        raise DimensionError("features and labels disagree on sample count")
    bank = PrototypeBank(class_count, features.shape[1], momentum)
    centroids, counts = batch_centroids(features, hard_labels, class_count)
    present = counts > 0
    bank.centroids[present] = centroids[present]
    bank.seen[:] = present
    return bank


def batch_centroids(features, hard_labels, class_count):
    """Per-class mean features within one batch.

    Returns (centroids, counts); rows with count 0 are zero and should be
    treated as absent by the caller.
    """
    features = np.asarray(features, dtype=np.float64)
    hard_labels = np.asarray(hard_labels)
    centroids = np.zeros((class_count, features.shape[1]))
    counts = np.zeros(class_count, dtype=np.int64)
    valid = (hard_labels >= 0) & (hard_labels < class_count)
    if valid.any():
        labels = hard_labels[valid].astype(np.int64)
        np.add.at(centroids, labels, features[valid])
        counts += np.bincount(labels, minlength=class_count)
        present = counts > 0
        centroids[present] /= counts[present, None]
    return centroids, counts


def ema_update_prototypes(bank: PrototypeBank, centroids, counts) -> PrototypeBank:
    """Move each present centroid toward the batch mean: eta <- m*eta + (1-m)*eta'.

    A class seen for the first time snaps straight to the batch centroid
    (the zero placeholder is not a meaningful EMA starting point); classes
    absent from the batch are left untouched.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.shape != bank.centroids.shape:
        raise DimensionError(
            f"centroids shape {centroids.shape} != bank shape {bank.centroids.shape}"
        )
    counts = np.asarray(counts)
    present = counts > 0
    fresh = present & ~bank.seen
    tracked = present & bank.seen
    bank.centroids[fresh] = centroids[fresh]
    m = bank.momentum
    bank.centroids[tracked] = m * bank.centroids[tracked] + (1.0 - m) * centroids[tracked]
    bank.seen |= present
    return bank


def distances(bank: PrototypeBank, features) -> np.ndarray:
    """Euclidean feature-to-centroid distances, +inf for unseen classes."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != bank.feature_dim:
        raise DimensionError(
            f"features must be N x {bank.feature_dim}, got shape {features.shape}"
        )
    diff = features[:, None, :] - bank.centroids[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    dist[:, ~bank.seen] = np.inf
    return dist


def write_centroids_csv(bank: PrototypeBank, path) -> None:
    """Snapshot the bank as CSV: class index then the centroid coordinates."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        cols = ",".join(f"c{i}" for i in range(bank.feature_dim))
        fh.write(f"class,seen,{cols}\n")
        for k in range(bank.class_count):
            coords = ",".join(format(v, ".10g") for v in bank.centroids[k])
            fh.write(f"{k},{int(bank.seen[k])},{coords}\n")
