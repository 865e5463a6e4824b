"""Weak/strong augmentation and prototypical-assignment consistency.

Augmentation noise comes from a counter-based generator keyed by
(seed, sample id, iteration, view), so draws do not depend on batch order
or batch membership and parallel evaluation stays reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import prototypes as proto
from .denoise import modulation_weights
from .errors import DimensionError
from .losses import DEFAULT_CLAMP, kl_consistency
from .nn import EmaEncoder, Network

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_SALT_WEAK = 0x11
_SALT_STRONG = 0x22
_SALT_DROP = 0x33
_SALT_SCALE = 0x44


def _mix64_int(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the point here
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _uniform(seed, iteration, salt, sample_ids, counters):
    """Open-interval (0,1) uniforms shaped (len(sample_ids), len(counters))."""
    base = _mix64_int(_mix64_int((int(seed) & _MASK64) ^ _mix64_int(int(iteration)))
                      ^ int(salt))
    ids = np.asarray(sample_ids, dtype=np.uint64)[:, None]
    ctr = np.asarray(counters, dtype=np.uint64)[None, :]
    h = _mix64(_mix64(np.uint64(base) ^ _mix64(ids)) ^ ctr)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


def _normal(seed, iteration, salt, sample_ids, dim):
    u1 = _uniform(seed, iteration, salt, sample_ids, 2 * np.arange(dim))
    u2 = _uniform(seed, iteration, salt, sample_ids, 2 * np.arange(dim) + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@dataclass
class AugmentConfig:
    """Point-space analogues of image augmentation: jitter, scale, dropout."""

    weak_jitter_std: float = 0.05
    strong_jitter_std: float = 0.25
    strong_drop_prob: float = 0.1
    strong_scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        if self.weak_jitter_std < 0 or self.strong_jitter_std < 0:
            raise ValueError("jitter stds must be nonnegative")
        if self.strong_jitter_std < self.weak_jitter_std:
            raise ValueError("strong augmentation must dominate weak: "
                             "strong_jitter_std >= weak_jitter_std")
        if not 0.0 <= self.strong_drop_prob < 1.0:
            raise ValueError("strong_drop_prob must be in [0, 1)")
        lo, hi = self.strong_scale_range
        if lo > hi:
            raise ValueError("strong_scale_range must be (lo, hi) with lo <= hi")


def augment(x, cfg: AugmentConfig, mode: str, seed: int, iteration: int = 0,
            sample_ids=None) -> np.ndarray:
    """One stochastic view of the batch.

    weak:   x + N(0, weak_jitter_std^2)
    strong: scale * (x + N(0, strong_jitter_std^2)), coordinates then zeroed
            with probability strong_drop_prob
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {x.shape}")
    n, dim = x.shape
    if sample_ids is None:
        sample_ids = np.arange(n)
    elif len(sample_ids) != n:
        raise DimensionError("sample_ids must match the batch length")
    if n == 0:
        return x.copy()
    if mode == "weak":
        noise = _normal(seed, iteration, _SALT_WEAK, sample_ids, dim)
        return x + cfg.weak_jitter_std * noise
    if mode != "strong":
        raise ValueError(f"mode must be 'weak' or 'strong', got {mode!r}")
    noise = _normal(seed, iteration, _SALT_STRONG, sample_ids, dim)
    out = x + cfg.strong_jitter_std * noise
    lo, hi = cfg.strong_scale_range
    scale = lo + (hi - lo) * _uniform(seed, iteration, _SALT_SCALE, sample_ids, [0])
    out = scale * out
    if cfg.strong_drop_prob > 0.0:
        drop = _uniform(seed, iteration, _SALT_DROP, sample_ids, np.arange(dim))
        out = np.where(drop < cfg.strong_drop_prob, 0.0, out)
    return out


def soft_assignment(features, bank: proto.PrototypeBank, tau: float) -> np.ndarray:
    """Distance softmax of features against the prototype bank.

    Shares its kernel with the pseudo-label modulation weights, so the two
    agree bit-exactly on identical inputs.
    """
    return modulation_weights(proto.distances(bank, features), tau)


def soft_assignment_backward(features, bank: proto.PrototypeBank, tau: float,
                             z: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Pull a gradient on the assignment z back to the generating features."""
    features = np.asarray(features, dtype=np.float64)
    grad_scores = (z * (grad_z - (grad_z * z).sum(axis=1, keepdims=True)))
    grad_dist = -grad_scores / tau
    diff = features[:, None, :] - bank.centroids[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    inv = np.where(dist > 1e-12, 1.0 / np.maximum(dist, 1e-12), 0.0)
    inv[:, ~bank.seen] = 0.0
    return (grad_dist[:, :, None] * diff * inv[:, :, None]).sum(axis=1)


class ConsistencyResult(NamedTuple):
    value: float
    grads: list
    z_weak: np.ndarray
    z_strong: np.ndarray


def consistency_step(x, net: Network, ema: EmaEncoder, bank: proto.PrototypeBank,
                     cfg: AugmentConfig, tau: float, seed: int, iteration: int = 0,
                     sample_ids=None, clamp_floor: float = DEFAULT_CLAMP
                     ) -> ConsistencyResult:
    """Consistency loss between the two views, with gradients into f only.

    The weak view goes through the momentum encoder and its assignment is a
    constant teacher; the strong view goes through the live network.  The
    prototype bank and the momentum encoder receive no gradient.
    """
    x_weak = augment(x, cfg, "weak", seed, iteration, sample_ids)
    z_weak = soft_assignment(ema.features(x_weak), bank, tau)
    x_strong = augment(x, cfg, "strong", seed, iteration, sample_ids)
    rec = net.forward_recorded(x_strong)
    z_strong = soft_assignment(rec.acts[-1], bank, tau)
    kl = kl_consistency(z_weak, z_strong, clamp_floor)
    grad_feat = soft_assignment_backward(rec.acts[-1], bank, tau, z_strong,
                                         kl.grad_target)
    grads = net.backward(rec, grad_features=grad_feat)
    return ConsistencyResult(kl.value, grads, z_weak, z_strong)
