"""Minimal MLP with explicit reverse-mode gradients and an EMA shadow encoder.

The network is a fixed topology: a stack of tanh layers (the feature
extractor) followed by a single linear layer whose softmax output is the
class distribution.  Gradients are computed by hand against a recorded
forward pass; there is no general autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SchemaError, StateError

CHECKPOINT_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilised by max subtraction."""
    if logits.shape[0] == 0:
        return logits.copy()
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def _check_batch(x: np.ndarray, width: int, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(
            f"{what} must be 2-D with {width} columns, got shape {x.shape}"
        )
    if x.size and not np.isfinite(x).all():
        raise DimensionError(f"{what} contains non-finite values")
    return x


@dataclass
class RecordedForward:
    """Activations captured during one forward pass, consumed by backward()."""

    acts: list[np.ndarray]  # acts[0] = input, acts[-1] = features
    logits: np.ndarray
    probs: np.ndarray
    shapes: tuple


class Network:
    """Feature extractor (tanh MLP) plus linear softmax classifier.

    Parameters are initialised uniformly in [-s, s] with s = 1/sqrt(fan_in),
    from the given seed, so construction is deterministic.
    """

    def __init__(self, in_dim, hidden, feature_dim, classes, seed=0):
        if feature_dim < 1 or classes < 1 or in_dim < 1:
            raise DimensionError("in_dim, feature_dim and classes must be >= 1")
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.feature_dim = int(feature_dim)
        self.classes = int(classes)
        rng = np.random.default_rng(seed)
        sizes = [self.in_dim, *self.hidden, self.feature_dim]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            s = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-s, s, size=fan_out))
        s = 1.0 / np.sqrt(self.feature_dim)
        self.cls_w = rng.uniform(-s, s, size=(self.feature_dim, self.classes))
        self.cls_b = rng.uniform(-s, s, size=self.classes)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        """Live parameter arrays: feature layers first, classifier last."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        out.extend((self.cls_w, self.cls_b))
        return out

    def feature_parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zero_gradients(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.parameters()]

    def copy(self) -> "Network":
        dup = Network.__new__(Network)
        dup.in_dim = self.in_dim
        dup.hidden = self.hidden
        dup.feature_dim = self.feature_dim
        dup.classes = self.classes
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup.cls_w = self.cls_w.copy()
        dup.cls_b = self.cls_b.copy()
        return dup

    def _shape_signature(self):
        return tuple(p.shape for p in self.parameters())

    # -- forward / backward -------------------------------------------------

    def features(self, x: np.ndarray) -> np.ndarray:
        x = _check_batch(x, self.in_dim)
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
        return h

    def forward(self, x: np.ndarray):
        """Pure forward pass; returns (features, probs)."""
        feats = self.features(x)
        probs = softmax(feats @ self.cls_w + self.cls_b)
        return feats, probs

    def forward_recorded(self, x: np.ndarray) -> RecordedForward:
        """Forward pass that keeps every activation for backward()."""
        x = _check_batch(x, self.in_dim)
        acts = [x]
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
            acts.append(h)
        logits = h @ self.cls_w + self.cls_b
        probs = softmax(logits)
        return RecordedForward(acts, logits, probs, self._shape_signature())

    def backward(self, rec: RecordedForward, grad_logits=None, grad_probs=None,
                 grad_features=None) -> list[np.ndarray]:
        """Gradients of a scalar loss wrt every parameter.

        The loss gradient may be supplied on the logits, on the softmax
        probabilities, on the features, or any combination; contributions
        are summed.  Requires the RecordedForward from the same batch.
        """
        if rec is None:
            raise StateError("backward() needs a recorded forward pass")
        if rec.shapes != self._shape_signature():
            raise StateError("recorded forward does not match current parameters")
        n = rec.acts[0].shape[0]
        g_logits = np.zeros((n, self.classes))
        if grad_logits is not None:
            g_logits = g_logits + grad_logits
        if grad_probs is not None:
            g_logits = g_logits + softmax_vjp(rec.probs, grad_probs)
        grads = []
        feats = rec.acts[-1]
        g_cls_w = feats.T @ g_logits
        g_cls_b = g_logits.sum(axis=0)
        g_h = g_logits @ self.cls_w.T
        if grad_features is not None:
            g_h = g_h + grad_features
        for i in range(len(self.weights) - 1, -1, -1):
            h_out = rec.acts[i + 1]
            g_pre = g_h * (1.0 - h_out * h_out)
            g_w = rec.acts[i].T @ g_pre
            g_b = g_pre.sum(axis=0)
            grads.append(g_b)
            grads.append(g_w)
            if i > 0:
                g_h = g_pre @ self.weights[i].T
        grads.reverse()
        grads.extend((g_cls_w, g_cls_b))
        return grads

    def apply_gradients(self, grads, lr, velocity=None, momentum=0.0):
        """SGD step in place; returns the velocity buffers when momentum > 0."""
        params = self.parameters()
        if len(grads) != len(params):
            raise DimensionError("gradient list does not match parameters")
        if momentum > 0.0:
            if velocity is None:
                velocity = [np.zeros_like(p) for p in params]
            for p, g, v in zip(params, grads, velocity):
                v *= momentum
                v += g
                p -= lr * v
            return velocity
        for p, g in zip(params, grads):
            p -= lr * g
        return velocity


class EmaEncoder:
    """Exponential-moving-average shadow of a network's feature extractor."""

    def __init__(self, net: Network):
        self.in_dim = net.in_dim
        self.weights = [w.copy() for w in net.weights]
        self.biases = [b.copy() for b in net.biases]

    def update(self, net: Network, decay: float) -> None:
        """shadow <- decay * shadow + (1 - decay) * live, per parameter."""
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {decay}")
        if len(net.weights) != len(self.weights) or any(
            sw.shape != lw.shape for sw, lw in zip(self.weights, net.weights)
        ):
            raise DimensionError("shadow and live feature extractors differ in shape")
        for shadow, live in zip(self.weights, net.weights):
            shadow *= decay
            shadow += (1.0 - decay) * live
        for shadow, live in zip(self.biases, net.biases):
            shadow *= decay
            shadow += (1.0 - decay) * live

    def features(self, x: np.ndarray) -> np.ndarray:
        """Teacher features from the shadow parameters; never differentiated."""
        x = _check_batch(x, self.in_dim)
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
        return h


# -- checkpoint io ----------------------------------------------------------


def _tensor_entries(net: Network):
    entries = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        entries.append((f"f{i}.w", w))
        entries.append((f"f{i}.b", b))
    entries.append(("cls.w", net.cls_w))
    entries.append(("cls.b", net.cls_b))
    return entries


def save_checkpoint(net: Network, path) -> None:
    """Write a JSON header line followed by flat little-endian float64 data."""
    entries = _tensor_entries(net)
    header = {
        "version": CHECKPOINT_VERSION,
        "in_dim": net.in_dim,
        "hidden": list(net.hidden),
        "feature_dim": net.feature_dim,
        "classes": net.classes,
        "tensors": [[name, list(arr.shape)] for name, arr in entries],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"unreadable checkpoint header: {exc}") from exc
    for key in ("version", "in_dim", "hidden", "feature_dim", "classes", "tensors"):
        if key not in header:
            raise SchemaError(f"checkpoint header missing '{key}'")
    if header["version"] != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {header['version']}")
    net = Network(header["in_dim"], header["hidden"], header["feature_dim"],
                  header["classes"], seed=0)
    expected = _tensor_entries(net)
    if [[n, list(a.shape)] for n, a in expected] != header["tensors"]:
        raise SchemaError("checkpoint tensor table does not match declared topology")
    data = np.frombuffer(blob, dtype="<f8")
    total = sum(a.size for _, a in expected)
    if data.size != total:
        raise SchemaError(f"checkpoint payload has {data.size} values, expected {total}")
    if not np.isfinite(data).all():
        raise SchemaError("checkpoint payload contains non-finite values")
    offset = 0
    for _, arr in expected:
        chunk = data[offset:offset + arr.size].reshape(arr.shape)
        arr[...] = chunk
        offset += arr.size
    return net
