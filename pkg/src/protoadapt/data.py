"""Synthetic shifted-distribution benchmarks for source/target adaptation.

A domain is a labelled point cloud; the target domain is the same cluster
mechanism pushed through a rotation plus translation and sampled afresh.
Target labels are wrapped in :class:`HiddenLabels` so they can only be
consumed through the metrics module, never by training code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, SchemaError
from .nn import Network


class HiddenLabels:
    """Evaluation-only ground truth; unwrap via ``metrics.reveal``."""

    __slots__ = ("_values",)

    def __init__(self, values):
        object.__setattr__(self, "_values", np.asarray(values, dtype=np.int64))

    def __setattr__(self, name, value):
        raise AttributeError("HiddenLabels is immutable")

    def __len__(self) -> int:
        return self._values.shape[0]

    def __repr__(self) -> str:
        return f"HiddenLabels(n={len(self)})"


@dataclass(frozen=True)
class DomainSpec:
    """Everything needed to draw one source/target benchmark."""

    family: str = "gaussian"          # "gaussian" | "moons"
    class_count: int = 2
    dim: int = 2
    n_samples: int = 1000
    means: tuple = ()                 # gaussian family: one mean per class
    cov_scales: tuple = ()            # gaussian family: isotropic std per class
    moon_noise: float = 0.1           # moons family
    class_freqs: tuple = ()
    rotation_deg: float = 0.0
    translation: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("gaussian", "moons"):
            raise ValueError(f"unknown family {self.family!r}")
        freqs = self.class_freqs or tuple([1.0 / self.class_count] * self.class_count)
        object.__setattr__(self, "class_freqs", tuple(float(f) for f in freqs))
        if len(self.class_freqs) != self.class_count:
            raise ValueError("class_freqs length must equal class_count")
        if abs(sum(self.class_freqs) - 1.0) > 1e-9:
            raise ValueError("class_freqs must sum to 1")
        if self.family == "gaussian":
            if len(self.means) != self.class_count:
                raise ValueError("gaussian family needs one mean per class")
            if len(self.cov_scales) != self.class_count:
                raise ValueError("gaussian family needs one cov scale per class")
            if any(s <= 0 for s in self.cov_scales):
                raise ValueError("covariance scales must be positive")
        if self.family == "moons" and (self.class_count != 2 or self.dim != 2):
            raise ValueError("moons family is 2 classes in 2-D")


@dataclass
class DomainData:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_truth: HiddenLabels


def preset(name: str) -> DomainSpec:
    """Stock benchmarks with every parameter pinned."""
    if name == "gauss-shift":
        return DomainSpec(
            family="gaussian",
            class_count=4,
            dim=2,
            n_samples=1200,
            means=((2.4, 0.0), (0.0, 2.4), (-2.4, 0.0), (0.0, -2.4)),
            cov_scales=(0.55, 0.55, 0.55, 0.55),
            class_freqs=(0.25, 0.25, 0.25, 0.25),
            rotation_deg=30.0,
            translation=(0.4, -0.3),
        )
    if name == "moons-shift":
        return DomainSpec(
            family="moons",
            class_count=2,
            dim=2,
            n_samples=1200,
            moon_noise=0.12,
            class_freqs=(0.5, 0.5),
            rotation_deg=30.0,
            translation=(0.0, 0.0),
        )
    raise ValueError(f"unknown preset {name!r}")


def _rotation_matrix(deg: float) -> np.ndarray:
    th = np.deg2rad(deg)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


def _draw_domain(spec: DomainSpec, rng: np.random.Generator):
    labels = rng.choice(spec.class_count, size=spec.n_samples, p=spec.class_freqs)
    if spec.family == "gaussian":
        means = np.asarray(spec.means, dtype=np.float64)
        scales = np.asarray(spec.cov_scales, dtype=np.float64)
        noise = rng.standard_normal((spec.n_samples, spec.dim))
        x = means[labels] + scales[labels, None] * noise
    else:
        # two interleaved crescents, centred so rotation keeps them in place
        t = rng.uniform(0.0, np.pi, size=spec.n_samples)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where(labels[:, None] == 0, outer, inner)
        x = x - np.array([0.5, 0.25])
        x = x + spec.moon_noise * rng.standard_normal((spec.n_samples, 2))
    return x, labels.astype(np.int64)


def _apply_shift(x: np.ndarray, spec: DomainSpec) -> np.ndarray:
    if spec.dim != 2:
        raise DimensionError("shift transform is defined for 2-D benchmarks")
    rot = _rotation_matrix(spec.rotation_deg)
    return x @ rot.T + np.asarray(spec.translation, dtype=np.float64)


def generate(spec: DomainSpec) -> DomainData:
    """Draw the source domain and the shifted target domain.

    Target labels are returned wrapped; they exist only for evaluation.
    """
    ss = np.random.SeedSequence(spec.seed)
    src_seed, tgt_seed = ss.spawn(2)
    source_x, source_y = _draw_domain(spec, np.random.default_rng(src_seed))
    raw_x, raw_y = _draw_domain(spec, np.random.default_rng(tgt_seed))
    target_x = _apply_shift(raw_x, spec)
    return DomainData(source_x, source_y, target_x, HiddenLabels(raw_y))


def inject_boundary_noise(labels, x, model: Network, rate: float) -> np.ndarray:
    """Flip the labels of the ``rate`` fraction of samples with the smallest
    decision margin under ``model``.

    The margin is top-1 minus top-2 predicted probability; flipped samples
    take the model's runner-up class (or the top class if the runner-up is
    already their label).  Used to fabricate boundary-concentrated label
    noise for denoising experiments.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    labels = np.asarray(labels).copy()
    if rate == 0.0:
        return labels
    _, probs = model.forward(x)
    order = np.argsort(probs, axis=1)
    top, second = order[:, -1], order[:, -2]
    margin = probs[np.arange(len(labels)), top] - probs[np.arange(len(labels)), second]
    n_flip = int(round(rate * len(labels)))
    flip_rows = np.argsort(margin, kind="stable")[:n_flip]
    new_labels = np.where(second[flip_rows] != labels[flip_rows],
                          second[flip_rows], top[flip_rows])
    labels[flip_rows] = new_labels
    return labels


# -- csv export / import ------------------------------------------------------


def save_domain_csv(path, x, y) -> None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        cols = ",".join(f"x{i}" for i in range(x.shape[1]))
        fh.write(f"{cols},y\n")
        for row, label in zip(x, y):
            coords = ",".join(format(v, ".17g") for v in row)
            fh.write(f"{coords},{label}\n")


def load_domain_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[-1] != "y" or not header[0].startswith("x"):
            raise SchemaError(f"{path}: expected columns x0..xk,y")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    dim = len(header) - 1
    x = np.array([[float(v) for v in r[:dim]] for r in rows], dtype=np.float64)
    y = np.array([int(r[dim]) for r in rows], dtype=np.int64)
    return x.reshape(len(rows), dim), y


def export_dataset(out_dir, spec: DomainSpec, data: DomainData) -> None:
    """Write source.csv, target.csv and a sidecar spec.json under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_domain_csv(out_dir / "source.csv", data.source_x, data.source_y)
    save_domain_csv(out_dir / "target.csv", data.target_x, data.target_truth._values)
    with open(out_dir / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)


def import_dataset(in_dir):
    """Read a dataset exported by :func:`export_dataset`."""
    in_dir = Path(in_dir)
    with open(in_dir / "spec.json", "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    raw["means"] = tuple(tuple(m) for m in raw.get("means", ()))
    for key in ("cov_scales", "class_freqs", "translation"):
        raw[key] = tuple(raw[key])
    spec = DomainSpec(**raw)
    source_x, source_y = load_domain_csv(in_dir / "source.csv")
    target_x, target_y = load_domain_csv(in_dir / "target.csv")
    return spec, DomainData(source_x, source_y, target_x, HiddenLabels(target_y))
