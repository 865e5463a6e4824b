"""Deterministic SVG plots from run artifacts.

All rendering is done with a small built-in SVG writer: identical inputs
produce byte-identical files, which the run-level determinism check relies
on.  Feature clouds with more than two columns are projected onto their top
two principal directions with a sign-fixed eigendecomposition.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import SchemaError

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"]

METRIC_COLUMNS = ["iter", "stage", "ce_s", "sce_t", "kl", "reg", "total",
                  "source_acc", "target_acc", "pseudo_acc", "proto_drift"]


def _fmt(v: float) -> str:
    return format(float(v), ".2f")


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        ]

    def line(self, x1, y1, x2, y2, color="#000000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-width="{_fmt(width)}"{d}/>')

    def polyline(self, pts, color, width=1.5):
        if len(pts) < 2:
            if len(pts) == 1:
                self.circle(pts[0][0], pts[0][1], 2.0, color)
            return
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{_fmt(width)}"/>')

    def circle(self, cx, cy, r, color, stroke="none"):
        s = f' stroke="{stroke}" stroke-width="1.00"' if stroke != "none" else ""
        self.parts.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="{color}"{s}/>')

    def diamond(self, cx, cy, r, color):
        pts = [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(
            f'<polygon points="{coords}" fill="{color}" stroke="#000000" '
            f'stroke-width="1.00"/>')

    def text(self, x, y, s, size=11, anchor="start", color="#000000"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="monospace" '
            f'font-size="{size}" text-anchor="{anchor}" fill="{color}">{s}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _Frame:
    """Maps a data rectangle onto a pixel rectangle and draws the axes."""

    def __init__(self, canvas, px, py, pw, ph, xs, ys, title=""):
        self.canvas = canvas
        self.px, self.py, self.pw, self.ph = px, py, pw, ph
        finite_x = [v for v in xs if np.isfinite(v)]
        finite_y = [v for v in ys if np.isfinite(v)]
        self.x0, self.x1 = (min(finite_x), max(finite_x)) if finite_x else (0.0, 1.0)
        self.y0, self.y1 = (min(finite_y), max(finite_y)) if finite_y else (0.0, 1.0)
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        pad = 0.05 * (self.y1 - self.y0)
        self.y0 -= pad
        self.y1 += pad
        canvas.parts.append(
            f'<rect x="{_fmt(px)}" y="{_fmt(py)}" width="{_fmt(pw)}" '
            f'height="{_fmt(ph)}" fill="none" stroke="#000000" stroke-width="1.00"/>')
        if title:
            canvas.text(px + pw / 2, py - 6, title, size=12, anchor="middle")
        canvas.text(px - 4, py + ph, format(self.y0, ".3g"), anchor="end")
        canvas.text(px - 4, py + 10, format(self.y1, ".3g"), anchor="end")
        canvas.text(px, py + ph + 14, format(self.x0, ".3g"), anchor="middle")
        canvas.text(px + pw, py + ph + 14, format(self.x1, ".3g"), anchor="middle")

    def map(self, x, y):
        fx = (x - self.x0) / (self.x1 - self.x0)
        fy = (y - self.y0) / (self.y1 - self.y0)
        return self.px + fx * self.pw, self.py + (1.0 - fy) * self.ph

    def series(self, xs, ys, color, label=None, slot=0):
        pts = [self.map(x, y) for x, y in zip(xs, ys)
               if np.isfinite(x) and np.isfinite(y)]
        self.canvas.polyline(pts, color)
        if label:
            lx = self.px + 6 + 90 * (slot % 4)
            ly = self.py + 14 + 13 * (slot // 4)
            self.canvas.text(lx, ly, label, size=10, color=color)


def principal_2d(x: np.ndarray) -> np.ndarray:
    """Project onto the top two principal directions, deterministically.

    Eigenvector signs are fixed so each vector's largest-magnitude component
    is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] <= 2:
        return x[:, :2]
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x), 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    basis = vecs[:, order]
    for j in range(basis.shape[1]):
        lead = np.argmax(np.abs(basis[:, j]))
        if basis[lead, j] < 0:
            basis[:, j] = -basis[:, j]
    return centered @ basis


def _read_csv(path, required):
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        return list(reader)


def _column(rows, name):
    out = []
    for r in rows:
        raw = r[name]
        try:
            out.append(float(raw))
        except ValueError:
            out.append(float("nan"))
    return out


def _learning_curves(rows, out_path):
    canvas = _Canvas(760, 320)
    iters = _column(rows, "iter")
    loss_names = ["ce_s", "sce_t", "kl", "reg", "total"]
    losses = {n: _column(rows, n) for n in loss_names}
    accs = {n: _column(rows, n) for n in ("source_acc", "target_acc")}
    all_losses = [v for col in losses.values() for v in col]
    left = _Frame(canvas, 60, 30, 280, 230, iters, all_losses, title="losses")
    for i, name in enumerate(loss_names):
        left.series(iters, losses[name], PALETTE[i], label=name, slot=i)
    all_accs = [v for col in accs.values() for v in col] + [0.0, 1.0]
    right = _Frame(canvas, 430, 30, 280, 230, iters, all_accs, title="accuracy")
    for i, name in enumerate(accs):
        right.series(iters, accs[name], PALETTE[i], label=name, slot=i)
    out_path.write_text(canvas.render(), encoding="utf-8")


def _pseudo_quality(rows, out_path):
    canvas = _Canvas(440, 320)
    stage1 = [r for r in rows if r["stage"] == "stage1"] or rows
    iters = _column(stage1, "iter")
    acc = _column(stage1, "pseudo_acc")
    frame = _Frame(canvas, 60, 30, 330, 230, iters, acc + [0.0, 1.0],
                   title="pseudo-label quality")
    frame.series(iters, acc, PALETTE[0], label="pseudo_acc", slot=0)
    if stage1 and "pseudo_miou" in stage1[0]:
        miou = _column(stage1, "pseudo_miou")
        frame.series(iters, miou, PALETTE[1], label="pseudo_miou", slot=1)
    out_path.write_text(canvas.render(), encoding="utf-8")


def _scatter(rows, proto_rows, out_path):
    canvas = _Canvas(460, 420)
    if rows:
        coord_cols = [c for c in rows[0].keys() if c not in ("y", "label", "id")]
        pts = np.array([[float(r[c]) for c in coord_cols] for r in rows])
        labels = np.array([int(r.get("y", r.get("label", 0))) for r in rows])
        pts2 = principal_2d(pts)
    else:
        pts2 = np.zeros((0, 2))
        labels = np.zeros(0, dtype=int)
    proto_pts = np.zeros((0, 2))
    proto_cls = []
    if proto_rows:
        pcols = [c for c in proto_rows[0].keys() if c.startswith("c")]
        proto_pts = np.array([[float(r[c]) for c in pcols] for r in proto_rows])
        proto_pts = principal_2d(proto_pts) if proto_pts.shape[1] > 2 else proto_pts
        proto_cls = [int(r["class"]) for r in proto_rows]
    xs = list(pts2[:, 0]) + list(proto_pts[:, 0])
    ys = list(pts2[:, 1]) + list(proto_pts[:, 1])
    frame = _Frame(canvas, 50, 30, 380, 330, xs, ys, title="target features")
    for (x, y), lab in zip(pts2, labels):
        px, py = frame.map(x, y)
        canvas.circle(px, py, 2.2, PALETTE[lab % len(PALETTE)])
    for (x, y), lab in zip(proto_pts, proto_cls):
        px, py = frame.map(x, y)
        canvas.diamond(px, py, 6.0, PALETTE[lab % len(PALETTE)])
    out_path.write_text(canvas.render(), encoding="utf-8")


def emit_plots(metrics_csv, dataset_csv, out_dir, prototypes_csv=None) -> list:
    """Render the learning curves, the feature scatter and the pseudo-label
    quality curve as SVG 1.1 files under out_dir.

    ``dataset_csv`` is any point table with coordinate columns and a ``y``
    column; clouds wider than 2-D are PCA-projected.  Empty inputs yield
    empty-axes plots.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_rows = _read_csv(metrics_csv, METRIC_COLUMNS)
    data_rows = _read_csv(dataset_csv, ["y"]) if dataset_csv else []
    proto_rows = _read_csv(prototypes_csv, ["class"]) if prototypes_csv else []
    paths = [out_dir / "learning_curves.svg", out_dir / "feature_scatter.svg",
             out_dir / "pseudo_quality.svg"]
    _learning_curves(metric_rows, paths[0])
    _scatter(data_rows, proto_rows, paths[1])
    _pseudo_quality(metric_rows, paths[2])
    return paths
