"""Labelled toy datasets and the CSV formats for data and samples."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .toy_oracle import ToyModel

GENERATORS = ("toy-gaussian", "two-moons", "swiss-roll")


@dataclass
class ToyDataset:
    x0: np.ndarray
    classes: np.ndarray
    spec: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.spec.get("n_classes", int(self.classes.max()) + 1 if len(self.classes) else 0))

    def __len__(self) -> int:
        return len(self.classes)

    def class_means(self) -> np.ndarray:
        return np.stack([self.x0[self.classes == k].mean(axis=0) for k in range(self.n_classes)])

    def to_csv(self) -> str:
        return _rows_to_csv(self.x0, {"class": self.classes}, self.dim)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def default_means(n_classes: int, d: int = 2, radius: float = 2.0) -> np.ndarray:
    if n_classes == 2:
        means = np.zeros((2, d))
        means[0, 0], means[1, 0] = -radius, radius
        return means
    ang = np.pi + 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, d))
    means[:, 0] = radius * np.cos(ang)
    means[:, 1 % d] = radius * np.sin(ang) if d > 1 else means[:, 0]
    return means


def toy_model_from_spec(spec: dict) -> ToyModel:
    n_classes = spec.get("n_classes", 2)
    d = spec.get("dim", 2)
    means = spec.get("means")
    means = default_means(n_classes, d) if means is None else np.asarray(means, dtype=np.float64)
    return ToyModel(means, spec.get("sigma", 0.5))


def generate(spec: dict) -> ToyDataset:
    """Build a dataset from ``spec`` (``generator``, ``n``, ``seed`` and
    generator-specific fields). Classes are balanced round-robin."""
    gen = spec.get("generator", "toy-gaussian")
    if gen not in GENERATORS:
        raise ValueError(f"unknown generator {gen!r}; expected one of {GENERATORS}")
    n = int(spec.get("n", 1000))
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(spec.get("seed", 0))
    spec = dict(spec, generator=gen, n=n)
    if gen == "toy-gaussian":
        model = toy_model_from_spec(spec)
        classes = np.arange(n) % model.n_classes
        x0 = model.sample(classes, rng) if n else np.zeros((0, model.dim))
        spec.setdefault("n_classes", model.n_classes)
        spec.setdefault("dim", model.dim)
    elif gen == "two-moons":
        classes = np.arange(n) % 2
        theta = rng.uniform(0, np.pi, n)
        x0 = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        x0[classes == 1] = np.stack([1 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)[classes == 1]
        x0 += spec.get("noise", 0.05) * rng.standard_normal((n, 2))
        spec.update(n_classes=2, dim=2)
    else:
        k = spec.get("n_classes", 2)
        classes = np.arange(n) % k
        u = rng.uniform(0, 1, n)
        theta = 1.5 * np.pi * (1 + 2 * u) + 2 * np.pi * classes / k
        radius = 0.15 * 1.5 * np.pi * (1 + 2 * u)
        x0 = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        x0 += spec.get("noise", 0.05) * rng.standard_normal((n, 2))
        spec.update(n_classes=k, dim=2)
    return ToyDataset(np.asarray(x0, dtype=np.float64).reshape(n, spec["dim"]), classes.astype(np.int64), spec)


def _fmt(v: float) -> str:
    return repr(float(v))


def _rows_to_csv(x: np.ndarray, extra: dict, d: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x_{i + 1}" for i in range(d)] + list(extra))
    cols = list(extra.values())
    for i in range(len(x)):
        w.writerow([_fmt(v) for v in x[i]] + [col[i] for col in cols])
    return buf.getvalue()


def write_dataset(path, ds: ToyDataset) -> str:
    text = ds.to_csv()
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


def read_dataset(path, spec: dict | None = None) -> ToyDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if header[-1] != "class" or not all(h == f"x_{i + 1}" for i, h in enumerate(header[:-1])):
        raise ValueError(f"{path}: header must be x_1..x_d,class")
    d = len(header) - 1
    body = rows[1:]
    x0 = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(len(body), d)
    classes = np.array([int(r[d]) for r in body], dtype=np.int64)
    return ToyDataset(x0, classes, dict(spec or {}))


def samples_to_csv(x: np.ndarray, classes, seed: int, mode: str) -> str:
    x = np.asarray(x)
    n = len(x)
    d = x.shape[1] if x.ndim == 2 else 0
    classes = np.broadcast_to(np.asarray(classes), (n,))
    return _rows_to_csv(x.reshape(n, d), {"class": classes, "seed": [seed] * n, "mode": [mode] * n}, d)


def scatter_svg(x: np.ndarray, classes, size: int = 480) -> str:
    """Plain SVG scatter of 2-D points coloured by class."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    x = np.asarray(x, dtype=np.float64)
    classes = np.asarray(classes)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if len(x):
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        pad = 0.05 * size
        px = pad + (x - lo) / span * (size - 2 * pad)
        for (u, v), k in zip(px, classes):
            parts.append(f'<circle cx="{u:.2f}" cy="{size - v:.2f}" r="1.5" '
                         f'fill="{palette[int(k) % len(palette)]}" fill-opacity="0.6"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
