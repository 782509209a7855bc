"""Datasets: synthetic generators, IDX ingestion, corruptions and splits.

Labels are 0-based class indices.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MIXTURE_RADIUS = 2.0
MIXTURE_SIGMA = 0.4
OOD_SHIFT = (6.0, 6.0)

NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
DROPOUT_FRACTION = (0.05, 0.1, 0.2, 0.3, 0.4)
CONTRAST_WEIGHT = (0.2, 0.35, 0.5, 0.65, 0.8)
CORRUPTIONS = ("gaussian_noise", "pixel_dropout", "contrast")


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    density: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (N, D) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.density is not None:
            self.density = np.asarray(self.density, dtype=np.float64)
            if self.density.shape != self.labels.shape:
                raise ValueError("density must have one value per row")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        dens = None if self.density is None else self.density[index]
        return replace(self, inputs=self.inputs[index], labels=self.labels[index], density=dens)


def mixture_means(k: int, radius: float = MIXTURE_RADIUS) -> np.ndarray:
    angles = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def mixture_density(points, k: int, radius: float = MIXTURE_RADIUS, sigma: float = MIXTURE_SIGMA,
                    shift=(0.0, 0.0)) -> np.ndarray:
    """Exact density of the equal-weight isotropic mixture at ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    means = mixture_means(k, radius) + np.asarray(shift)
    sq = ((points[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return np.exp(-sq / (2 * sigma**2)).mean(axis=1) / (2 * np.pi * sigma**2)


def gen_gaussian_mixture(seed: int, n: int, k: int, radius: float = MIXTURE_RADIUS,
                         sigma: float = MIXTURE_SIGMA, shift=(0.0, 0.0)) -> Dataset:
    """``k`` isotropic Gaussians with means on a circle, one class each.

    Components get ``n // k`` points each (the first ``n % k`` one more), so
    every class is present once ``n >= k``.
    """
    if n < k:
        raise ValueError("need n >= k")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    means = mixture_means(k, radius) + np.asarray(shift)
    x = means[labels] + sigma * rng.standard_normal((n, 2))
    dens = mixture_density(x, k, radius, sigma, shift)
    return Dataset(x, labels, k, name=f"gmm{k}", density=dens,
                   meta={"seed": seed, "radius": radius, "sigma": sigma, "shift": list(shift)})


def gen_ood_mixture(seed: int, n: int, k: int) -> Dataset:
    """The in-distribution mixture translated by :data:`OOD_SHIFT`; labels are meaningless."""
    ds = gen_gaussian_mixture(seed, n, k, shift=OOD_SHIFT)
    ds.name = f"gmm{k}-ood"
    return ds


def gen_two_moons(seed: int, n: int, noise: float = 0.0) -> Dataset:
    """Interleaved unit half-circles; class 0 on top, class 1 shifted to (1, 0.5) and flipped."""
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.pi * rng.random(n0)
    t1 = np.pi * rng.random(n1)
    top = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    bottom = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([top, bottom])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2, name="moons", meta={"seed": seed, "noise": noise})


def grid(lo: float = -3.0, hi: float = 3.0, size: int = 21) -> np.ndarray:
    axis = np.linspace(lo, hi, size)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _open_maybe_gz(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expect_magic, what):
    with _open_maybe_gz(path) as f:
        data = f.read()
    if len(data) < 8:
        raise IdxFormatError(f"{what} file is truncated")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expect_magic:
        raise IdxFormatError(f"bad magic 0x{magic:08x} in {what} file, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{what} file is truncated")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise IdxFormatError(f"{what} file is truncated: {len(data) - header} of {count} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC, "image")


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, "label")


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1], images flattened."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, name=name, meta={"image_shape": list(images.shape[1:])})


def write_idx_images(path, images) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("images must be a uint8 array of shape (N, rows, cols)")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    _write(path, header + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.dtype != np.uint8 or labels.ndim != 1:
        raise ValueError("labels must be a 1-D uint8 array")
    _write(path, struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def _write(path, payload):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def corrupt(inputs, kind: str, severity: int, seed: int = 0, clip: bool = True) -> np.ndarray:
    """Apply one corruption at severity 1..5. ``kind="identity"`` accepts any severity and copies."""
    x = np.array(inputs, dtype=np.float64)
    if kind == "identity":
        return x
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}")
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ValueError(f"severity must be an integer in 1..5, got {severity!r}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian_noise":
        x = x + NOISE_SIGMA[severity - 1] * rng.standard_normal(x.shape)
    elif kind == "pixel_dropout":
        x = np.where(rng.random(x.shape) < DROPOUT_FRACTION[severity - 1], 0.0, x)
    else:
        w = CONTRAST_WEIGHT[severity - 1]
        mean = x.mean(axis=-1, keepdims=True)
        x = (1 - w) * x + w * mean
    if clip:
        x = np.clip(x, 0.0, 1.0)
    return x


def split(dataset: Dataset, fractions, seed: int = 0):
    """Seeded shuffle into ``len(fractions)`` disjoint parts (rounded down, remainder to the first)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be non-negative and sum to 1")
    n = len(dataset)
    sizes = np.floor(fractions * n).astype(int)
    sizes[0] += n - sizes.sum()
    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for size in sizes:
        parts.append(dataset.subset(order[start : start + size]))
        start += size
    return tuple(parts)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][-1] != "label":
        raise ValueError(f"{path}: expected a header ending in 'label'")
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(x, y, k, name=name or Path(path).stem)
