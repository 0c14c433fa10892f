"""Dataset synthesis, binary ingestion, and class-incremental task splitting.

The synthetic generator gives each class a fixed low-frequency template and a
per-class noise level: noisy classes are genuinely harder to retain, which is
the knob the directional experiments turn. The binary reader/writer pair for
the CIFAR-100 layout is byte-exact and round-trip tested.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .continual import TaskStream
from .seeding import stream_rng

CIFAR_SIDE = 32
CIFAR_RECORD_BYTES = 2 + 3 * CIFAR_SIDE * CIFAR_SIDE  # coarse + fine + RGB planes
CIFAR_CLASSES = 100

DATASET_MAGIC = b"HFCD"
DATASET_VERSION = 1


@dataclass
class Dataset:
    """Images in [0,1] as (n, channels, side, side) with global integer labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = "unknown"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-d, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images disagree on sample count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        counts = np.bincount(self.labels, minlength=self.n_classes)
        if np.any(counts == 0):
            raise ValueError("every class needs at least one sample")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def indices_of_class(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def subset(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.images[indices], self.labels[indices]


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class templates are fixed by (seed, class); the split name only
    decorrelates the noise draws, so train and test share class identity."""

    n_classes: int
    samples_per_class: int
    side: int = 16
    channels: int = 1
    class_noise: tuple[float, ...] = ()
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        noise = tuple(self.class_noise) if self.class_noise else (0.05,) * self.n_classes
        object.__setattr__(self, "class_noise", noise)
        if len(self.class_noise) != self.n_classes:
            raise ValueError("need one noise level per class")
        if any(s < 0 for s in self.class_noise):
            raise ValueError("noise levels must be nonnegative")


def class_template(spec: SyntheticSpec, cls: int) -> np.ndarray:
    """Deterministic low-frequency pattern for one class, in [0.1, 0.9]."""
    rng = stream_rng(spec.seed, f"template/{cls}")
    coords = np.arange(spec.side) / spec.side
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((spec.channels, spec.side, spec.side))
    for ch in range(spec.channels):
        acc = np.zeros((spec.side, spec.side))
        for _ in range(3):
            fx, fy = rng.integers(1, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        lo, hi = acc.min(), acc.max()
        img[ch] = 0.1 + 0.8 * (acc - lo) / (hi - lo)
    return img


def _shift_bilinear(plane: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Translate by a subpixel offset with bilinear sampling, edge-clamped."""
    side = plane.shape[0]
    grid = np.arange(side, dtype=np.float64)
    yy, xx = np.meshgrid(grid - dy, grid - dx, indexing="ij")
    yy = np.clip(yy, 0, side - 1)
    xx = np.clip(xx, 0, side - 1)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, side - 1)
    x1 = np.minimum(x0 + 1, side - 1)
    wy = yy - y0
    wx = xx - x0
    return ((1 - wy) * (1 - wx) * plane[y0, x0]
            + (1 - wy) * wx * plane[y0, x1]
            + wy * (1 - wx) * plane[y1, x0]
            + wy * wx * plane[y1, x1])


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Each sample is its class template, jittered and noised by the class level."""
    n = spec.n_classes * spec.samples_per_class
    images = np.empty((n, spec.channels, spec.side, spec.side))
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for cls in range(spec.n_classes):
        template = class_template(spec, cls)
        sigma = spec.class_noise[cls]
        rng = stream_rng(spec.seed, f"samples/{spec.split}/{cls}")
        for _ in range(spec.samples_per_class):
            sample = template.copy()
            if sigma > 0:
                dy, dx = rng.normal(0.0, sigma * spec.side / 4.0, size=2)
                for ch in range(spec.channels):
                    sample[ch] = _shift_bilinear(sample[ch], dy, dx)
                sample += rng.normal(0.0, sigma, size=sample.shape)
            images[row] = np.clip(sample, 0.0, 1.0)
            labels[row] = cls
            row += 1
    return Dataset(images, labels, spec.n_classes, provenance="synthetic")


# ---------------------------------------------------------------------------
# CIFAR-100 binary layout: per record 1 coarse label byte, 1 fine label byte,
# then 3072 pixel bytes as three 32x32 planes (R, G, B).


def read_label_records(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse raw records into (coarse, fine, pixels-uint8) without rescaling."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    n = len(raw) // CIFAR_RECORD_BYTES
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    coarse = records[:, 0].copy()
    fine = records[:, 1].copy()
    for name, labels in (("coarse", coarse), ("fine", fine)):
        bad = np.flatnonzero(labels >= CIFAR_CLASSES)
        if bad.size:
            offset = bad[0] * CIFAR_RECORD_BYTES + (0 if name == "coarse" else 1)
            raise ValueError(
                f"{path}: {name} label {labels[bad[0]]} out of range at byte offset {offset}"
            )
    pixels = records[:, 2:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).copy()
    return coarse, fine, pixels


def write_label_records(path: str | Path, coarse: np.ndarray, fine: np.ndarray,
                        pixels: np.ndarray) -> None:
    n = len(fine)
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = coarse
    records[:, 1] = fine
    records[:, 2:] = pixels.reshape(n, -1)
    Path(path).write_bytes(records.tobytes())


def load_cifar100_binary(train_path: str | Path, test_path: str | Path) -> tuple[Dataset, Dataset]:
    """Fine labels only; pixels scaled to [0,1]."""
    datasets = []
    for path in (train_path, test_path):
        _, fine, pixels = read_label_records(path)
        datasets.append(Dataset(pixels.astype(np.float64) / 255.0,
                                fine.astype(np.int64),
                                CIFAR_CLASSES, provenance=f"cifar100:{path}"))
    return datasets[0], datasets[1]


# ---------------------------------------------------------------------------
# flat binary export for synthetic datasets


def save_dataset_binary(dataset: Dataset, path: str | Path) -> None:
    """Header: magic, version u32, samples u32, classes u32, side u32,
    channels u32 (all little-endian); then u16 labels; then uint8 pixels."""
    header = DATASET_MAGIC + struct.pack(
        "<IIIII", DATASET_VERSION, len(dataset), dataset.n_classes,
        dataset.side, dataset.channels,
    )
    labels = dataset.labels.astype("<u2").tobytes()
    pixels = np.round(dataset.images * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + labels + pixels)


def load_dataset_binary(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, n, n_classes, side, channels = struct.unpack("<IIIII", raw[4:24])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    label_bytes = 2 * n
    pixel_bytes = n * channels * side * side
    if len(raw) != 24 + label_bytes + pixel_bytes:
        raise ValueError(f"{path}: size {len(raw)} does not match header counts")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=24).astype(np.int64)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=pixel_bytes, offset=24 + label_bytes)
    images = pixels.reshape(n, channels, side, side).astype(np.float64) / 255.0
    return Dataset(images, labels, n_classes, provenance=f"binary:{path}")


# ---------------------------------------------------------------------------
# task splitting


def split_tasks(n_classes: int, tasks: int, base_fraction: float, seed: int) -> TaskStream:
    """Seeded class permutation cut into task blocks.

    base_fraction 0.0: `tasks` equal blocks. base_fraction 0.5: one big first
    block holding half the classes, then `tasks` equal blocks of the rest
    (tasks + 1 blocks total).
    """
    if tasks < 1:
        raise ValueError("need at least one task")
    order = [int(c) for c in stream_rng(seed, "class-order").permutation(n_classes)]
    if base_fraction == 0.0:
        if n_classes % tasks != 0:
            raise ValueError(f"{n_classes} classes do not divide into {tasks} equal tasks")
        sizes = [n_classes // tasks] * tasks
    elif base_fraction == 0.5:
        if n_classes % 2 != 0:
            raise ValueError(f"{n_classes} classes cannot be halved")
        rest = n_classes // 2
        if rest % tasks != 0:
            raise ValueError(f"{rest} remaining classes do not divide into {tasks} tasks")
        sizes = [rest] + [rest // tasks] * tasks
    else:
        raise ValueError(f"base_fraction must be 0.0 or 0.5, got {base_fraction}")
    return TaskStream(class_order=order, task_sizes=sizes,
                      base_fraction=base_fraction, seed=seed)


def nearest_template_accuracy(dataset: Dataset, spec: SyntheticSpec) -> float:
    """1-NN against the class templates; the difficulty oracle for synthesis."""
    templates = np.stack([class_template(spec, c).reshape(-1)
                          for c in range(spec.n_classes)])
    flat = dataset.images.reshape(len(dataset), -1)
    dists = ((flat[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
    return float((dists.argmin(axis=1) == dataset.labels).mean())
