"""Class-incremental task streams built from synthetic blobs or IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SeedLike = Union[int, np.random.Generator]


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


class Sample(NamedTuple):
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataFormatError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataFormatError("label out of range")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]))

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def classes(self) -> set[int]:
        return set(np.unique(self.y).tolist())

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                       parts[0].num_classes)


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple
    classes_per_task: int
    class_order: tuple
    seed: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_order)


def split_by_class(train: Dataset, test: Dataset, num_tasks: int, seed: int) -> TaskStream:
    """Shuffle the class order with ``seed`` and cut it into contiguous tasks."""
    k = train.num_classes
    if num_tasks < 1 or k % num_tasks:
        raise DataFormatError(f"{k} classes cannot be split evenly into {num_tasks} tasks")
    order = np.random.default_rng(seed).permutation(k)
    per = k // num_tasks
    tasks = []
    for t in range(num_tasks):
        cls = order[t * per:(t + 1) * per]
        tasks.append(Task(t, tuple(int(c) for c in cls),
                          train.subset(np.isin(train.y, cls)), test.subset(np.isin(test.y, cls))))
    return TaskStream(tuple(tasks), per, tuple(int(c) for c in order), seed)


def synth_blobs(num_classes: int, dim: int, n_per_class: int, seed: int,
                separation: float = 4.0, noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters around ``separation``-scaled random unit directions."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = means[y] + noise * rng.normal(size=(len(y), dim))
    return Dataset(x.astype(np.float32), y.astype(np.int64), num_classes)


def train_test_split(ds: Dataset, seed: int, ratio: int = 5) -> tuple[Dataset, Dataset]:
    """Per-class split keeping ``ratio`` training samples for every test sample."""
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        n_test = len(idx) // (ratio + 1)
        te.append(idx[:n_test])
        tr.append(idx[n_test:])
    return ds.subset(np.sort(np.concatenate(tr))), ds.subset(np.sort(np.concatenate(te)))


# ---------------------------------------------------------------------------
# IDX


def _read_header(raw: bytes, magic: int, path) -> tuple[list, int]:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    rank = magic & 0xFF
    if len(raw) < 4 + 4 * rank:
        raise DataFormatError(f"{path}: truncated header")
    dims = list(struct.unpack(f">{rank}I", raw[4:4 + 4 * rank]))
    return dims, 4 + 4 * rank


def load_idx(images_path, labels_path, num_classes: Optional[int] = None,
             mean: Sequence[float] = (0.0,), std: Sequence[float] = (1.0,)) -> Dataset:
    """Read an IDX image/label pair into (N, 1, H, W) float32 pixels in [0, 1],
    then apply ``(x - mean) / std`` per channel."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    (n, h, w), off = _read_header(img_raw, IDX_IMAGES_MAGIC, images_path)
    (n_lab,), loff = _read_header(lab_raw, IDX_LABELS_MAGIC, labels_path)
    if n != n_lab:
        raise DataFormatError(f"{n} images but {n_lab} labels")
    if len(img_raw) - off != n * h * w:
        raise DataFormatError(f"{images_path}: payload has {len(img_raw) - off} bytes, expected {n * h * w}")
    if len(lab_raw) - loff != n:
        raise DataFormatError(f"{labels_path}: payload has {len(lab_raw) - loff} bytes, expected {n}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=off).reshape(n, 1, h, w)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=loff).astype(np.int64)
    x = pixels.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    x = (x - m) / s
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 0)
    return Dataset(x.astype(np.float32), labels, k)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# batching


def as_rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def batches(ds: Dataset, batch_size: int, seed: SeedLike) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled mini-batches; the final partial batch is kept.

    Passing the same Generator on successive epochs gives a fresh order each
    epoch; passing an int gives the same order every time.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = as_rng(seed).permutation(len(ds))
    for i in range(0, len(ds), batch_size):
        idx = order[i:i + batch_size]
        yield ds.x[idx], ds.y[idx]


def eval_batches(ds: Dataset, batch_size: int = 256) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for i in range(0, len(ds), batch_size):
        yield ds.x[i:i + batch_size], ds.y[i:i + batch_size]
