"""Sequential task streams: synthetic Gaussian clusters or raw image files.

Raw image file layout (little-endian)::

    header  magic b"CLIS" | version u16 | count u32 | height u16 | width u16 | channels u8
    record  label u16 | height*width*channels pixels u8, row-major (h, w, c)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CLIS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIHHB")
_LABEL = struct.Struct("<H")

AUGMENT_KINDS = ("identity", "gaussian-noise", "crop-flip")


class StreamFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Task:
    task_id: int
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_ids: np.ndarray

    @property
    def task_of(self) -> np.ndarray:
        return np.full(len(self.train_y), self.task_id, dtype=np.intp)


@dataclass
class TaskStream:
    tasks: list[Task]
    input_dim: int
    total_classes: int
    image_shape: tuple[int, int, int] | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def feature_std(self) -> float:
        x = np.vstack([t.train_x for t in self.tasks])
        return float(x.std(axis=0).mean())

    def task_of_class(self) -> dict[int, int]:
        return {c: t.task_id for t in self.tasks for c in t.classes}

    def all_train(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.vstack([t.train_x for t in self.tasks]),
            np.concatenate([t.train_y for t in self.tasks]),
            np.concatenate([t.train_ids for t in self.tasks]),
        )


@dataclass(frozen=True)
class AugmentorConfig:
    """``strength`` is the noise std for gaussian-noise, the pad width for crop-flip."""

    kind: str = "identity"
    strength: float = 0.0
    image_shape: tuple[int, int, int] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {AUGMENT_KINDS}")
        if self.strength < 0:
            raise ValueError("augmentation strength must be >= 0")
        if self.kind == "crop-flip" and self.image_shape is None:
            raise ValueError("crop-flip needs image_shape (h, w, c)")


def augment(batch: np.ndarray, cfg: AugmentorConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.kind == "identity" or (cfg.kind == "gaussian-noise" and cfg.strength == 0):
        return batch
    batch = np.asarray(batch, dtype=np.float64)
    if cfg.kind == "gaussian-noise":
        return batch + rng.normal(0.0, cfg.strength, size=batch.shape)
    return _crop_flip(batch, cfg.image_shape, int(cfg.strength), rng)


def _crop_flip(batch, image_shape, pad, rng):
    h, w, c = image_shape
    images = batch.reshape(-1, h, w, c)
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    for k in range(len(images)):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[k, dy : dy + h, dx : dx + w]
        out[k] = crop[:, ::-1] if rng.random() < 0.5 else crop
    return out.reshape(batch.shape)


def _class_means(total: int, input_dim: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    if input_dim >= total:
        # orthogonal directions: pairwise distance margin * sqrt(2)
        q, _ = np.linalg.qr(rng.normal(size=(input_dim, total)))
        return margin * q.T
    # distinct hypercube vertices, side length margin
    bits = rng.choice(2 ** min(input_dim, 30), size=total, replace=False)
    verts = ((bits[:, None] >> np.arange(input_dim)) & 1).astype(np.float64)
    return margin * (verts - 0.5)


def _split_tasks(x, y, ids, classes_per_task, test_mask):
    tasks = []
    for t, start in enumerate(range(0, int(y.max()) + 1, classes_per_task)):
        classes = tuple(range(start, start + classes_per_task))
        in_task = np.isin(y, classes)
        tr, te = in_task & ~test_mask, in_task & test_mask
        tasks.append(Task(t + 1, classes, x[tr], y[tr], ids[tr], x[te], y[te], ids[te]))
    return tasks


def gen_synthetic_stream(
    T: int = 5,
    classes_per_task: int = 2,
    n_per_class: int = 50,
    input_dim: int = 16,
    cluster_spread: float = 1.0,
    inter_class_margin: float = 4.0,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> TaskStream:
    """Gaussian clusters, one per class, split into ``T`` tasks.

    Class ids run 0..T*classes_per_task-1 in task order. Each class keeps the
    last ``test_fraction`` of its samples for testing.
    """
    if min(T, classes_per_task, n_per_class) < 1:
        raise ValueError("T, classes_per_task and n_per_class must all be >= 1")
    if input_dim < 2:
        raise ValueError("input_dim must be >= 2")
    rng = np.random.default_rng(seed)
    total = T * classes_per_task
    means = _class_means(total, input_dim, inter_class_margin, rng)
    n_test = int(round(n_per_class * test_fraction))
    xs, ys, test = [], [], []
    for c in range(total):
        xs.append(means[c] + cluster_spread * rng.normal(size=(n_per_class, input_dim)))
        ys.append(np.full(n_per_class, c, dtype=np.intp))
        test.append(np.arange(n_per_class) >= n_per_class - n_test)
    x, y, test_mask = np.vstack(xs), np.concatenate(ys), np.concatenate(test)
    ids = np.arange(len(y), dtype=np.int64)
    return TaskStream(_split_tasks(x, y, ids, classes_per_task, test_mask), input_dim, total)


def write_image_file(path: str | Path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 images of shape (n, h, w, c) in the raw stream format."""
    images = np.asarray(images)
    if images.ndim != 4 or images.dtype != np.uint8:
        raise ValueError("images must be uint8 with shape (n, h, w, c)")
    n, h, w, c = images.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError("one label per image required")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w, c))
        for label, image in zip(labels, images):
            fh.write(_LABEL.pack(int(label)))
            fh.write(np.ascontiguousarray(image).tobytes())


def read_image_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images uint8 (n, h, w, c), labels)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StreamFormatError("truncated header", len(raw))
    magic, version, count, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise StreamFormatError(f"unsupported version {version}", 4)
    if min(h, w, c) == 0:
        raise StreamFormatError("zero image dimension", 10)
    record = _LABEL.size + h * w * c
    expected = _HEADER.size + count * record
    if len(raw) != expected:
        raise StreamFormatError(f"file length {len(raw)} does not match {count} records ({expected} bytes)", len(raw))
    labels = np.empty(count, dtype=np.intp)
    images = np.empty((count, h, w, c), dtype=np.uint8)
    for k in range(count):
        offset = _HEADER.size + k * record
        (labels[k],) = _LABEL.unpack_from(raw, offset)
        images[k] = np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=offset + _LABEL.size).reshape(h, w, c)
    return images, labels


def load_image_stream(
    path: str | Path, task_splits: Sequence[Sequence[int]], test_fraction: float = 0.2
) -> TaskStream:
    """Partition a raw image file into tasks.

    File labels are remapped to contiguous ids in split order, so task t owns
    the ids following task t-1's. Pixels are scaled to [0, 1] and flattened.
    """
    images, labels = read_image_file(path)
    order = [int(c) for split in task_splits for c in split]
    if len(set(order)) != len(order):
        raise ValueError("task splits must be disjoint")
    remap = {c: k for k, c in enumerate(order)}
    _, h, w, c = images.shape
    record = _LABEL.size + h * w * c
    for k, label in enumerate(labels):
        if int(label) not in remap:
            raise StreamFormatError(f"label {int(label)} is not in any task split", _HEADER.size + k * record)
    for cls in order:
        if not np.any(labels == cls):
            raise ValueError(f"class {cls} has no samples in {path}")

    y = np.array([remap[int(v)] for v in labels], dtype=np.intp)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    ids = np.arange(len(y), dtype=np.int64)
    test_mask = np.zeros(len(y), dtype=bool)
    for cls in range(len(order)):
        members = np.flatnonzero(y == cls)
        n_test = int(round(len(members) * test_fraction))
        if n_test:
            test_mask[members[-n_test:]] = True
    tasks, start = [], 0
    for t, split in enumerate(task_splits):
        classes = tuple(range(start, start + len(split)))
        start += len(split)
        in_task = np.isin(y, classes)
        tr, te = in_task & ~test_mask, in_task & test_mask
        tasks.append(Task(t + 1, classes, x[tr], y[tr], ids[tr], x[te], y[te], ids[te]))
    return TaskStream(tasks, x.shape[1], len(order), image_shape=(h, w, c))
