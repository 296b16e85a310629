"""MNIST IDX parsing and domain-incremental task streams."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, StreamError
from .linalg import RngState

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

DATA_DIR_ENV = "HVCL_DATA_DIR"


def default_data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "hvcl" / "mnist"))


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw):
    """Decode an IDX byte string.

    Images (magic 0x803) come back as an ``(n, rows*cols)`` float64 array
    scaled to [0, 1]; labels (magic 0x801) as an int64 vector.
    """
    if len(raw) < 8:
        raise FormatError("file too short for an IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IMAGES_MAGIC:
        if len(raw) < 16:
            raise FormatError("file too short for an image header")
        rows, cols = struct.unpack(">II", raw[8:16])
        expected = 16 + count * rows * cols
        if len(raw) < expected:
            raise FormatError(f"truncated image file: {len(raw)} bytes, expected {expected}")
        pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
        return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if magic == LABELS_MAGIC:
        expected = 8 + count
        if len(raw) < expected:
            raise FormatError(f"truncated label file: {len(raw)} bytes, expected {expected}")
        return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    raise FormatError(f"unknown IDX magic number 0x{magic:08x}")


def load_idx(path):
    return parse_idx(_read_bytes(path))


def encode_idx_images(images_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    return struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images_u8.tobytes()


def encode_idx_labels(labels_u8):
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, labels_u8.size) + labels_u8.tobytes()


def load_mnist(data_dir=None):
    """Return ``(train_x, train_y, test_x, test_y)`` from ``data_dir``."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    out = []
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        name = MNIST_FILES[key]
        path = data_dir / name
        if not path.exists() and (data_dir / f"{name}.gz").exists():
            path = data_dir / f"{name}.gz"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `hvcl fetch mnist --dir {data_dir}`")
        out.append(load_idx(path))
    return tuple(out)


@dataclass
class TaskSpec:
    task_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self):
        return self.train_x.shape[0]


@dataclass
class TaskStream:
    tasks: list = field(default_factory=list)
    n_classes: int = 2
    mode: str = "domain-incremental"

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def in_dim(self):
        return self.tasks[0].train_x.shape[1]


SPLIT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


def _split_one(images, labels, pairs):
    parts = []
    for a, b in pairs:
        mask = (labels == a) | (labels == b)
        if not np.any(labels == a) or not np.any(labels == b):
            raise StreamError(f"digit pair {a}/{b} is missing from the data")
        parts.append((images[mask], (labels[mask] == b).astype(np.int64)))
    return parts


def make_split_tasks(train_x, train_y, test_x=None, test_y=None, pairs=SPLIT_PAIRS):
    """Five binary tasks 0/1, 2/3, 4/5, 6/7, 8/9, each relabeled to {0, 1}."""
    train = _split_one(train_x, train_y, pairs)
    test = _split_one(test_x, test_y, pairs) if test_x is not None else [(tx[:0], ty[:0]) for tx, ty in train]
    tasks = [TaskSpec(t, tx, ty, vx, vy) for t, ((tx, ty), (vx, vy)) in enumerate(zip(train, test))]
    return TaskStream(tasks, n_classes=2)


def task_permutations(n_tasks, n_pixels, rng, identity_first=True):
    perms = []
    for t in range(n_tasks):
        if t == 0 and identity_first:
            perms.append(np.arange(n_pixels))
        else:
            perms.append(rng.split(t).permutation(n_pixels))
    return perms


def make_permuted_tasks(train_x, train_y, test_x, test_y, n_tasks, rng, identity_first=True):
    """Each task applies one fixed pixel permutation to every image; labels
    keep all ten classes."""
    if n_tasks < 1:
        raise StreamError("need at least one task")
    perms = task_permutations(n_tasks, train_x.shape[1], rng, identity_first)
    tasks = [TaskSpec(t, train_x[:, p], train_y, test_x[:, p], test_y) for t, p in enumerate(perms)]
    return TaskStream(tasks, n_classes=int(max(train_y.max(), test_y.max())) + 1)


def make_blob_stream(n_tasks, n_classes=2, dim=2, rng=None, n_train=400, n_test=200,
                     sigma=1.0, spread=8.0, min_separation=6.0):
    """Class-conditional Gaussian blobs whose centers move from task to task.

    All centers (over every task and class) are at least
    ``min_separation * sigma`` apart, so every task is linearly separable
    up to a vanishing tail mass.
    """
    if n_tasks < 1:
        raise StreamError("need at least one task")
    rng = rng if rng is not None else RngState(0)
    gen = rng.split(0).generator
    centers = []
    while len(centers) < n_tasks * n_classes:
        c = gen.uniform(-spread, spread, dim)
        if all(np.linalg.norm(c - o) >= min_separation * sigma for o in centers):
            centers.append(c)
        elif gen.random() < 0.001:  # widen the box if it is crowded
            spread *= 1.1
    centers = np.asarray(centers).reshape(n_tasks, n_classes, dim)
    tasks = []
    for t in range(n_tasks):
        g = rng.split(1, t).generator

        def draw(n):
            y = np.arange(n) % n_classes
            x = centers[t, y] + sigma * g.standard_normal((n, dim))
            order = g.permutation(n)
            return x[order], y[order].astype(np.int64)

        tx, ty = draw(n_train)
        vx, vy = draw(n_test)
        tasks.append(TaskSpec(t, tx, ty, vx, vy))
    stream = TaskStream(tasks, n_classes=n_classes)
    stream.centers = centers
    return stream


def subsample(stream, n_train=None, n_test=None, rng=None):
    """Keep the first ``n_train``/``n_test`` examples of every task (after a
    seeded shuffle), for reduced-cost runs."""
    rng = rng if rng is not None else RngState(0)
    tasks = []
    for t in stream.tasks:
        tr = rng.split(0, t.task_id).permutation(t.n_train)[:n_train]
        te = rng.split(1, t.task_id).permutation(t.test_x.shape[0])[:n_test]
        tasks.append(TaskSpec(t.task_id, t.train_x[tr], t.train_y[tr], t.test_x[te], t.test_y[te]))
    return TaskStream(tasks, stream.n_classes, stream.mode)
