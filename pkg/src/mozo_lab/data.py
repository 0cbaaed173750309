"""Seeded synthetic multimodal classification data and IncX task streams."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import Rng

MAGIC = b"MZLB"
FORMAT_VERSION = 1
# magic, version, classes, latent, vision dim, language dim, train/class, test/class, seed, sigma
_HEADER = struct.Struct("<4sIIIIIIIqd")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 100
    latent_dim: int = 16
    vision_dim: int = 64
    language_dim: int = 32
    train_per_class: int = 50
    test_per_class: int = 20
    sigma: float = 0.1
    seed: int = 0


@dataclass
class SynthDataset:
    config: DataConfig
    latents: np.ndarray  # (C, latent_dim), unit rows
    prototypes: np.ndarray  # (C, language_dim)
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


def make_dataset(config: DataConfig = DataConfig()) -> SynthDataset:
    """Class latents ``z_c`` on the unit sphere; vision ``W_v z_c + sigma*noise``,
    language prototype ``W_l z_c``."""
    c = config
    if c.num_classes < 1 or c.train_per_class < 1 or c.test_per_class < 1:
        raise DataError("class and sample counts must be positive")
    latent_rng, proj_rng, noise_rng = Rng(c.seed).spawn(3)
    z = latent_rng.normal((c.num_classes, c.latent_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    w_v = proj_rng.normal((c.vision_dim, c.latent_dim))
    w_l = proj_rng.normal((c.language_dim, c.latent_dim))
    clean = z @ w_v.T
    n = c.train_per_class + c.test_per_class
    labels = np.repeat(np.arange(c.num_classes), n)
    x = clean[labels] + c.sigma * noise_rng.normal((labels.size, c.vision_dim))
    is_train = np.tile(np.arange(n) < c.train_per_class, c.num_classes)
    return SynthDataset(
        config=c,
        latents=z,
        prototypes=z @ w_l.T,
        train_x=x[is_train],
        train_y=labels[is_train],
        test_x=x[~is_train],
        test_y=labels[~is_train],
    )


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def num_train(self) -> int:
        return int(self.train_y.size)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    inc_size: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def seen_classes(self, k: int) -> list[int]:
        """Classes of tasks ``0..k`` inclusive."""
        return [c for t in self.tasks[: k + 1] for c in t.classes]


def build_task_stream(dataset: SynthDataset, inc_size: int, shuffle_seed: Optional[int] = None) -> TaskStream:
    """Split the classes into consecutive disjoint tasks of ``inc_size`` classes.

    Classes are assigned by ascending id unless ``shuffle_seed`` is given.
    """
    C = dataset.num_classes
    if inc_size < 1 or C % inc_size:
        raise DataError(f"inc_size {inc_size} does not divide num_classes {C}")
    order = np.arange(C) if shuffle_seed is None else Rng(shuffle_seed).permutation(C)
    tasks = []
    for i in range(C // inc_size):
        classes = tuple(int(c) for c in order[i * inc_size : (i + 1) * inc_size])
        tr = np.isin(dataset.train_y, classes)
        te = np.isin(dataset.test_y, classes)
        tasks.append(
            Task(
                i,
                classes,
                dataset.train_x[tr].copy(),
                dataset.train_y[tr].copy(),
                dataset.test_x[te].copy(),
                dataset.test_y[te].copy(),
            )
        )
    return TaskStream(tuple(tasks), inc_size)


def batches(task: Task, batch_size: int, rng: Rng) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch over the task's train split; the last batch may be short."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = rng.permutation(task.num_train)
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        yield task.train_x[idx], task.train_y[idx]


def save_dataset(dataset: SynthDataset, path: str | Path) -> None:
    """Flat binary export: fixed header, then little-endian float64 arrays.

    Array order: latents, prototypes, train_x, test_x; labels are implied by
    the class-major layout and are rebuilt on load.
    """
    c = dataset.config
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, c.num_classes, c.latent_dim, c.vision_dim, c.language_dim,
        c.train_per_class, c.test_per_class, c.seed, c.sigma,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (dataset.latents, dataset.prototypes, dataset.train_x, dataset.test_x):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> SynthDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError("truncated dataset file")
    magic, version, C, k, dv, dl, ntr, nte, seed, sigma = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported format version {version}")
    shapes = [(C, k), (C, dl), (C * ntr, dv), (C * nte, dv)]
    expected = _HEADER.size + 8 * sum(a * b for a, b in shapes)
    if len(raw) != expected:
        raise DataError(f"dataset file has {len(raw)} bytes, expected {expected}")
    arrays, off = [], _HEADER.size
    for shape in shapes:
        n = shape[0] * shape[1]
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 8 * n
    cfg = DataConfig(C, k, dv, dl, ntr, nte, sigma, seed)
    return SynthDataset(
        cfg, arrays[0], arrays[1], arrays[2], np.repeat(np.arange(C), ntr), arrays[3], np.repeat(np.arange(C), nte)
    )


def nearest_prototype_accuracy(latents: np.ndarray, samples: np.ndarray, labels: Sequence[int]) -> float:
    """Accuracy of assigning each sample to the most similar latent."""
    pred = np.argmax(np.asarray(samples) @ latents.T, axis=1)
    return float(np.mean(pred == np.asarray(labels)))
