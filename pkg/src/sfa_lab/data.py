"""Task streams for continual learning.

Covers IDX (MNIST) ingestion, splitting a labelled dataset into tasks by label
group, synthetic Gaussian-blob streams, and the rehearsal buffer.
"""
from __future__ import annotations

import bz2
import gzip
import lzma
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
EVAL_FRACTION = 1.0 / 6.0

_DECOMPRESSORS = {".gz": gzip.decompress, ".gzip": gzip.decompress,
                  ".bz2": bz2.decompress, ".xz": lzma.decompress}


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(len(x), -1) if len(x) else x.reshape(0, 0)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(x) != len(y):
            raise DimensionError(f"{len(x)} input rows but {len(y)} labels")
        if len(y) == 0:
            raise DomainError("a dataset needs at least one example")
        if y.min() < 0 or y.max() >= self.class_count:
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(np.concatenate([p.inputs for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       max(p.class_count for p in parts))


@dataclass(frozen=True)
class Task:
    name: str
    train: Dataset
    eval: Dataset
    label_group: tuple[int, ...]


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    class_count: int

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, k) -> Task:
        return self.tasks[k]

    @property
    def dim(self) -> int:
        return self.tasks[0].train.dim


# -- IDX ---------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    decompress = _DECOMPRESSORS.get(path.suffix.lower())
    return decompress(raw) if decompress else raw


def _parse_idx(buf: bytes, magic: int, ndims: int, what: str) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndims
    if len(buf) < 4:
        raise FormatError(f"{what} file too short for a magic number", len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < header:
        raise FormatError(f"{what} header truncated", len(buf))
    dims = struct.unpack_from(f">{ndims}I", buf, 4)
    need = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < need:
        raise FormatError(f"{what} payload truncated: need {need} bytes, have {len(buf) - header}",
                          len(buf))
    return dims, buf[header:header + need]


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair. Pixels are scaled to [0, 1]."""
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, "image")
    (m,), labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, "label")
    if n != m:
        raise FormatError(f"image count {n} does not match label count {m}", 4)
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    if len(y) and y.max() >= class_count:
        class_count = int(y.max()) + 1
    return Dataset(x, y, class_count)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels as an IDX pair (gzip if suffixed)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        if path.suffix.lower() in (".gz", ".gzip"):
            payload = gzip.compress(payload, mtime=0)
        path.write_bytes(payload)


def bundled_mnist_paths() -> tuple[Path, Path]:
    """Paths of the bundled 5000-image MNIST subset (500 images per digit)."""
    root = resources.files("sfa_lab") / "datasets"
    return (Path(str(root / "mnist5k-images-idx3-ubyte.gz")),
            Path(str(root / "mnist5k-labels-idx1-ubyte.gz")))


def load_bundled_mnist() -> Dataset:
    return load_idx(*bundled_mnist_paths())


# -- streams -------------------------------------------------------------------

def _holdout(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_eval = int(n * EVAL_FRACTION)
    if n_eval == 0:
        # too small to hold anything out; evaluate on the training rows
        return perm, perm
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def split_by_labels(data: Dataset, groups: Sequence[Sequence[int]], seed: int = 0,
                    names: Sequence[str] | None = None) -> TaskStream:
    """One task per label group, sharing the global label space.

    Each task's rows are split into train and a 1/6 eval holdout by a seeded
    shuffle.
    """
    groups = [tuple(sorted(set(int(c) for c in g))) for g in groups]
    seen: set[int] = set()
    for g in groups:
        if not g:
            raise DomainError("label groups must be non-empty")
        overlap = seen.intersection(g)
        if overlap:
            raise DomainError(f"label groups overlap on {sorted(overlap)}")
        if min(g) < 0 or max(g) >= data.class_count:
            raise DomainError(f"label group {g} outside [0, {data.class_count})")
        seen.update(g)

    rng = np.random.default_rng(seed)
    tasks = []
    for k, g in enumerate(groups):
        rows = np.flatnonzero(np.isin(data.labels, g))
        if len(rows) == 0:
            raise DomainError(f"no examples carry labels {g}")
        tr, ev = _holdout(len(rows), rng)
        name = names[k] if names else "task" + "".join(map(str, g)) if len(g) <= 5 else f"task{k}"
        tasks.append(Task(name, data.take(rows[tr]), data.take(rows[ev]), g))
    return TaskStream(tuple(tasks), data.class_count)


EVEN_ODD = ((0, 2, 4, 6, 8), (1, 3, 5, 7, 9))


def split_mnist_even_odd(data: Dataset | None = None, seed: int = 0) -> TaskStream:
    """Task A: even digits, task B: odd digits."""
    data = load_bundled_mnist() if data is None else data
    return split_by_labels(data, EVEN_ODD, seed=seed, names=("A_even", "B_odd"))


def synthetic_gaussian_tasks(seed: int, num_tasks: int, classes_per_task: int, dim: int,
                             n_per_class: int, separation: float = 50.0) -> TaskStream:
    """Unit-variance Gaussian blobs with means uniform in ``[0, separation]^dim``."""
    if min(num_tasks, classes_per_task, dim, n_per_class) <= 0:
        raise DomainError("synthetic stream sizes must be positive")
    rng = np.random.default_rng(seed)
    n_classes = num_tasks * classes_per_task
    means = rng.uniform(0.0, separation, size=(n_classes, dim))
    tasks = []
    for k in range(num_tasks):
        group = tuple(range(k * classes_per_task, (k + 1) * classes_per_task))
        x = np.concatenate([means[c] + rng.standard_normal((n_per_class, dim)) for c in group])
        y = np.repeat(np.asarray(group), n_per_class)
        full = Dataset(x, y, n_classes)
        tr, ev = _holdout(len(full), rng)
        tasks.append(Task(f"task{k}", full.take(tr), full.take(ev), group))
    return TaskStream(tuple(tasks), n_classes)


# -- rehearsal -----------------------------------------------------------------

@dataclass(frozen=True)
class RehearsalBuffer:
    """Per-task samples of already finished tasks."""
    retention_seed: int = 0
    store: tuple[Dataset, ...] = field(default_factory=tuple)

    def __len__(self):
        return sum(len(d) for d in self.store)

    def pooled(self) -> Dataset:
        return Dataset.concat(self.store)


def buffer_update(buffer: RehearsalBuffer, finished_task: Dataset, per_task_cap: int) -> RehearsalBuffer:
    if per_task_cap < 0:
        raise DomainError(f"per_task_cap must be non-negative, got {per_task_cap}")
    if per_task_cap == 0:
        return buffer
    n = len(finished_task)
    if per_task_cap >= n:
        kept = finished_task
    else:
        rng = np.random.default_rng([buffer.retention_seed, len(buffer.store)])
        kept = finished_task.take(np.sort(rng.choice(n, size=per_task_cap, replace=False)))
    return RehearsalBuffer(buffer.retention_seed, buffer.store + (kept,))


def past_count(n_current: int, past_fraction: float) -> int:
    """Number of buffered rows so that they make up ``past_fraction`` of the mix."""
    # guard against 950 / 0.95 landing a hair under the integer
    return int(math.floor(n_current * past_fraction / (1.0 - past_fraction) + 1e-9))


def mix_with_buffer(current: Dataset, buffer: RehearsalBuffer, past_fraction: float,
                    seed: int = 0) -> Dataset:
    """All current rows plus a ``past_fraction`` share of buffered rows, shuffled."""
    if not 0.0 <= past_fraction < 1.0:
        raise DomainError(f"past_fraction must lie in [0, 1), got {past_fraction}")
    rng = np.random.default_rng(seed)
    n_past = past_count(len(current), past_fraction)
    if past_fraction > 0 and len(buffer) == 0:
        raise DomainError("rehearsal needs a non-empty buffer when past_fraction > 0")
    if n_past == 0:
        return current.take(rng.permutation(len(current)))
    pool = buffer.pooled()
    pick = rng.choice(len(pool), size=n_past, replace=n_past > len(pool))
    mixed = Dataset.concat([current, pool.take(pick)])
    return mixed.take(rng.permutation(len(mixed)))
