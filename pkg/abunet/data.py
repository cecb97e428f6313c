"""
Module: data
Purpose: CIFAR-10/100 ingestion from the standard binary batch files,
per-image z-transformation, train/validation split, mini-batch iteration
and synthetic Gaussian-blob datasets for runs without CIFAR files.
"""
import logging
import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv

from .constants import (
    CIFAR10_RECORD,
    CIFAR100_RECORD,
    CIFAR_FILES,
    CIFAR_PIXELS,
    DATA_DIR_ENV,
    EVAL_BATCH_SIZE,
    IMAGE_CHANNELS,
    PREFETCH_CAPACITY,
    SPLIT_SEED,
    SYNTHETIC_CLASSES,
    SYNTHETIC_NOISE,
    SYNTHETIC_SEPARATION,
    SYNTHETIC_SIZE,
    SYNTHETIC_TEST_SIZE,
    VALIDATION_FRACTION,
)

logger = logging.getLogger(__name__)

load_dotenv()

TASKS = ("cifar10", "cifar100", "synthetic")


class DataLoadError(Exception):
    """Custom exception for unreadable dataset files."""
    def __init__(self, message: str, path: Optional[Union[str, Path]] = None, offset: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.offset = offset
        where = f" in {self.path}" if self.path else ""
        at = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"Error loading data{where}{at}: {message}")


@dataclass
class Dataset:
    """Images [N,H,W,3] of 8-bit intensities with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise DataLoadError(f"{self.name} is empty")
        if len(self.images) != len(self.labels):
            raise DataLoadError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataLoadError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, name or self.name)


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Optional[Dataset]
    split_seed: int

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def _record_layout(which: str) -> Tuple[int, int, int]:
    """(record length, label byte index, number of classes)."""
    if which == "cifar10":
        return CIFAR10_RECORD, 0, 10
    if which == "cifar100":
        # coarse label first, fine label second
        return CIFAR100_RECORD, 1, 100
    raise DataLoadError(f"Unknown CIFAR variant '{which}'")


def read_cifar_file(path: Union[str, Path], which: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parse one CIFAR binary batch file.

    Args:
        path: Batch file
        which: cifar10 | cifar100

    Returns:
        Tuple of (images [N,32,32,3] uint8, labels [N])
    """
    record, label_index, num_classes = _record_layout(which)
    path = Path(path)
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise DataLoadError(str(e), path)
    if raw.size == 0 or raw.size % record:
        complete = raw.size // record
        raise DataLoadError(f"truncated record (file size {raw.size} is not a multiple of {record})",
                            path, offset=complete * record)
    records = raw.reshape(-1, record)
    labels = records[:, label_index].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DataLoadError(f"label {labels[bad[0]]} >= {num_classes}", path, offset=int(bad[0]) * record + label_index)
    # channel-planar 3x1024 -> [32,32,3]
    images = records[:, record - CIFAR_PIXELS:].reshape(-1, IMAGE_CHANNELS, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_file(path: Union[str, Path], images: np.ndarray, labels: np.ndarray, which: str = "cifar10",
                     coarse_labels: Optional[np.ndarray] = None) -> Path:
    """Write images [N,32,32,3] and labels in the CIFAR binary record layout."""
    record, label_index, _ = _record_layout(which)
    images = np.asarray(images, dtype=np.uint8)
    rows = np.zeros((len(images), record), dtype=np.uint8)
    rows[:, label_index] = labels
    if which == "cifar100" and coarse_labels is not None:
        rows[:, 0] = coarse_labels
    rows[:, record - CIFAR_PIXELS:] = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows.tofile(path)
    return path


def _cifar_dir(data_dir: Union[str, Path], which: str) -> Path:
    base = Path(data_dir)
    nested = base / CIFAR_FILES[which]["subdir"]
    return nested if nested.is_dir() else base


def load_cifar(data_dir: Union[str, Path], which: str, part: str = "train", subset: Optional[int] = None) -> Dataset:
    """
    Load the train or test part of CIFAR-10/100.

    Args:
        data_dir: Directory holding the batch files (or their standard subdirectory)
        which: cifar10 | cifar100
        part: train | test
        subset: Keep only the first `subset` images

    Returns:
        Dataset with fine labels for CIFAR-100
    """
    if which not in CIFAR_FILES:
        raise DataLoadError(f"Unknown CIFAR variant '{which}'")
    layout = CIFAR_FILES[which]
    directory = _cifar_dir(data_dir, which)
    images, labels = [], []
    for filename in layout[part]:
        path = directory / filename
        if not path.is_file():
            raise DataLoadError("missing file", path)
        batch_images, batch_labels = read_cifar_file(path, which)
        images.append(batch_images)
        labels.append(batch_labels)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    logger.info(f"Loaded {which}/{part}: {len(labels)} images from {directory}")
    return Dataset(images, labels, layout["num_classes"], name=f"{which}-{part}")


def z_transform(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    """
    Standardize each image over all of its pixels and channels jointly.

    Works on a single image [H,W,C] or a stack [N,H,W,C]. The divisor is
    max(sigma, 1/sqrt(size)), so constant images map to all zeros.
    """
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(x.ndim - 3, x.ndim))
    size = int(np.prod(x.shape[-3:]))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return ((x - mean) / np.maximum(std, 1.0 / np.sqrt(size))).astype(dtype)


def split(dataset: Dataset, fraction: float = VALIDATION_FRACTION, seed: int = SPLIT_SEED,
          test: Optional[Dataset] = None) -> SplitDataset:
    """Deterministic shuffled split holding out round(fraction * N) images for validation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"Splitting {n} images at {fraction} leaves an empty partition")
    order = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return SplitDataset(
        train=dataset.subset(train_idx, f"{dataset.name}-train"),
        val=dataset.subset(val_idx, f"{dataset.name}-val"),
        test=test,
        split_seed=seed,
    )


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def batches(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    epochs: Optional[int] = None,
    steps: Optional[int] = None,
    dtype=np.float64,
) -> Iterator[Batch]:
    """
    Shuffled training batches of exactly batch_size images.

    The order is reshuffled at the start of every epoch and the short final
    batch is dropped. Iteration stops after `steps` batches or `epochs`
    epochs, whichever comes first; with neither it never stops.
    """
    n = len(dataset)
    if not 0 < batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    per_epoch = steps_per_epoch(n, batch_size)
    produced = 0
    epoch = 0
    while (epochs is None or epoch < epochs) and (steps is None or produced < steps):
        order = rng.permutation(n)
        for b in range(per_epoch):
            if steps is not None and produced >= steps:
                return
            idx = order[b * batch_size:(b + 1) * batch_size]
            yield Batch(z_transform(dataset.images[idx], dtype), dataset.labels[idx])
            produced += 1
        epoch += 1


def iter_eval_batches(dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE, dtype=np.float64) -> Iterator[Batch]:
    """Every image once, in order; the final batch may be short."""
    for start in range(0, len(dataset), batch_size):
        stop = start + batch_size
        yield Batch(z_transform(dataset.images[start:stop], dtype), dataset.labels[start:stop])


def _class_patterns(classes: int, seed: int) -> np.ndarray:
    """One distinct +-1 pattern over (2x2 quadrants, 3 channels) per class."""
    rng = np.random.default_rng(seed)
    codes = rng.choice(2 ** 12, size=classes, replace=False)
    bits = (codes[:, None] >> np.arange(12)) & 1
    return (2.0 * bits - 1.0).reshape(classes, 2, 2, IMAGE_CHANNELS)


def make_synthetic(
    n: int,
    classes: int,
    seed: int,
    image_size: int = 32,
    separation: float = SYNTHETIC_SEPARATION,
    noise: float = SYNTHETIC_NOISE,
    name: str = "synthetic",
    pattern_seed: Optional[int] = None,
) -> Dataset:
    """
    Gaussian-blob images with a class-dependent channel/quadrant pattern.

    An image is 128 + separation*noise*pattern plus N(0, noise^2) pixel noise,
    clipped to 8 bits. Labels are balanced (n // classes per class, the
    remainder spread over the first classes). Datasets sharing a
    pattern_seed (default: seed) share their class patterns.
    """
    if classes < 2 or n < classes:
        raise ValueError(f"Need n >= classes >= 2, got n={n}, classes={classes}")
    if classes > 2 ** 12:
        raise ValueError("At most 4096 distinct synthetic classes are available")
    patterns = _class_patterns(classes, seed if pattern_seed is None else pattern_seed)
    rng = np.random.default_rng([seed, n])
    labels = rng.permutation(np.arange(n) % classes)
    quadrant = (np.arange(image_size) * 2) // image_size
    per_pixel = patterns[:, quadrant][:, :, quadrant]
    images = 128.0 + separation * noise * per_pixel[labels]
    images += rng.normal(0.0, noise, size=images.shape)
    images = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    return Dataset(images, labels, classes, name=name)


def resolve_data_dir(data_dir: Optional[Union[str, Path]] = None) -> Optional[Path]:
    """The --data-dir value if given, else $ABUNET_DATA_DIR (also read from .env)."""
    if data_dir:
        return Path(data_dir)
    env_value = os.getenv(DATA_DIR_ENV)
    return Path(env_value) if env_value else None


def load_task(
    task: str,
    data_dir: Optional[Union[str, Path]] = None,
    subset: Optional[int] = None,
    image_size: int = 32,
    num_classes: Optional[int] = None,
    split_seed: int = SPLIT_SEED,
) -> SplitDataset:
    """
    Load and split the data behind a task name.

    Args:
        task: cifar10 | cifar100 | synthetic
        data_dir: CIFAR directory; falls back to $ABUNET_DATA_DIR
        subset: Use only the first `subset` training images (synthetic: training set size)
        image_size: Image size of synthetic data (CIFAR is always 32)
        num_classes: Class count of synthetic data
        split_seed: Seed of the validation split

    Returns:
        SplitDataset with a test part
    """
    if task == "synthetic":
        classes = num_classes or SYNTHETIC_CLASSES
        train = make_synthetic(subset or SYNTHETIC_SIZE, classes, seed=split_seed, image_size=image_size)
        test = make_synthetic(max(SYNTHETIC_TEST_SIZE, classes), classes, seed=split_seed + 1,
                              image_size=image_size, name="synthetic-test", pattern_seed=split_seed)
        return split(train, seed=split_seed, test=test)
    if task not in CIFAR_FILES:
        raise DataLoadError(f"Unknown task '{task}', expected one of {TASKS}")
    directory = resolve_data_dir(data_dir)
    if directory is None:
        raise DataLoadError(f"No data directory given; pass --data-dir or set {DATA_DIR_ENV}")
    train = load_cifar(directory, task, "train", subset)
    test = load_cifar(directory, task, "test")
    return split(train, seed=split_seed, test=test)


class Prefetcher:
    """
    Runs a batch iterator ahead of the consumer in one background thread.

    The batches come out in exactly the order the wrapped iterator produces
    them; only their assembly time moves. Producer exceptions are re-raised
    in the consumer.
    """
    _DONE = object()

    def __init__(self, source: Iterable, capacity: int = PREFETCH_CAPACITY):
        if capacity < 1:
            raise ValueError("Prefetch capacity must be at least 1")
        self._source = iter(source)
        self._queue: "queue.Queue" = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._finished = False
        self._thread = threading.Thread(target=self._fill, name="abunet-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self) -> None:
        try:
            for item in self._source:
                if not self._put(item):
                    return
        except Exception as e:  # surfaced to the consumer
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self):
        return self

    def __next__(self):
        if self._finished:
            raise StopIteration
        item = self._queue.get()
        if item is self._DONE:
            self._finished = True
            self._stop.set()
            raise StopIteration
        if isinstance(item, Exception):
            self._stop.set()
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
