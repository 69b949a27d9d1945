"""Class pools, few-shot episodes and task sequences."""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

MIN_SAMPLES_PER_CLASS = 2


class EpisodeError(ValueError):
    """Raised when an episode or task sequence cannot be sampled."""


class PoolLoadError(EpisodeError):
    """Raised when a class pool cannot be loaded from disk."""


class Regime(str, Enum):
    """How classes are chosen for the tasks of one sequence."""

    SAME_CLASSES = "same_classes"
    SINGLE_DOMAIN = "single_domain"
    MULTI_DOMAIN = "multi_domain"


@dataclass(frozen=True, eq=False)
class ClassRecord:
    class_id: str
    samples: np.ndarray  # [n, H, W, C] float32 in [0, 1]


@dataclass(frozen=True, eq=False)
class ClassPool:
    """Immutable set of classes from one domain.

    ``norm`` holds an optional (mean, std) applied when episodes are sampled;
    stored samples always stay in [0, 1].
    """

    classes: Tuple[ClassRecord, ...]
    domain_id: str
    norm: Optional[Tuple[float, float]] = None

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.classes[0].samples.shape[1:])

    def index_of(self, class_id: str) -> int:
        for index, record in enumerate(self.classes):
            if record.class_id == class_id:
                return index
        raise EpisodeError(f"Class {class_id} not in pool {self.domain_id}")

    def prepare(self, images: np.ndarray) -> np.ndarray:
        if self.norm is None:
            return images
        mean, std = self.norm
        return ((images - mean) / std).astype(np.float32)


class LabeledBatch(NamedTuple):
    images: torch.Tensor  # [n, H, W, C]
    labels: torch.Tensor  # [n] int64


@dataclass(frozen=True, eq=False)
class Episode:
    """One K-way N-shot support set with its query set.

    Samples are grouped by label; ``support_index`` and ``query_index`` record the
    (class_id, sample index) each row was drawn from.
    """

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: Tuple[str, ...]  # label -> class_id
    domain_id: str
    support_index: Tuple[Tuple[str, int], ...] = ()
    query_index: Tuple[Tuple[str, int], ...] = ()

    @property
    def way(self) -> int:
        return len(self.class_map)

    @property
    def support(self) -> LabeledBatch:
        return LabeledBatch(torch.from_numpy(self.support_images), torch.from_numpy(self.support_labels))

    @property
    def query(self) -> LabeledBatch:
        return LabeledBatch(torch.from_numpy(self.query_images), torch.from_numpy(self.query_labels))


@dataclass(frozen=True, eq=False)
class TaskSequence:
    tasks: Tuple[Episode, ...]
    regime: Regime

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, index: int) -> Episode:
        return self.tasks[index]


def _validate_pool(classes: Sequence[ClassRecord], domain_id: str, min_samples: int) -> None:
    if not classes:
        raise PoolLoadError(f"Pool {domain_id} has no classes")
    shape = classes[0].samples.shape[1:]
    for record in classes:
        if record.samples.shape[0] < min_samples:
            raise PoolLoadError(
                f"Class {record.class_id} in {domain_id} has {record.samples.shape[0]} samples, "
                f"need at least {min_samples}"
            )
        if record.samples.shape[1:] != shape:
            raise PoolLoadError(
                f"Class {record.class_id} in {domain_id} has images of shape "
                f"{record.samples.shape[1:]}, expected {shape}"
            )


def _to_unit_range(array: np.ndarray, source: Path) -> np.ndarray:
    if array.dtype == np.uint8:
        return array.astype(np.float32) / 255.0
    array = array.astype(np.float32)
    if array.size and (array.min() < 0.0 or array.max() > 1.0):
        raise PoolLoadError(f"{source} holds float values outside [0, 1]")
    return array


def _read_png(path: Path, image_size: Optional[Tuple[int, int, int]]) -> np.ndarray:
    with Image.open(path) as image:
        channels = image_size[2] if image_size else (1 if image.mode in ("L", "1", "I", "F") else 3)
        image = image.convert("L" if channels == 1 else "RGB")
        if image_size and image.size != (image_size[1], image_size[0]):
            image = image.resize((image_size[1], image_size[0]), Image.BILINEAR)
        array = np.asarray(image, dtype=np.uint8)
    if array.ndim == 2:
        array = array[:, :, None]
    return array.astype(np.float32) / 255.0


def load_pool(
    root: Path,
    fmt: str = "png",
    image_size: Optional[Tuple[int, int, int]] = None,
    normalize: bool = True,
    min_samples: int = MIN_SAMPLES_PER_CLASS,
) -> ClassPool:
    """Load a class pool from disk.

    Layouts: ``<root>/<class_id>/<sample>.png`` or ``<root>/<class_id>.npy``
    holding an array [n, H, W, C].

    Args:
        root: Pool directory
        fmt: "png" or "npy"
        image_size: Optional H x W x C; PNG images are resized to it
        normalize: Attach per-pool mean/std normalization
        min_samples: Minimum samples per class

    Returns:
        Validated pool with classes in lexicographic order of class_id
    """
    root = Path(root)
    if not root.is_dir():
        raise PoolLoadError(f"Pool directory not found: {root}")

    classes = []
    if fmt == "png":
        for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(class_dir.glob("*.png"))
            images = [_read_png(path, image_size) for path in files]
            shapes = {image.shape for image in images}
            if len(shapes) > 1:
                raise PoolLoadError(f"Class {class_dir.name} mixes image shapes {sorted(shapes)}")
            samples = np.stack(images) if images else np.zeros((0, 1, 1, 1), np.float32)
            classes.append(ClassRecord(class_dir.name, samples))
    elif fmt == "npy":
        for path in sorted(root.glob("*.npy")):
            array = np.load(path)
            if array.ndim == 3:
                array = array[..., None]
            if array.ndim != 4:
                raise PoolLoadError(f"{path} must hold [n, H, W, C], got shape {array.shape}")
            classes.append(ClassRecord(path.stem, _to_unit_range(array, path)))
    else:
        raise PoolLoadError(f"Unknown pool format: {fmt}")

    _validate_pool(classes, root.name, min_samples)
    if image_size and tuple(classes[0].samples.shape[1:]) != tuple(image_size):
        raise PoolLoadError(f"Pool {root} has images {classes[0].samples.shape[1:]}, configured {tuple(image_size)}")
    pool = ClassPool(tuple(classes), domain_id=root.name)
    if normalize:
        pool = replace(pool, norm=pool_statistics(pool))
    logger.info(f"Loaded pool {pool.domain_id}: {pool.num_classes} classes, images {pool.image_shape}")
    return pool


def pool_statistics(pool: ClassPool) -> Tuple[float, float]:
    """Mean and standard deviation over every pixel of the pool."""
    values = np.concatenate([record.samples.reshape(-1) for record in pool.classes])
    std = float(values.std())
    return float(values.mean()), std if std > 0 else 1.0


def _template(kind: str, index: int, shape: Tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    height, width, channels = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    angle = rng.uniform(0, np.pi)
    frequency = rng.uniform(2.0, 6.0)
    if kind == "blob":
        radius = rng.uniform(0.1, 0.25)
        base = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
        base += 0.5 * (np.sin(2 * np.pi * frequency * (np.cos(angle) * xx + np.sin(angle) * yy)) > 0.6)
    elif kind == "stripe":
        base = 0.5 + 0.5 * np.sin(2 * np.pi * frequency * (np.cos(angle) * xx + np.sin(angle) * yy) + index)
    elif kind == "checker":
        cells = int(rng.integers(2, 6))
        base = ((np.floor(yy * cells + cy * 3) + np.floor(xx * cells + cx * 3)) % 2).astype(float)
        base *= 0.5 + 0.5 * np.cos(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)))
    else:  # ring
        distance = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        base = 0.5 + 0.5 * np.cos(2 * np.pi * frequency * distance)
    tint = rng.uniform(0.5, 1.0, size=channels)
    return np.clip(base[:, :, None] * tint, 0.0, 1.0)


TEMPLATE_FAMILIES = ("blob", "stripe", "checker", "ring")


def make_synthetic_pool(
    num_classes: int,
    samples_per_class: int,
    image_shape: Tuple[int, int, int] = (28, 28, 1),
    seed: int = 0,
    family: str = "blob",
    noise: float = 0.1,
    domain_id: Optional[str] = None,
) -> ClassPool:
    """Build a deterministic pool of separable pattern classes.

    Each class is a random template of the given family; samples are the
    template shifted by up to one pixel plus Gaussian noise, clipped to [0, 1].

    Args:
        num_classes: Number of classes (>= 1)
        samples_per_class: Samples per class (>= 2)
        image_shape: H x W x C
        seed: Seed of the pool
        family: Template family (blob, stripe, checker, ring)
        noise: Per-pixel noise standard deviation
        domain_id: Pool name, defaults to ``synthetic-<family>-<seed>``

    Returns:
        The pool
    """
    if num_classes < 1:
        raise EpisodeError("num_classes must be >= 1")
    if samples_per_class < MIN_SAMPLES_PER_CLASS:
        raise EpisodeError(f"samples_per_class must be >= {MIN_SAMPLES_PER_CLASS}")
    if len(image_shape) != 3 or min(image_shape) < 1:
        raise EpisodeError(f"image_shape must be H x W x C, got {image_shape}")
    if family not in TEMPLATE_FAMILIES:
        raise EpisodeError(f"Unknown template family {family}")

    rng = np.random.default_rng(seed)
    classes = []
    for index in range(num_classes):
        template = _template(family, index, tuple(image_shape), rng)
        shifts = rng.integers(-1, 2, size=(samples_per_class, 2))
        samples = np.stack([np.roll(template, tuple(shift), axis=(0, 1)) for shift in shifts])
        samples = samples + rng.normal(0.0, noise, size=samples.shape)
        classes.append(ClassRecord(f"c{index:04d}", np.clip(samples, 0.0, 1.0).astype(np.float32)))
    return ClassPool(tuple(classes), domain_id=domain_id or f"synthetic-{family}-{seed}")


def make_multi_domain_pools(
    num_domains: int,
    num_classes: int,
    samples_per_class: int,
    image_shape: Tuple[int, int, int] = (28, 28, 1),
    seed: int = 0,
) -> List[ClassPool]:
    """Pools whose template family differs per domain (blob, stripe, checker, ring, ...)."""
    return [
        make_synthetic_pool(
            num_classes,
            samples_per_class,
            image_shape,
            seed=seed + domain,
            family=TEMPLATE_FAMILIES[domain % len(TEMPLATE_FAMILIES)],
            domain_id=f"domain{domain}",
        )
        for domain in range(num_domains)
    ]


def split_pool(pool: ClassPool, ratio: float = 0.8, seed: int = 0) -> Tuple[ClassPool, ClassPool]:
    """Class-disjoint train/test split.

    Args:
        pool: Pool to split
        ratio: Fraction of classes for training
        seed: Split seed

    Returns:
        Tuple of (train pool, test pool), each keeping lexicographic class order
    """
    if pool.num_classes < 2:
        raise EpisodeError(f"Pool {pool.domain_id} needs >= 2 classes to split")
    order = np.random.default_rng(seed).permutation(pool.num_classes)
    cut = min(max(int(round(ratio * pool.num_classes)), 1), pool.num_classes - 1)
    train_ids, test_ids = sorted(order[:cut]), sorted(order[cut:])
    return (
        replace(pool, classes=tuple(pool.classes[i] for i in train_ids)),
        replace(pool, classes=tuple(pool.classes[i] for i in test_ids)),
    )


def _build_episode(
    pool: ClassPool,
    class_indices: Sequence[int],
    support_rows: Sequence[Sequence[int]],
    query_rows: Sequence[Sequence[int]],
) -> Episode:
    support_images, support_labels, query_images, query_labels = [], [], [], []
    support_index, query_index = [], []
    for label, (class_index, s_rows, q_rows) in enumerate(zip(class_indices, support_rows, query_rows)):
        record = pool.classes[class_index]
        support_images.append(record.samples[list(s_rows)])
        query_images.append(record.samples[list(q_rows)])
        support_labels += [label] * len(s_rows)
        query_labels += [label] * len(q_rows)
        support_index += [(record.class_id, int(row)) for row in s_rows]
        query_index += [(record.class_id, int(row)) for row in q_rows]
    return Episode(
        support_images=pool.prepare(np.concatenate(support_images)),
        support_labels=np.asarray(support_labels, dtype=np.int64),
        query_images=pool.prepare(np.concatenate(query_images)),
        query_labels=np.asarray(query_labels, dtype=np.int64),
        class_map=tuple(pool.classes[i].class_id for i in class_indices),
        domain_id=pool.domain_id,
        support_index=tuple(support_index),
        query_index=tuple(query_index),
    )


def _check_samples(pool: ClassPool, class_indices: Sequence[int], needed: int) -> None:
    for class_index in class_indices:
        record = pool.classes[class_index]
        if record.samples.shape[0] < needed:
            raise EpisodeError(
                f"Class {record.class_id} in {pool.domain_id} has {record.samples.shape[0]} samples, "
                f"episode needs {needed}"
            )


def _draw_rows(pool: ClassPool, class_indices: Sequence[int], N: int, N_query: int, rng: np.random.Generator):
    support_rows, query_rows = [], []
    for class_index in class_indices:
        rows = rng.permutation(pool.classes[class_index].samples.shape[0])
        support_rows.append(rows[:N])
        query_rows.append(rows[N:N + N_query])
    return support_rows, query_rows


def sample_episode(pool: ClassPool, K: int, N: int, N_query: int, rng: np.random.Generator) -> Episode:
    """Sample a K-way N-shot episode with N_query query samples per class.

    Classes are drawn without replacement and their random draw order is the
    label assignment, so labels are a fresh permutation every episode.
    """
    if K < 1 or N < 1 or N_query < 1:
        raise EpisodeError(f"K, N and N_query must be >= 1, got {K}, {N}, {N_query}")
    if pool.num_classes < K:
        raise EpisodeError(f"Pool {pool.domain_id} has {pool.num_classes} classes, episode needs {K}")
    class_indices = [int(i) for i in rng.choice(pool.num_classes, size=K, replace=False)]
    _check_samples(pool, class_indices, N + N_query)
    support_rows, query_rows = _draw_rows(pool, class_indices, N, N_query, rng)
    return _build_episode(pool, class_indices, support_rows, query_rows)


def resample_episode(pool: ClassPool, episode: Episode, N: int, N_query: int, rng: np.random.Generator) -> Episode:
    """Redraw the samples of an episode, keeping its classes and labels."""
    class_indices = [pool.index_of(class_id) for class_id in episode.class_map]
    _check_samples(pool, class_indices, N + N_query)
    support_rows, query_rows = _draw_rows(pool, class_indices, N, N_query, rng)
    return _build_episode(pool, class_indices, support_rows, query_rows)


def _same_classes_sequence(
    pool: ClassPool, T: int, K: int, N: int, N_query: int, rng: np.random.Generator
) -> List[Episode]:
    if pool.num_classes < K:
        raise EpisodeError(f"Pool {pool.domain_id} has {pool.num_classes} classes, episode needs {K}")
    class_indices = [int(i) for i in rng.choice(pool.num_classes, size=K, replace=False)]
    _check_samples(pool, class_indices, N + N_query)
    smallest = min(pool.classes[i].samples.shape[0] for i in class_indices)
    if smallest < T * N + N_query:
        logger.warning(
            f"Pool {pool.domain_id} has only {smallest} samples per class; "
            f"support batches of the {T} tasks may repeat samples"
        )
        tasks = []
        for _ in range(T):
            support_rows, query_rows = _draw_rows(pool, class_indices, N, N_query, rng)
            tasks.append(_build_episode(pool, class_indices, support_rows, query_rows))
        return tasks

    per_task_support = [[] for _ in range(T)]
    per_task_query = [[] for _ in range(T)]
    for class_index in class_indices:
        rows = rng.permutation(pool.classes[class_index].samples.shape[0])
        remainder = rows[T * N:]
        for t in range(T):
            per_task_support[t].append(rows[t * N:(t + 1) * N])
            per_task_query[t].append(rng.choice(remainder, size=N_query, replace=False))
    return [_build_episode(pool, class_indices, per_task_support[t], per_task_query[t]) for t in range(T)]


def sample_task_sequence(
    pools: Sequence[ClassPool],
    T: int,
    regime: Regime,
    K: int,
    N: int,
    N_query: int,
    rng: np.random.Generator,
) -> TaskSequence:
    """Sample T episodes under one of the class-selection regimes.

    Args:
        pools: Candidate pools; same_classes and single_domain pick one pool per
            sequence, multi_domain picks one pool per episode
        T: Number of tasks
        regime: Class-selection regime
        K: Classes per task
        N: Support samples per class
        N_query: Query samples per class
        rng: Random generator

    Returns:
        The task sequence
    """
    if not pools:
        raise EpisodeError("At least one pool is required")
    if T < 1:
        raise EpisodeError(f"T must be >= 1, got {T}")
    regime = Regime(regime)

    if regime is Regime.MULTI_DOMAIN:
        if len(pools) < 2:
            logger.warning("multi_domain regime with a single pool behaves like single_domain")
        tasks = [sample_episode(pools[int(rng.integers(len(pools)))], K, N, N_query, rng) for _ in range(T)]
    else:
        pool = pools[int(rng.integers(len(pools)))] if len(pools) > 1 else pools[0]
        if regime is Regime.SAME_CLASSES:
            tasks = _same_classes_sequence(pool, T, K, N, N_query, rng)
        else:
            tasks = [sample_episode(pool, K, N, N_query, rng) for _ in range(T)]
    return TaskSequence(tuple(tasks), regime)


def resample_task_sequence(
    pools: Sequence[ClassPool],
    sequence: TaskSequence,
    N: int,
    N_query: int,
    rng: np.random.Generator,
) -> TaskSequence:
    """Redraw every episode's samples, holding classes and labels fixed."""
    by_domain = {pool.domain_id: pool for pool in pools}
    tasks = tuple(resample_episode(by_domain[task.domain_id], task, N, N_query, rng) for task in sequence)
    return TaskSequence(tasks, sequence.regime)


def merge_episodes(episodes: Sequence[Episode]) -> Episode:
    """Concatenate episodes into one, offsetting labels of episode τ by the ways before it."""
    if not episodes:
        raise EpisodeError("Nothing to merge")
    offsets = np.cumsum([0] + [episode.way for episode in episodes[:-1]])
    return Episode(
        support_images=np.concatenate([e.support_images for e in episodes]),
        support_labels=np.concatenate([e.support_labels + o for e, o in zip(episodes, offsets)]),
        query_images=np.concatenate([e.query_images for e in episodes]),
        query_labels=np.concatenate([e.query_labels + o for e, o in zip(episodes, offsets)]),
        class_map=tuple(c for e in episodes for c in e.class_map),
        domain_id="+".join(sorted({e.domain_id for e in episodes})),
        support_index=tuple(i for e in episodes for i in e.support_index),
        query_index=tuple(i for e in episodes for i in e.query_index),
    )
