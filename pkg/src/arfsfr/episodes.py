"""Datasets, a synthetic fine-grained image generator and N-way K-shot sampling.

Random streams are keyed by ``(seed, stream, index)`` through numpy's
``SeedSequence``, so any episode can be regenerated on its own and
independent workloads (training, validation, testing) never share draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, EpisodeError, FormatError
from .io import load_tensor, save_tensor

STREAM_TRAIN = 1
STREAM_VAL = 2
STREAM_TEST = 3
SPLITS = ("train", "val", "test")


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Generator for draw ``index`` of stream ``stream`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


@dataclass
class ClassRecord:
    label: int
    samples: np.ndarray  # [n, C, H, W]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Dataset:
    classes: List[ClassRecord]
    split: str = "all"

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> List[int]:
        return [c.label for c in self.classes]

    @property
    def image_shape(self) -> tuple:
        return self.classes[0].samples.shape[1:]

    def __len__(self) -> int:
        return sum(len(c) for c in self.classes)

    def stacked(self) -> tuple:
        """All samples as ``(images [n, C, H, W], labels [n], offsets)``.

        ``offsets[i]`` is the row of the first sample of ``classes[i]``.
        """
        images = np.concatenate([c.samples for c in self.classes], axis=0)
        labels = np.concatenate([np.full(len(c), c.label) for c in self.classes])
        offsets = np.cumsum([0] + [len(c) for c in self.classes[:-1]])
        return images, labels, offsets

    def subset(self, class_positions: Sequence[int], split: str) -> "Dataset":
        return Dataset([self.classes[i] for i in class_positions], split)


@dataclass
class Episode:
    """One N-way K-shot task; labels are episode-relative (0..N-1)."""

    way: int
    shot: int
    support: np.ndarray         # [N*K, C, H, W], class-major
    support_labels: np.ndarray  # [N*K]
    query: np.ndarray           # [N*Q, C, H, W]
    query_labels: np.ndarray    # [N*Q]
    class_ids: np.ndarray       # [N] dataset labels of the sampled classes
    support_index: np.ndarray = field(repr=False, default=None)  # [N, K] (class position, sample) rows
    query_index: np.ndarray = field(repr=False, default=None)

    @property
    def query_per_class(self) -> int:
        return len(self.query_labels) // self.way


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 50
    samples_per_class: int = 40
    image_size: int = 32
    channels: int = 3
    difficulty: float = 0.5


def _class_traits(rng: np.random.Generator, channels: int) -> dict:
    base = np.array([0.55, 0.45, 0.35])[:channels] if channels <= 3 else np.full(channels, 0.5)
    return dict(
        color=np.clip(base + rng.uniform(-0.15, 0.15, channels), 0.05, 0.95),
        stripe_freq=rng.uniform(1.5, 6.0),
        stripe_angle=rng.uniform(0.0, np.pi),
        stripe_depth=rng.uniform(0.2, 0.6),
        spots=rng.uniform(-0.55, 0.55, size=(int(rng.integers(0, 7)), 2)),
        spot_radius=rng.uniform(0.07, 0.14),
        part_angle=rng.uniform(0.0, 2 * np.pi),
        part_radius=rng.uniform(0.12, 0.24),
        aspect=rng.uniform(0.45, 0.65),
    )


def _render(traits: dict, size: int, channels: int, difficulty: float, rng: np.random.Generator) -> np.ndarray:
    d = float(difficulty)
    angle = d * rng.uniform(-np.pi / 6, np.pi / 6)
    shift = d * rng.uniform(-0.15, 0.15, size=2)
    brightness = d * rng.uniform(-0.12, 0.12)
    contrast = 1.0 + d * rng.uniform(-0.2, 0.2)
    jitter = d * rng.normal(0.0, 0.04, size=traits["spots"].shape)
    noise = d * 0.06 * rng.standard_normal((channels, size, size))

    coords = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    xs, ys = xx - shift[0], yy - shift[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * xs + sa * ys
    v = -sa * xs + ca * ys

    a, b = 0.72, 0.72 * traits["aspect"]
    body = ((u / a) ** 2 + (v / b) ** 2) <= 1.0
    pa = traits["part_angle"]
    px, py = 1.02 * a * np.cos(pa), 1.02 * b * np.sin(pa)
    part = (u - px) ** 2 + (v - py) ** 2 <= traits["part_radius"] ** 2

    t = traits["stripe_angle"]
    stripe = 0.5 + 0.5 * np.cos(2 * np.pi * traits["stripe_freq"] * (u * np.cos(t) + v * np.sin(t)) / 2.0)
    shade = 1.0 - traits["stripe_depth"] * stripe
    spots = np.zeros_like(u, dtype=bool)
    for (sx, sy), (jx, jy) in zip(traits["spots"], jitter):
        spots |= (u - sx * a - jx) ** 2 + (v - sy * b - jy) ** 2 <= traits["spot_radius"] ** 2

    img = np.full((channels, size, size), 0.5)
    color = traits["color"][:, None, None]
    img = np.where(body[None], color * shade[None], img)
    img = np.where((body & spots)[None], 0.15 * color, img)
    img = np.where((part & ~body)[None], 1.0 - color, img)
    img = (img - 0.5) * contrast + 0.5 + brightness + noise
    return img


def generate_synthetic_dataset(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> Dataset:
    """Textured-shape classes sharing one body plan.

    Classes differ in stripe frequency/orientation, spot layout, colour
    tint and the position of a small attached part; samples of a class vary
    by rotation, shift, brightness, contrast and pixel noise, all scaled by
    ``difficulty`` (0 makes every sample of a class identical).
    """
    if spec.num_classes < 2:
        raise ConfigurationError("a dataset needs at least 2 classes")
    if spec.samples_per_class < 1 or spec.image_size < 1 or spec.channels < 1:
        raise ConfigurationError("samples_per_class, image_size and channels must be positive")
    if spec.difficulty < 0:
        raise ConfigurationError("difficulty must be >= 0")
    classes = []
    for label in range(spec.num_classes):
        traits = _class_traits(stream_rng(seed, 1000 + label), spec.channels)
        samples = np.stack([
            _render(traits, spec.image_size, spec.channels, spec.difficulty,
                    stream_rng(seed, 100000 + label, i))
            for i in range(spec.samples_per_class)
        ]).astype(np.float32)
        classes.append(ClassRecord(label, samples))
    return Dataset(classes, "all")


def split_classes(dataset: Dataset, n_train: int, n_val: int, n_test: int) -> Dict[str, Dataset]:
    """Class-disjoint train/val/test split in label order."""
    if n_train + n_val + n_test > dataset.num_classes:
        raise ConfigurationError(
            f"split needs {n_train + n_val + n_test} classes, dataset has {dataset.num_classes}")
    bounds = np.cumsum([0, n_train, n_val, n_test])
    return {name: dataset.subset(range(bounds[i], bounds[i + 1]), name) for i, name in enumerate(SPLITS)}


def generate_splits(n_train: int = 30, n_val: int = 10, n_test: int = 10, samples_per_class: int = 40,
                    image_size: int = 32, channels: int = 3, difficulty: float = 0.5,
                    seed: int = 7) -> Dict[str, Dataset]:
    spec = SyntheticSpec(n_train + n_val + n_test, samples_per_class, image_size, channels, difficulty)
    return split_classes(generate_synthetic_dataset(spec, seed), n_train, n_val, n_test)


def sample_episode(dataset: Dataset, way: int, shot: int, query_per_class: int,
                   rng: np.random.Generator) -> Episode:
    """Uniform classes without replacement, then disjoint support/query samples per class."""
    if way < 1 or shot < 1 or query_per_class < 0:
        raise EpisodeError("way and shot must be >= 1 and query_per_class >= 0")
    if dataset.num_classes < way:
        raise EpisodeError(f"{way}-way episode needs {way} classes; {dataset.split} split has "
                           f"{dataset.num_classes} ({way - dataset.num_classes} short)")
    need = shot + query_per_class
    positions = rng.choice(dataset.num_classes, size=way, replace=False)
    chosen = np.empty((way, need), dtype=np.int64)
    for r, pos in enumerate(positions):
        n = len(dataset.classes[pos])
        if n < need:
            raise EpisodeError(f"class {dataset.classes[pos].label} has {n} samples, episode needs {need} "
                               f"({need - n} short)")
        chosen[r] = rng.choice(n, size=need, replace=False)

    support = np.stack([dataset.classes[p].samples[chosen[r, :shot]] for r, p in enumerate(positions)])
    query = np.stack([dataset.classes[p].samples[chosen[r, shot:]] for r, p in enumerate(positions)])
    image_shape = dataset.image_shape
    return Episode(
        way=way, shot=shot,
        support=support.reshape((way * shot,) + image_shape),
        support_labels=np.repeat(np.arange(way), shot),
        query=query.reshape((way * query_per_class,) + image_shape),
        query_labels=np.repeat(np.arange(way), query_per_class),
        class_ids=np.array([dataset.classes[p].label for p in positions]),
        support_index=np.stack([np.stack([np.full(shot, p), chosen[r, :shot]], -1)
                                for r, p in enumerate(positions)]),
        query_index=np.stack([np.stack([np.full(query_per_class, p), chosen[r, shot:]], -1)
                              for r, p in enumerate(positions)]),
    )


class EpisodeStream:
    """Reproducible, index-addressable sequence of episodes."""

    def __init__(self, dataset: Dataset, way: int, shot: int, query_per_class: int, seed: int, stream: int):
        self.dataset = dataset
        self.way, self.shot, self.query_per_class = way, shot, query_per_class
        self.seed, self.stream = seed, stream

    def episode(self, index: int) -> Episode:
        return sample_episode(self.dataset, self.way, self.shot, self.query_per_class,
                              stream_rng(self.seed, self.stream, index))

    def take(self, count: int, start: int = 0) -> Iterator[Episode]:
        for i in range(start, start + count):
            yield self.episode(i)


# -- on-disk layout --------------------------------------------------------
def save_dataset(splits: Dict[str, Dataset], directory) -> None:
    """Write ``manifest.txt`` plus one ARFT file per sample."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for split in SPLITS:
        if split not in splits:
            continue
        for record in splits[split].classes:
            folder = root / split / f"c{record.label:04d}"
            folder.mkdir(parents=True, exist_ok=True)
            for i, sample in enumerate(record.samples):
                rel = f"{split}/c{record.label:04d}/s{i:04d}.arft"
                save_tensor(root / rel, np.ascontiguousarray(sample))
                lines.append(f"{record.label}\t{split}\t{rel}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(directory) -> Dict[str, Dataset]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{manifest} not found")
    grouped: Dict[str, Dict[int, list]] = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"manifest line {lineno}: expected class_id<TAB>split<TAB>path")
        label, split, rel = int(parts[0]), parts[1], parts[2]
        grouped.setdefault(split, {}).setdefault(label, []).append(load_tensor(root / rel))
    out = {}
    for split, by_label in grouped.items():
        out[split] = Dataset([ClassRecord(label, np.stack(samples)) for label, samples in by_label.items()], split)
    seen: Dict[int, str] = {}
    for split, ds in out.items():
        for label in ds.labels:
            if label in seen:
                raise FormatError(f"class {label} appears in both {seen[label]} and {split}")
            seen[label] = split
    return out
