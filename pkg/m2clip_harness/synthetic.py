"""Rendered toy action clips: squares that stay, move, grow, shrink or flash."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from m2clip.encoders import VideoClip
from m2clip.exceptions import ConfigurationError, ContractError, FormatError
from m2clip.tokenizer import normalize

logger = logging.getLogger(__name__)

APPEARANCES = ("bright", "dark", "striped")
DYNAMICS = (
    "staying still",
    "moving left",
    "moving right",
    "moving up",
    "moving down",
    "growing",
    "shrinking",
    "flashing",
)

SPLITS = ("train", "val", "zeroshot_holdout")
_SPLIT_CODES = {"train": 0, "val": 1, "zeroshot_holdout": 2}

# Training pool mixes all three families; holdout recombines seen words.
TRAIN_POOL: Tuple[Tuple[str, str], ...] = (
    ("bright", "staying still"),
    ("dark", "staying still"),
    ("bright", "moving left"),
    ("bright", "moving right"),
    ("dark", "moving up"),
    ("dark", "moving down"),
    ("bright", "growing"),
    ("dark", "flashing"),
    ("striped", "staying still"),
    ("striped", "moving right"),
    ("dark", "shrinking"),
    ("bright", "flashing"),
)
HOLDOUT_POOL: Tuple[Tuple[str, str], ...] = (
    ("dark", "moving left"),
    ("dark", "moving right"),
    ("bright", "moving up"),
    ("dark", "growing"),
    ("bright", "moving down"),
    ("striped", "moving left"),
    ("bright", "shrinking"),
    ("striped", "flashing"),
)

SQUARE_LEVEL = 1.5
CHANNEL_GAIN = np.array([1.0, 0.85, 0.7])


@dataclass(frozen=True)
class ClassSpec:
    appearance: str
    dynamics: str

    @property
    def name(self) -> str:
        return f"{self.appearance} square {self.dynamics}"

    @property
    def family(self) -> str:
        if self.dynamics == "staying still":
            return "appearance"
        if self.dynamics.startswith("moving"):
            return "motion"
        return "rate"


def catalog() -> List[ClassSpec]:
    return [ClassSpec(a, d) for a in APPEARANCES for d in DYNAMICS]


def label_corpus() -> List[str]:
    """Every class phrase the renderer knows; the vocabulary is built from this"""
    return [spec.name for spec in catalog()]


def select_classes(train_classes: int, holdout_classes: int) -> Tuple[List[ClassSpec], List[ClassSpec]]:
    """Train and holdout class lists, disjoint by construction.

    Raises:
        ConfigurationError: If more classes are requested than the pools hold
    """
    if not 1 <= train_classes <= len(TRAIN_POOL):
        raise ConfigurationError(f"data.train_classes must lie in 1..{len(TRAIN_POOL)}")
    if not 0 <= holdout_classes <= len(HOLDOUT_POOL):
        raise ConfigurationError(f"data.holdout_classes must lie in 0..{len(HOLDOUT_POOL)}")
    train = [ClassSpec(*pair) for pair in TRAIN_POOL[:train_classes]]
    holdout = [ClassSpec(*pair) for pair in HOLDOUT_POOL[:holdout_classes]]

    seen_words = {w for spec in train for w in normalize(spec.name)}
    for spec in holdout:
        unseen = [w for w in normalize(spec.name) if w not in seen_words]
        if unseen:
            logger.warning("Holdout class %r uses words never seen in training: %s", spec.name, unseen)
    return train, holdout


def _pattern(appearance: str, side: int) -> np.ndarray:
    if appearance == "bright":
        return np.full((side, side), SQUARE_LEVEL)
    if appearance == "dark":
        return np.full((side, side), -SQUARE_LEVEL)
    rows = np.where(np.arange(side) % 2 == 0, SQUARE_LEVEL, -SQUARE_LEVEL)
    return np.repeat(rows[:, None], side, axis=1)


def render_clip(
    spec: ClassSpec,
    rng: np.random.Generator,
    frames: int = 8,
    height: int = 32,
    width: int = 32,
    noise: float = 0.1,
) -> VideoClip:
    """Draw one clip ``[T, H, W, 3]``.

    The background texture is fixed per clip; fresh pixel noise is added to
    every frame. Motion is one pixel per frame, growth and shrinkage two
    pixels of side per frame, flashing toggles visibility every frame.
    """
    texture = rng.normal(0.0, 0.25, size=(height, width))
    base = max(4, min(height, width) // 4)
    max_side = min(height, width) - 2
    growth = 2 if base + 2 * (frames - 1) <= max_side else max(0, (max_side - base) // max(frames - 1, 1))

    travel = frames - 1
    if spec.dynamics.startswith("moving") and travel + base > min(height, width):
        raise ConfigurationError(f"{frames} frames of motion do not fit a {height}x{width} frame")

    def start(limit: int, lo_margin: int = 0, hi_margin: int = 0) -> int:
        return int(rng.integers(lo_margin, max(lo_margin + 1, limit - hi_margin)))

    top = start(height - base + 1)
    left = start(width - base + 1)
    if spec.dynamics == "moving left":
        left = start(width - base + 1, lo_margin=travel)
    elif spec.dynamics == "moving right":
        left = start(width - base + 1, hi_margin=travel)
    elif spec.dynamics == "moving up":
        top = start(height - base + 1, lo_margin=travel)
    elif spec.dynamics == "moving down":
        top = start(height - base + 1, hi_margin=travel)

    largest = base + growth * travel
    center_y = int(rng.integers(largest // 2, max(largest // 2 + 1, height - (largest + 1) // 2 + 1)))
    center_x = int(rng.integers(largest // 2, max(largest // 2 + 1, width - (largest + 1) // 2 + 1)))

    clip = np.empty((frames, height, width, 3))
    for t in range(frames):
        frame = texture + rng.normal(0.0, noise, size=(height, width)) if noise else texture.copy()
        side, y, x, visible = base, top, left, True
        if spec.dynamics == "moving left":
            x = left - t
        elif spec.dynamics == "moving right":
            x = left + t
        elif spec.dynamics == "moving up":
            y = top - t
        elif spec.dynamics == "moving down":
            y = top + t
        elif spec.dynamics in ("growing", "shrinking"):
            side = base + growth * (t if spec.dynamics == "growing" else travel - t)
            y, x = center_y - side // 2, center_x - side // 2
        elif spec.dynamics == "flashing":
            visible = t % 2 == 0

        if visible:
            frame[y:y + side, x:x + side] = _pattern(spec.appearance, side)
        clip[t] = frame[:, :, None] * CHANNEL_GAIN
    return VideoClip(clip)


@dataclass
class SyntheticDataset:
    clips: np.ndarray
    labels: np.ndarray
    label_names: List[str]
    families: List[str]
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def batches(
        self, batch_size: int, rng: Optional[np.random.Generator] = None
    ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """``(clips, labels)`` chunks; shuffled when ``rng`` is given"""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            yield self.clips[index], self.labels[index]


def generate_synthetic_dataset(
    classes: Sequence[ClassSpec],
    per_class: int,
    frames: int = 8,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    split: str = "train",
    noise: float = 0.1,
) -> SyntheticDataset:
    """Render ``per_class`` clips for each class, deterministically under ``seed``.

    Each (split, class, seed) triple owns an independent random stream, so
    adding classes never changes existing clips.

    Raises:
        ConfigurationError: If ``per_class < 1`` or the split is unknown
    """
    if per_class < 1:
        raise ConfigurationError(f"per_class must be at least 1, got {per_class}")
    if split not in SPLITS:
        raise ConfigurationError(f"Unknown split {split!r}; expected one of {SPLITS}")
    if not classes:
        raise ConfigurationError("At least one class is required")

    clips, labels = [], []
    for index, spec in enumerate(classes):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_CODES[split], index)))
        for _ in range(per_class):
            clips.append(render_clip(spec, rng, frames, height, width, noise).frames)
            labels.append(index)

    dataset = SyntheticDataset(
        clips=np.stack(clips),
        labels=np.asarray(labels, dtype=np.int64),
        label_names=[spec.name for spec in classes],
        families=[spec.family for spec in classes],
        split=split,
        seed=seed,
    )
    logger.debug("Rendered %s split: %d clips over %d classes", split, len(dataset), len(classes))
    return dataset


@dataclass
class DatasetSplits:
    train: SyntheticDataset
    val: SyntheticDataset
    holdout: Optional[SyntheticDataset]

    def check_disjoint(self) -> None:
        if self.holdout is None:
            return
        overlap = set(self.train.label_names) & set(self.holdout.label_names)
        if overlap:
            raise ContractError(f"Holdout classes overlap training classes: {sorted(overlap)}")


def build_splits(data, model, seed: int) -> DatasetSplits:
    """Train/val/holdout splits from the ``data`` and ``model`` config sections"""
    train_specs, holdout_specs = select_classes(data.train_classes, data.holdout_classes)
    shape = dict(frames=model.num_frames, height=model.image_size, width=model.image_size, noise=data.noise)
    splits = DatasetSplits(
        train=generate_synthetic_dataset(train_specs, data.per_class, seed=seed, split="train", **shape),
        val=generate_synthetic_dataset(train_specs, data.val_per_class, seed=seed, split="val", **shape),
        holdout=(
            generate_synthetic_dataset(
                holdout_specs, data.holdout_per_class, seed=seed, split="zeroshot_holdout", **shape
            )
            if holdout_specs
            else None
        ),
    )
    splits.check_disjoint()
    return splits


def save_dataset(dataset: SyntheticDataset, directory: Union[str, Path]) -> Dict[str, Path]:
    """Write ``<split>_clips.npy``, ``<split>_labels.npy`` and ``<split>_classes.tsv``"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "clips": directory / f"{dataset.split}_clips.npy",
        "labels": directory / f"{dataset.split}_labels.npy",
        "classes": directory / f"{dataset.split}_classes.tsv",
    }
    np.save(paths["clips"], dataset.clips.astype(np.float32))
    np.save(paths["labels"], dataset.labels)
    rows = ["index\tname\tfamily"]
    rows += [f"{i}\t{name}\t{family}" for i, (name, family) in enumerate(zip(dataset.label_names, dataset.families))]
    paths["classes"].write_text("\n".join(rows) + "\n", encoding="utf-8")
    return paths


def load_dataset(directory: Union[str, Path], split: str, seed: int = 0) -> SyntheticDataset:
    directory = Path(directory)
    try:
        clips = np.load(directory / f"{split}_clips.npy").astype(np.float64)
        labels = np.load(directory / f"{split}_labels.npy")
        lines = (directory / f"{split}_classes.tsv").read_text(encoding="utf-8").splitlines()[1:]
    except (OSError, ValueError) as e:
        raise FormatError(f"Cannot read {split} split from {directory}: {e}")
    names, families = [], []
    for line in lines:
        _, name, family = line.split("\t")
        names.append(name)
        families.append(family)
    return SyntheticDataset(clips, labels.astype(np.int64), names, families, split, seed)
