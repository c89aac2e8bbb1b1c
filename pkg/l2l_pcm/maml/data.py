"""
Omniglot-style glyph datasets and few-shot episodes for l2l-pcm.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from l2l_pcm.config import MamlConfig
from l2l_pcm.errors import DatasetError
from l2l_pcm.utils.persistence import atomic_write_bytes

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

IMAGE_SIZE = 28
EXAMPLES_PER_CLASS = 20
MANIFEST_CACHE = "classes.json"
# class counts of the standard meta-train / validation / test protocol
SPLIT_WEIGHTS = (1100, 100, 423)


@dataclass
class GlyphClass:
    """All examples of one character class; ink is 1, background 0."""

    class_id: str
    alphabet: str
    images: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])


class GlyphDataset:
    """An ordered collection of glyph classes."""

    def __init__(self, classes: Sequence[GlyphClass], name: str = "glyphs"):
        """
        Initialize the GlyphDataset.

        Args:
            classes: Classes in their canonical order
            name: Label used in logs
        """
        self.classes = list(classes)
        self.name = name
        logger.info(
            "GlyphDataset initialized with name: %s, classes: %d",
            name,
            len(self.classes),
        )

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> List[str]:
        return [c.class_id for c in self.classes]

    def rotated(self) -> "GlyphDataset":
        """Every class plus its 90, 180 and 270 degree rotations as new classes."""
        classes = []
        for glyph in self.classes:
            for quarter in range(4):
                suffix = "" if quarter == 0 else f"@rot{90 * quarter}"
                classes.append(
                    GlyphClass(
                        class_id=glyph.class_id + suffix,
                        alphabet=glyph.alphabet,
                        images=np.ascontiguousarray(
                            np.rot90(glyph.images, k=quarter, axes=(1, 2))
                        ),
                    )
                )
        return GlyphDataset(classes, name=f"{self.name}+rot")


@dataclass
class Episode:
    """One N-way K-shot task: images (NK, H, W, 1) and one-hot labels (NK, N)."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: List[str] = field(default_factory=list)
    permutation: Optional[np.ndarray] = None

    @property
    def n_way(self) -> int:
        return int(self.support_y.shape[1])


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes, dtype=np.float32)[labels]


def sample_task(
    split: GlyphDataset, n_way: int, k_shot: int, rng: np.random.Generator
) -> Episode:
    """
    Draw an N-way K-shot episode.

    Classes are drawn without replacement; each contributes K support and K
    disjoint query examples. Label ids are a random permutation of 0..N-1.

    Args:
        split: Dataset split to draw from
        n_way: Classes per episode
        k_shot: Examples per class in each of support and query
        rng: Seeded generator

    Returns:
        episode: Class-major support and query sets
    """
    if len(split) < n_way:
        raise DatasetError(
            f"{split.name} has {len(split)} classes, episode needs {n_way}"
        )
    chosen = rng.choice(len(split), size=n_way, replace=False)
    permutation = rng.permutation(n_way)

    support, query, labels = [], [], []
    for slot, index in enumerate(chosen):
        glyph = split.classes[int(index)]
        if len(glyph) < 2 * k_shot:
            raise DatasetError(
                f"class {glyph.class_id} has {len(glyph)} examples, "
                f"need {2 * k_shot}"
            )
        picks = rng.choice(len(glyph), size=2 * k_shot, replace=False)
        support.append(glyph.images[picks[:k_shot]])
        query.append(glyph.images[picks[k_shot:]])
        labels.extend([permutation[slot]] * k_shot)

    labels = np.asarray(labels)
    return Episode(
        support_x=np.concatenate(support)[..., None].astype(np.float32),
        support_y=_one_hot(labels, n_way),
        query_x=np.concatenate(query)[..., None].astype(np.float32),
        query_y=_one_hot(labels, n_way),
        classes=[split.classes[int(i)].class_id for i in chosen],
        permutation=permutation,
    )


def decode_glyph(path: Union[str, Path], size: int = IMAGE_SIZE) -> np.ndarray:
    """Read a grayscale PNG, resize to size x size and invert so strokes are 1."""
    with Image.open(path) as image:
        gray = image.convert("L").resize((size, size), Image.LANCZOS)
    return 1.0 - np.asarray(gray, dtype=np.float32) / 255.0


def _scan(root: Path) -> Dict[str, List[str]]:
    index: Dict[str, List[str]] = {}
    for alphabet in sorted(p for p in root.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(
                f.relative_to(root).as_posix() for f in character.glob("*.png")
            )
            index[f"{alphabet.name}/{character.name}"] = files
    return index


def _read_manifest(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return [str(c) for c in json.loads(text)]
    return [
        line.strip()
        for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    ]


def load_omniglot(
    root: Union[str, Path],
    manifest: Optional[Union[str, Path]] = None,
    image_size: int = IMAGE_SIZE,
    examples_per_class: int = EXAMPLES_PER_CLASS,
) -> GlyphDataset:
    """
    Load an alphabet/character/*.png tree.

    The class index is cached in ``classes.json`` under the root and reused
    on later loads. Unreadable images and classes without exactly
    ``examples_per_class`` readable images are skipped with a warning.

    Args:
        root: Dataset root
        manifest: Optional file listing the class ids (alphabet/character) to load
        image_size: Output resolution
        examples_per_class: Required examples per class

    Returns:
        dataset: Classes ordered by alphabet, then character
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")

    cache = root / MANIFEST_CACHE
    index: Optional[Dict[str, List[str]]] = None
    if cache.is_file():
        try:
            index = json.loads(cache.read_text(encoding="utf-8"))["classes"]
        except (ValueError, KeyError):
            logger.warning("Ignoring unreadable class cache %s", cache)
    if index is None:
        index = _scan(root)
        try:
            payload = json.dumps({"classes": index}, sort_keys=True)
            atomic_write_bytes(cache, payload.encode("utf-8"))
        except OSError as exc:
            logger.warning("Could not write class cache %s: %s", cache, exc)
    if not index:
        raise DatasetError(f"no character classes under {root}")

    wanted = sorted(index)
    if manifest is not None:
        listed = _read_manifest(manifest)
        missing = [c for c in listed if c not in index]
        if missing:
            raise DatasetError(
                f"manifest names unknown classes: {', '.join(missing[:5])}"
            )
        wanted = sorted(listed)

    classes = []
    for class_id in wanted:
        images = []
        for rel in index[class_id]:
            try:
                images.append(decode_glyph(root / rel, image_size))
            except (UnidentifiedImageError, OSError) as exc:
                logger.warning("Skipping unreadable image %s: %s", rel, exc)
        if len(images) != examples_per_class:
            logger.warning(
                "Excluding class %s with %d usable examples (need %d)",
                class_id, len(images), examples_per_class,
            )
            continue
        classes.append(GlyphClass(class_id, class_id.split("/")[0], np.stack(images)))

    if not classes:
        raise DatasetError(f"no usable classes under {root}")
    return GlyphDataset(classes, name=root.name)


def _glyph_strokes(rng: np.random.Generator) -> List[np.ndarray]:
    strokes = []
    for _ in range(int(rng.integers(2, 5))):
        points = int(rng.integers(2, 5))
        strokes.append(rng.uniform(0.15, 0.85, size=(points, 2)))
    return strokes


def _render(
    strokes: List[np.ndarray], rng: np.random.Generator, size: int
) -> np.ndarray:
    scale = 2 * size
    canvas = Image.new("L", (scale, scale), 0)
    draw = ImageDraw.Draw(canvas)
    angle = rng.normal(0.0, 0.15)
    rotation = np.array(
        [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
    )
    shift = rng.normal(0.0, 0.04, size=2)
    for stroke in strokes:
        wobble = rng.normal(0.0, 0.02, size=stroke.shape)
        jittered = (stroke - 0.5) @ rotation.T + 0.5 + shift + wobble
        xy = [tuple(p) for p in np.clip(jittered, 0.0, 1.0) * (scale - 1)]
        draw.line(xy, fill=255, width=max(scale // 14, 2))
    small = canvas.resize((size, size), Image.LANCZOS)
    return np.asarray(small, dtype=np.float32) / 255.0


def synthetic_glyphs(
    n_classes: int = 120,
    examples_per_class: int = EXAMPLES_PER_CLASS,
    image_size: int = IMAGE_SIZE,
    seed: int = 0,
    classes_per_alphabet: int = 20,
) -> GlyphDataset:
    """
    Procedural stand-in for Omniglot: each class is a random set of strokes,
    each example a jittered rendering of it.

    Args:
        n_classes: Number of classes
        examples_per_class: Renderings per class
        image_size: Output resolution
        seed: Seed of the stroke prototypes and jitter
        classes_per_alphabet: Classes grouped under one alphabet name

    Returns:
        dataset: Deterministic for a given seed
    """
    rng = np.random.default_rng(seed)
    classes = []
    for c in range(n_classes):
        strokes = _glyph_strokes(rng)
        images = np.stack(
            [_render(strokes, rng, image_size) for _ in range(examples_per_class)]
        )
        alphabet = f"synthetic{c // classes_per_alphabet:02d}"
        classes.append(GlyphClass(f"{alphabet}/char{c:04d}", alphabet, images))
    return GlyphDataset(classes, name="synthetic")


def split_dataset(
    dataset: GlyphDataset, weights: Tuple[int, int, int] = SPLIT_WEIGHTS
) -> Tuple[GlyphDataset, GlyphDataset, GlyphDataset]:
    """
    Cut classes, ordered by alphabet, into meta-train / validation / test
    in proportion to ``weights``.
    """
    ordered = sorted(dataset.classes, key=lambda c: (c.alphabet, c.class_id))
    total = float(sum(weights))
    n_train = int(round(len(ordered) * weights[0] / total))
    n_val = int(round(len(ordered) * weights[1] / total))
    return (
        GlyphDataset(ordered[:n_train], name=f"{dataset.name}:train"),
        GlyphDataset(ordered[n_train : n_train + n_val], name=f"{dataset.name}:val"),
        GlyphDataset(ordered[n_train + n_val :], name=f"{dataset.name}:test"),
    )


def prepare_splits(
    config: MamlConfig, seed: int = 0
) -> Tuple[GlyphDataset, GlyphDataset, GlyphDataset]:
    """
    Load the configured dataset (or the synthetic fallback), split it and
    add rotated classes to the meta-train split when enabled.
    """
    if config.omniglot_root:
        dataset = load_omniglot(
            config.omniglot_root, config.manifest, config.image_size
        )
    else:
        logger.info(
            "No Omniglot root configured; rendering %d synthetic classes",
            config.synthetic_classes,
        )
        dataset = synthetic_glyphs(
            config.synthetic_classes, image_size=config.image_size, seed=seed
        )
    train, val, test = split_dataset(dataset)
    if config.augment_rotations:
        train = train.rotated()
    return train, val, test
