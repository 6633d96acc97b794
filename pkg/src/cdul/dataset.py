"""Dataset ingestion: VOC-style annotations, manifests and synthetic data.

A manifest is the single description of a split that every later stage
consumes. Ground-truth vectors travel with it but are only ever read by
evaluation code.
"""

from __future__ import annotations

import colorsys
import json
import re
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (AnnotationParseError, ConfigError, DataError,
                     MissingFileError, UnknownClassError)

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

SPLITS = ("train", "val")
SYNTHETIC_SCHEME = "synthetic://"


class EmptyAnnotationWarning(UserWarning):
    """An annotation file listed no objects; its label vector is all zeros."""


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ConfigError("class vocabulary must not be empty")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate class names in vocabulary: {dupes}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "index", {n: i for i, n in enumerate(names)})

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self.index

    def position(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise UnknownClassError(name) from None

    @classmethod
    def voc(cls) -> "ClassVocabulary":
        return cls(VOC_CLASSES)

    @classmethod
    def synthetic(cls, n_classes: int) -> "ClassVocabulary":
        return cls(tuple(f"class_{i:02d}" for i in range(n_classes)))


@dataclass(frozen=True)
class LabeledSample:
    image_id: str
    image_path: str
    ground_truth: tuple[int, ...]

    @property
    def positives(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.ground_truth) if v)


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    samples: tuple[LabeledSample, ...]
    vocabulary: ClassVocabulary

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        n = len(self.vocabulary)
        for s in self.samples:
            if s.image_id in seen:
                raise DataError(f"duplicate image_id {s.image_id!r} in split {self.split!r}")
            seen.add(s.image_id)
            if len(s.ground_truth) != n:
                raise DataError(f"{s.image_id}: ground truth has length "
                                f"{len(s.ground_truth)}, vocabulary has {n}")
            if any(v not in (0, 1) for v in s.ground_truth):
                raise DataError(f"{s.image_id}: ground truth entries must be 0 or 1")

    def __len__(self):
        return len(self.samples)

    @property
    def image_ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def targets(self) -> np.ndarray:
        """Ground-truth matrix of shape (n_samples, n_classes)."""
        if not self.samples:
            return np.zeros((0, len(self.vocabulary)), dtype=np.int64)
        return np.array([s.ground_truth for s in self.samples], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "vocabulary": list(self.vocabulary.names),
            "samples": [
                {"image_id": s.image_id, "image_path": s.image_path,
                 "ground_truth": list(s.ground_truth)}
                for s in self.samples
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        try:
            vocab = ClassVocabulary(tuple(data["vocabulary"]))
            samples = tuple(
                LabeledSample(s["image_id"], s["image_path"],
                              tuple(int(v) for v in s["ground_truth"]))
                for s in data["samples"]
            )
            return cls(data["split"], samples, vocab)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest: {exc!r}") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def _flag(obj: ET.Element, tag: str) -> bool:
    text = obj.findtext(tag)
    if text is None:
        return False
    try:
        return bool(int(float(text.strip())))
    except ValueError:
        return text.strip().lower() in ("true", "yes")


def parse_voc_annotation(xml_text: str, vocab: ClassVocabulary, *,
                         include_difficult: bool = True,
                         source: str | None = None) -> np.ndarray:
    """Turn one VOC annotation document into a multi-hot vector.

    Only direct ``<object>`` children of ``<annotation>`` count; nested
    ``<part>`` names (head, hand, foot) are ignored. Occluded and truncated
    objects are positives. ``difficult`` objects are positives unless
    ``include_difficult`` is False. A document without objects yields a zero
    vector and an :class:`EmptyAnnotationWarning`.
    """
    where = source or "<annotation>"
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        lines = xml_text.splitlines()
        context = lines[line - 1].strip() if 0 < line <= len(lines) else ""
        raise AnnotationParseError(
            f"{where}: malformed XML at line {line}, column {col}: {context!r}") from exc
    if root.tag != "annotation":
        raise AnnotationParseError(f"{where}: top-level element is <{root.tag}>, expected <annotation>")

    labels = np.zeros(len(vocab), dtype=np.int64)
    objects = root.findall("object")
    for obj in objects:
        name = (obj.findtext("name") or "").strip()
        if not name:
            raise AnnotationParseError(f"{where}: <object> without a <name>")
        if name not in vocab:
            raise UnknownClassError(name, where)
        if not include_difficult and _flag(obj, "difficult"):
            continue
        labels[vocab.index[name]] = 1
    if not objects:
        warnings.warn(f"{where}: annotation has no objects", EmptyAnnotationWarning, stacklevel=2)
    return labels


def read_split_ids(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"split file not found: {path}")
    ids = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            ids.append(line.split()[0])
    return ids


def load_manifest(root, split: str, vocab: ClassVocabulary | None = None, *,
                  include_difficult: bool = True) -> DatasetManifest:
    """Build a manifest from a VOC2012-style directory tree."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    vocab = vocab or ClassVocabulary.voc()
    root = Path(root)
    ids = read_split_ids(root / "ImageSets" / "Main" / f"{split}.txt")
    samples = []
    for image_id in ids:
        xml_path = root / "Annotations" / f"{image_id}.xml"
        img_path = root / "JPEGImages" / f"{image_id}.jpg"
        if not xml_path.exists():
            raise MissingFileError(f"{image_id}: annotation file missing: {xml_path}")
        if not img_path.exists():
            raise MissingFileError(f"{image_id}: image file missing: {img_path}")
        labels = parse_voc_annotation(xml_path.read_text(encoding="utf-8"), vocab,
                                      include_difficult=include_difficult,
                                      source=str(xml_path))
        samples.append(LabeledSample(image_id, str(img_path), tuple(int(v) for v in labels)))
    return DatasetManifest(split, tuple(samples), vocab)


def write_split_listing(manifest: DatasetManifest, root) -> Path:
    """Write ``ImageSets/Main/<split>.txt`` for a manifest (sample order preserved)."""
    path = Path(root) / "ImageSets" / "Main" / f"{manifest.split}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}\n" for i in manifest.image_ids))
    return path


def annotation_xml(image_id: str, names: Iterable[str], *, width: int = 500,
                   height: int = 375) -> str:
    """Minimal VOC annotation document listing one object per name."""
    objs = "".join(
        f"  <object>\n    <name>{n}</name>\n    <pose>Unspecified</pose>\n"
        f"    <truncated>0</truncated>\n    <occluded>0</occluded>\n    <difficult>0</difficult>\n"
        f"    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>{width}</xmax><ymax>{height}</ymax></bndbox>\n"
        f"  </object>\n"
        for n in names
    )
    return (f"<annotation>\n  <folder>VOC2012</folder>\n  <filename>{image_id}.jpg</filename>\n"
            f"  <size><width>{width}</width><height>{height}</height><depth>3</depth></size>\n"
            f"{objs}</annotation>\n")


# --- synthetic data ---------------------------------------------------------

_SYN_RE = re.compile(r"^synthetic://(?P<split>\w+)/c(?P<c>\d+)-s(?P<seed>-?\d+)-r(?P<size>\d+)"
                     r"-g(?P<grid>\d+)/(?P<index>\d+)$")
_SPLIT_CODE = {"train": 0, "val": 1}


def class_palette(n_classes: int) -> np.ndarray:
    """One saturated RGB colour per class, hues evenly spaced; shape (C, 3) uint8."""
    colours = [colorsys.hsv_to_rgb(i / n_classes, 1.0, 1.0 if i % 2 == 0 else 0.6)
               for i in range(n_classes)]
    return np.round(np.array(colours) * 255).astype(np.uint8)


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, _SPLIT_CODE[split], index])


def synthetic_layout(seed: int, split: str, index: int, n_classes: int,
                     grid: int = 4) -> tuple[list[int], np.ndarray]:
    """Positives and the grid-cell -> class assignment for one synthetic sample."""
    rng = _sample_rng(seed, split, index)
    n_cells = grid * grid
    max_pos = min(n_classes, n_cells)
    n_pos = 1 + int(rng.binomial(max_pos - 1, 0.3))
    positives = sorted(int(c) for c in rng.choice(n_classes, size=n_pos, replace=False))
    cells = np.empty(n_cells, dtype=np.int64)
    order = rng.permutation(n_cells)
    cells[order[:n_pos]] = positives
    cells[order[n_pos:]] = rng.choice(positives, size=n_cells - n_pos)
    return positives, cells.reshape(grid, grid)


def render_synthetic(cells: np.ndarray, n_classes: int, size: int) -> np.ndarray:
    """Paint a class-cell layout as an (size, size, 3) uint8 image."""
    palette = class_palette(n_classes)
    grid = cells.shape[0]
    edges = np.linspace(0, size, grid + 1).round().astype(int)
    img = np.empty((size, size, 3), dtype=np.uint8)
    for r in range(grid):
        for c in range(grid):
            img[edges[r]:edges[r + 1], edges[c]:edges[c + 1]] = palette[cells[r, c]]
    return img


def make_synthetic_dataset(n_samples: int, n_classes: int, seed: int, *,
                           split: str = "train", image_size: int = 32,
                           grid: int = 4) -> DatasetManifest:
    """Deterministic colour-patch dataset.

    Every image is a ``grid`` x ``grid`` mosaic where each cell carries the
    palette colour of one positive class, and every positive owns at least
    one cell. Images are never written to disk; their ``synthetic://`` paths
    encode everything :func:`load_image` needs to redraw them.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    if split not in _SPLIT_CODE:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    if image_size < grid:
        raise ConfigError(f"image_size {image_size} smaller than grid {grid}")
    vocab = ClassVocabulary.synthetic(n_classes)
    samples = []
    for i in range(n_samples):
        positives, _ = synthetic_layout(seed, split, i, n_classes, grid)
        gt = [0] * n_classes
        for p in positives:
            gt[p] = 1
        path = f"{SYNTHETIC_SCHEME}{split}/c{n_classes}-s{seed}-r{image_size}-g{grid}/{i:06d}"
        samples.append(LabeledSample(f"{split}_{i:06d}", path, tuple(gt)))
    return DatasetManifest(split, tuple(samples), vocab)


def load_image(path: str) -> np.ndarray:
    """Decode an image reference into an (H, W, 3) uint8 array."""
    if path.startswith(SYNTHETIC_SCHEME):
        m = _SYN_RE.match(path)
        if not m:
            raise DataError(f"malformed synthetic image path {path!r}")
        n_classes, grid = int(m["c"]), int(m["grid"])
        _, cells = synthetic_layout(int(m["seed"]), m["split"], int(m["index"]), n_classes, grid)
        return render_synthetic(cells, n_classes, int(m["size"]))
    from PIL import Image

    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"image not found: {path}")
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"))


def load_images(paths: Sequence[str]) -> list[np.ndarray]:
    return [load_image(p) for p in paths]
