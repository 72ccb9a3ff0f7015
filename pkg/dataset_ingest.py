from __future__ import annotations

# dataset_ingest.py
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from config import ClassSplit
from container import FormatError, Reader, Writer, read_bytes, write_bytes
from observability import emit_event
from tensor_core import Matrix, Rng

CACHE_MAGIC = b"AOSLD001"
IMAGE_SIDE = 28
SOURCE_SIDE = 105


class IngestionError(RuntimeError):
    """Raised when source images are missing or unreadable; lists every offender."""

    def __init__(self, offenders: list[str]) -> None:
        self.offenders = offenders
        shown = "\n".join(f"- {o}" for o in offenders[:20])
        more = f"\n... and {len(offenders) - 20} more" if len(offenders) > 20 else ""
        super().__init__(f"{len(offenders)} unreadable or missing source file(s):\n{shown}{more}")


def rotate90(image: Matrix, k: int) -> Matrix:
    """
    Exact counterclockwise grid rotation by ``k`` quarter turns.
    In (x, y) = (column, row) coordinates a pixel at (0, 0) moves to (0, side-1) for k=1.
    """
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"rotate90 needs a square image, got shape {image.shape}")
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be in {{0, 1, 2, 3}}, got {k}")
    return np.rot90(image, k).copy()


def flatten(image: Matrix) -> Matrix:
    """Row-major flattening; ``reshape(side, side)`` inverts it."""
    return np.ascontiguousarray(image).reshape(-1)


class DatasetView(ABC):
    """Read access to a set of classes. Images come back as float64 in [0, 1]."""

    @property
    @abstractmethod
    def image_side(self) -> int:
        raise NotImplementedError

    @property
    @abstractmethod
    def class_ids(self) -> list[int]:
        raise NotImplementedError

    @abstractmethod
    def example_count(self, class_id: int) -> int:
        raise NotImplementedError

    @abstractmethod
    def image(self, class_id: int, index: int) -> Matrix:
        raise NotImplementedError


class ArrayDatasetView(DatasetView):
    """In-memory view over ``{class_id: (n, side, side) array}``."""

    def __init__(self, images: dict[int, np.ndarray]) -> None:
        if not images:
            raise ValueError("ArrayDatasetView needs at least one class")
        self._images = {int(k): np.asarray(v, dtype=np.float64) for k, v in images.items()}
        sides = {v.shape[1:] for v in self._images.values()}
        if len(sides) != 1 or any(v.ndim != 3 or v.shape[1] != v.shape[2] for v in self._images.values()):
            raise ValueError(f"all classes need (n, side, side) images, got shapes {sorted(sides)}")
        self._side = next(iter(sides))[0]

    @property
    def image_side(self) -> int:
        return self._side

    @property
    def class_ids(self) -> list[int]:
        return sorted(self._images)

    def example_count(self, class_id: int) -> int:
        return len(self._images[class_id])

    def image(self, class_id: int, index: int) -> Matrix:
        return self._images[class_id][index]


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    offset: int
    count: int


@dataclass
class DatasetCache:
    image_side: int
    classes: list[ClassEntry]
    pixels: np.ndarray  # (total, side, side) uint8

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    @property
    def image_count(self) -> int:
        return int(self.pixels.shape[0])

    def view(self, class_ids: Iterable[int] | None = None) -> "CacheView":
        return CacheView(self, self.class_ids if class_ids is None else class_ids)


class CacheView(DatasetView):
    def __init__(self, cache: DatasetCache, class_ids: Iterable[int]) -> None:
        by_id = {c.class_id: c for c in cache.classes}
        ids = list(class_ids)
        missing = [cid for cid in ids if cid not in by_id]
        if missing:
            raise KeyError(f"class ids not in cache: {missing[:10]}")
        self._cache = cache
        self._entries = {cid: by_id[cid] for cid in ids}

    @property
    def image_side(self) -> int:
        return self._cache.image_side

    @property
    def class_ids(self) -> list[int]:
        return list(self._entries)

    def example_count(self, class_id: int) -> int:
        return self._entries[class_id].count

    def image(self, class_id: int, index: int) -> Matrix:
        entry = self._entries[class_id]
        if not 0 <= index < entry.count:
            raise IndexError(f"example {index} out of range for class {class_id} ({entry.count} examples)")
        return self._cache.pixels[entry.offset + index].astype(np.float64) / 255.0


def save_cache(cache: DatasetCache, path: Path) -> None:
    w = Writer(CACHE_MAGIC)
    w.u32(cache.image_side)
    w.u32(len(cache.classes))
    for entry in cache.classes:
        name = entry.name.encode("utf-8")
        w.u32(entry.class_id)
        w.u16(len(name))
        w.raw(name)
        w.u32(entry.count)
    w.u8_block(cache.pixels)
    write_bytes(path, w.seal())


def load_cache(path: Path) -> DatasetCache:
    r = Reader(read_bytes(path), CACHE_MAGIC)
    side = r.u32()
    n_classes = r.u32()
    if side < 1 or n_classes < 1:
        raise FormatError(f"invalid cache header: side={side}, classes={n_classes}")
    classes: list[ClassEntry] = []
    offset = 0
    for _ in range(n_classes):
        class_id = r.u32()
        name = r.raw(r.u16()).decode("utf-8")
        count = r.u32()
        if count < 1:
            raise FormatError(f"class {class_id} has no examples")
        classes.append(ClassEntry(class_id=class_id, name=name, offset=offset, count=count))
        offset += count
    pixels = r.u8_block((offset, side, side))
    r.finish()
    return DatasetCache(image_side=side, classes=classes, pixels=pixels)


def _decode(fp: Path) -> np.ndarray:
    with Image.open(fp) as im:
        gray = im.convert("L")
        if gray.size != (IMAGE_SIDE, IMAGE_SIDE):
            gray = gray.resize((IMAGE_SIDE, IMAGE_SIDE), Image.Resampling.BOX)
        return np.asarray(gray, dtype=np.uint8)


def ingest_omniglot(source_dir: Path, out_path: Path) -> DatasetCache:
    """
    Build a cache from an ``alphabet/character/*.png`` tree. Images are
    area-averaged down to 28x28 and stored as bytes; division by 255 happens on read.
    """
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise IngestionError([f"{source_dir} (source directory not found)"])

    offenders: list[str] = []
    classes: list[ClassEntry] = []
    planes: list[np.ndarray] = []
    offset = 0
    for alphabet in sorted(p for p in source_dir.iterdir() if p.is_dir()):
        for character in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(character.glob("*.png"))
            if not files:
                offenders.append(f"{character} (no .png files)")
                continue
            decoded = []
            for fp in files:
                try:
                    decoded.append(_decode(fp))
                except (OSError, UnidentifiedImageError, ValueError) as e:
                    offenders.append(f"{fp} ({e})")
            if not decoded:
                continue
            classes.append(
                ClassEntry(class_id=len(classes), name=f"{alphabet.name}/{character.name}", offset=offset, count=len(decoded))
            )
            planes.extend(decoded)
            offset += len(decoded)

    if offenders:
        raise IngestionError(offenders)
    if not classes:
        raise IngestionError([f"{source_dir} (no alphabet/character/*.png images found)"])

    cache = DatasetCache(image_side=IMAGE_SIDE, classes=classes, pixels=np.stack(planes))
    save_cache(cache, out_path)
    emit_event("dataset_ingested", source=str(source_dir), out=str(out_path), classes=len(classes), images=offset)
    return cache


def split_classes(cache: DatasetCache, rng: Rng, n_train: int) -> ClassSplit:
    """Shuffle class ids into train/test. Pass ``Rng(seed)`` so the stored seed replays the split."""
    ids = cache.class_ids
    if not 1 <= n_train < len(ids):
        raise ValueError(f"n_train must be in [1, {len(ids) - 1}], got {n_train}")
    shuffled = rng.shuffle(ids)
    return ClassSplit(seed=rng.seed, train_ids=sorted(shuffled[:n_train]), test_ids=sorted(shuffled[n_train:]))


def default_train_count(total_classes: int) -> int:
    """Same train fraction as the 1,200 / 423 Omniglot split."""
    return min(max(1, round(total_classes * 1200 / 1623)), total_classes - 1)


def _translate(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(image)
    side = image.shape[0]
    src_y = slice(max(0, -dy), side - max(0, dy))
    dst_y = slice(max(0, dy), side - max(0, -dy))
    src_x = slice(max(0, -dx), side - max(0, dx))
    dst_x = slice(max(0, dx), side - max(0, -dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def _stroke_pattern(rng: Rng, side: int, vertices: int, width: int) -> np.ndarray:
    margin = 4
    points = [
        (int(rng.integers(margin, side - margin)), int(rng.integers(margin, side - margin))) for _ in range(vertices)
    ]
    img = Image.new("L", (side, side), 0)
    ImageDraw.Draw(img).line(points, fill=255, width=width)
    return np.asarray(img, dtype=np.float64) / 255.0


def synth_glyphs(
    rng: Rng,
    n_classes: int,
    n_examples: int,
    max_shift: int = 1,
    noise: float = 0.05,
    side: int = IMAGE_SIDE,
) -> DatasetCache:
    """
    Procedural stand-in for Omniglot: each class is a random polyline; each
    example is that pattern shifted by up to ``max_shift`` pixels plus Gaussian
    pixel noise, clamped to [0, 1].
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n_examples < 1:
        raise ValueError(f"n_examples must be >= 1, got {n_examples}")

    classes: list[ClassEntry] = []
    planes = np.empty((n_classes * n_examples, side, side), dtype=np.uint8)
    for cid in range(n_classes):
        pattern = _stroke_pattern(rng, side, vertices=int(rng.integers(3, 6)), width=2)
        for j in range(n_examples):
            dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
            example = _translate(pattern, dy, dx)
            if noise > 0:
                example = example + rng.normal(noise, example.shape)
            planes[cid * n_examples + j] = np.rint(np.clip(example, 0.0, 1.0) * 255.0).astype(np.uint8)
        classes.append(ClassEntry(class_id=cid, name=f"synth/{cid:04d}", offset=cid * n_examples, count=n_examples))

    emit_event("dataset_synthesised", classes=n_classes, examples=n_examples, max_shift=max_shift, noise=noise)
    return DatasetCache(image_side=side, classes=classes, pixels=planes)


def views_for_split(cache: DatasetCache, split: ClassSplit) -> tuple[CacheView, CacheView]:
    return cache.view(split.train_ids), cache.view(split.test_ids)


def pooled_examples(view: DatasetView, class_ids: Sequence[int]) -> list[tuple[int, int]]:
    return [(cid, j) for cid in class_ids for j in range(view.example_count(cid))]
