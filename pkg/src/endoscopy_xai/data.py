"""Corpus ingestion, deterministic stratified splits and batch loading.

The corpus is a class-per-folder tree ``<root>/<class_name>/<image>``.  Images
are served as ``N x 224 x 224 x 3`` float32 arrays in RGB order.
"""

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SIZE = 224
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("path", "label", "label_index", "split")


class DataError(Exception):
    """Base class for corpus and loading failures."""


class CorpusNotFoundError(DataError):
    pass


class EmptyClassError(DataError):
    pass


class BatchLoadError(DataError):
    def __init__(self, path, reason):
        super().__init__(f"cannot decode {path}: {reason}")
        self.path = path


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: str
    label_index: int
    split: str | None = None


@dataclass(frozen=True)
class CorpusScan:
    records: list
    class_names: list
    rejects: list = field(default_factory=list)  # (path, reason) pairs

    def rejects_csv(self):
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("path", "reason"))
        writer.writerows(self.rejects)
        return buf.getvalue()


@dataclass(frozen=True)
class SplitManifest:
    records: list
    class_names: list
    seed: int | None = None
    ratios: tuple | None = None

    def split(self, name):
        """Records of one split, in manifest (path) order."""
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def counts(self):
        out = {s: {c: 0 for c in self.class_names} for s in SPLITS}
        for r in self.records:
            out[r.split][r.label] += 1
        return out

    def to_csv(self):
        buf = io.StringIO(newline="")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in sorted(self.records, key=lambda r: (r.split, r.path)):
            writer.writerow((r.path, r.label, r.label_index, r.split))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, seed=None, ratios=None):
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise DataError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        records = [
            ImageRecord(row["path"], row["label"], int(row["label_index"]), row["split"])
            for row in reader
        ]
        names = {r.label_index: r.label for r in records}
        class_names = [names[i] for i in sorted(names)]
        return cls(records, class_names, seed, ratios)

    def save(self, path):
        from ._io import write_text

        return write_text(path, self.to_csv())

    @classmethod
    def load(cls, path, seed=None, ratios=None):
        return cls.from_csv(Path(path).read_text(encoding="utf-8"), seed, ratios)


@dataclass
class ImageBatch:
    pixels: np.ndarray  # N x 224 x 224 x 3, float32
    labels: np.ndarray  # N x C one-hot, float32
    training_mode: bool = False
    indices: np.ndarray | None = None  # positions within the split, keys the flip RNG
    paths: list = field(default_factory=list)


@dataclass(frozen=True)
class ScalarNormalization:
    """Affine pixel map ``x * scale + offset``; identity by default.

    The identity keeps raw 0-255 intensities, which the EfficientNet backbone
    wrapper rescales internally.
    """

    scale: float = 1.0
    offset: float = 0.0

    def __call__(self, pixels):
        if self.scale == 1.0 and self.offset == 0.0:
            return np.asarray(pixels, dtype=np.float32).copy()
        return (np.asarray(pixels, dtype=np.float32) * np.float32(self.scale) + np.float32(self.offset))

    def describe(self):
        return {"kind": "affine", "scale": self.scale, "offset": self.offset}


def _decode_rgb(path):
    with Image.open(path) as im:
        im.load()
        return im.convert("RGB")


def scan_corpus(root):
    """Enumerate ``<root>/<class>/<image>`` into unsplit records.

    Undecodable files are collected in ``rejects`` instead of being dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusNotFoundError(f"corpus root not found: {root}")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not class_dirs:
        raise CorpusNotFoundError(f"no class directories under {root}")
    class_names = [p.name for p in class_dirs]

    records, rejects = [], []
    for label_index, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        accepted = 0
        for p in files:
            try:
                _decode_rgb(p)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                rejects.append((p.as_posix(), f"{type(exc).__name__}: {exc}"))
                continue
            records.append(ImageRecord(p.as_posix(), class_dir.name, label_index))
            accepted += 1
        if accepted == 0:
            raise EmptyClassError(f"class directory {class_dir} holds no decodable images")
    return CorpusScan(records, class_names, rejects)


def allocate_counts(n, ratios):
    """Split ``n`` items by ``ratios`` with largest-remainder rounding.

    Each count differs from ``ratio * n`` by less than one.  Leftover items go
    to the largest fractional remainders, train first on ties.
    """
    quotas = [r * n for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def make_splits(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Stratified train/val/test assignment.

    Per class, records are sorted by path and permuted with
    ``np.random.default_rng([seed, label_index])``; the first ``n_train`` of the
    permutation go to train, the next ``n_val`` to val and the rest to test.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < -1e-9 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative fractions summing to 1, got {ratios}")
    ratios = tuple(max(r, 0.0) for r in ratios)  # absorb rounding noise such as 1 - 0.9 - 0.1
    records = list(records)
    if not records:
        raise ValueError("no records to split")

    by_class = {}
    for r in records:
        by_class.setdefault((r.label_index, r.label), []).append(r)

    out = []
    for (label_index, _), members in sorted(by_class.items()):
        members = sorted(members, key=lambda r: r.path)
        perm = np.random.default_rng([seed, label_index]).permutation(len(members))
        n_train, n_val, _ = allocate_counts(len(members), ratios)
        for rank, idx in enumerate(perm):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out.append(replace(members[idx], split=split))

    names = {r.label_index: r.label for r in records}
    manifest = SplitManifest(
        sorted(out, key=lambda r: (r.split, r.path)), [names[i] for i in sorted(names)], seed, ratios
    )
    positive = sum(1 for r in ratios if r > 0)
    for split, ratio in zip(SPLITS, ratios):
        if ratio > 0 and len(records) >= positive and not manifest.split(split):
            warnings.warn(f"split {split!r} received no records despite ratio {ratio}", stacklevel=2)
    return manifest


def resize_image(image, size=IMAGE_SIZE):
    """Bilinear resize of a PIL image or HxWx3 array to ``size x size`` RGB."""
    if not isinstance(image, Image.Image):
        arr = np.asarray(image)
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
        image = Image.fromarray(arr)
    image = image.convert("RGB")
    if image.size != (size, size):
        image = image.resize((size, size), Image.BILINEAR)
    return np.asarray(image, dtype=np.float32)


def load_image(path, size=IMAGE_SIZE):
    try:
        return resize_image(_decode_rgb(path), size)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise BatchLoadError(path, exc) from exc


def num_batches(manifest, split, batch_size):
    return math.ceil(len(manifest.split(split)) / batch_size)


def load_batch(manifest, split, batch_index, batch_size, workers=1):
    """Decode one batch of a split in manifest order; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    members = manifest.split(split)
    start = batch_index * batch_size
    if batch_index < 0 or start >= len(members):
        raise IndexError(f"batch {batch_index} out of range for {split!r} ({len(members)} records)")
    chunk = members[start:start + batch_size]
    paths = [r.path for r in chunk]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(load_image, paths))
    else:
        images = [load_image(p) for p in paths]

    labels = np.zeros((len(chunk), len(manifest.class_names)), dtype=np.float32)
    labels[np.arange(len(chunk)), [r.label_index for r in chunk]] = 1.0
    return ImageBatch(
        np.stack(images), labels, False, np.arange(start, start + len(chunk)), paths
    )


def flip_decisions(indices, flip_probability, seed=0, epoch=0):
    """Per-record flip draws keyed by (seed, epoch, index), independent of batching."""
    return np.array(
        [np.random.default_rng([seed, epoch, int(i)]).random() < flip_probability for i in indices],
        dtype=bool,
    )


def preprocess(batch, training_mode, flip_probability=0.5, normalization=None, seed=0, epoch=0):
    """Normalize pixels and, in training mode only, mirror images horizontally."""
    normalization = normalization or ScalarNormalization()
    pixels = normalization(batch.pixels)
    if training_mode and flip_probability > 0:
        indices = batch.indices if batch.indices is not None else np.arange(len(pixels))
        flips = flip_decisions(indices, flip_probability, seed, epoch)
        pixels[flips] = pixels[flips, :, ::-1, :]
    return ImageBatch(pixels, batch.labels, training_mode, batch.indices, batch.paths)
