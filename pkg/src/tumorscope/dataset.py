"""Image ingestion, preprocessing, stratified splitting and synthetic data.

Preprocessing follows a fixed chain: single channel, fixed square size,
values scaled to [0, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import ImageDecodeError, read_image
from .rng import child_seed, make_rng

log = logging.getLogger(__name__)

MANIFEST_HEADER = "tumorscope-manifest v1"
LUMA = (0.299, 0.587, 0.114)
MAX_FAILURE_FRACTION = 0.10
DEFAULT_SIZE = 32


class DatasetError(ValueError):
    pass


@dataclass
class RawImage:
    id: str
    pixels: np.ndarray  # HxW or HxWx3, integer samples
    maxval: int
    label: int


@dataclass
class LoadResult:
    records: list[RawImage]
    failures: list[tuple[str, str]]
    counts: dict[int, int]


# -- preprocessing --------------------------------------------------------------

def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """HxWx3 -> HxW by BT.601 luma; single-channel input is passed through."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr @ np.array(LUMA)
    raise DatasetError(f"unsupported channel layout {arr.shape}")


def resize(pixels: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (corners not aligned)."""
    out_w = out_h if out_w is None else out_w
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize(pixels: np.ndarray, maxval: float = 255) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise DatasetError(f"pixel values outside [0, {maxval}]")
    return np.clip(arr / maxval, 0.0, 1.0)


def preprocess(pixels: np.ndarray, size: int = DEFAULT_SIZE, maxval: float = 255) -> np.ndarray:
    """grayscale -> SxS -> [0, 1]. Feeding the result back with ``maxval=1`` is a no-op."""
    return normalize(resize(to_grayscale(pixels), size), maxval)


# -- loading --------------------------------------------------------------------

def load_directory(root, positive: str = "yes", negative: str = "no") -> LoadResult:
    """Read ``root/<negative>/*`` (label 0) and ``root/<positive>/*`` (label 1).

    Undecodable files are logged and skipped unless more than 10% of all
    files fail.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    records: list[RawImage] = []
    failures: list[tuple[str, str]] = []
    counts = {0: 0, 1: 0}
    total = 0
    for label, sub in ((0, negative), (1, positive)):
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"class directory not found: {d}")
        for path in sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith(".")):
            total += 1
            try:
                pixels, maxval = read_image(path)
            except (ImageDecodeError, OSError) as exc:
                failures.append((str(path), str(exc)))
                log.warning("skipping %s: %s", path, exc)
                continue
            records.append(RawImage(f"{sub}/{path.name}", pixels, maxval, label))
            counts[label] += 1
    for label, sub in ((0, negative), (1, positive)):
        if counts[label] == 0:
            raise DatasetError(f"no decodable images in {root / sub}")
    if failures and len(failures) > MAX_FAILURE_FRACTION * total:
        raise DatasetError(f"{len(failures)} of {total} files failed to decode")
    log.info("loaded %d negative and %d positive images from %s", counts[0], counts[1], root)
    return LoadResult(records, failures, counts)


# -- splitting and manifests ----------------------------------------------------

@dataclass
class DatasetManifest:
    source: str
    target_size: int
    seed: int
    fraction: float
    entries: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for _, label, _ in self.entries:
            counts[label] += 1
        return counts

    def split_of(self) -> dict[str, str]:
        return {i: s for i, _, s in self.entries}

    def to_text(self) -> str:
        counts = self.class_counts
        lines = [
            MANIFEST_HEADER,
            f"# source={self.source}",
            f"# counts=0:{counts[0]},1:{counts[1]}",
            f"# target_size={self.target_size}",
            f"# seed={self.seed}",
            f"# fraction={self.fraction!r}",
        ]
        lines += [f"{i}\t{label}\t{s}" for i, label, s in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_text().encode("utf-8"))

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        lines = text.split("\n")
        if not lines or lines[0] != MANIFEST_HEADER:
            raise DatasetError("missing manifest header")
        meta: dict[str, str] = {}
        entries = []
        for n, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                meta[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in ("0", "1") or parts[2] not in ("train", "val"):
                raise DatasetError(f"manifest line {n} malformed: {line!r}")
            entries.append((parts[0], int(parts[1]), parts[2]))
        return cls(meta.get("source", ""), int(meta.get("target_size", DEFAULT_SIZE)),
                   int(meta.get("seed", 0)), float(meta.get("fraction", 0.8)), entries)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_bytes().decode("utf-8"))


def split(records, fraction: float = 0.8, seed: int = 42, source: str = "",
          target_size: int = DEFAULT_SIZE) -> DatasetManifest:
    """Stratified shuffle-split: floor(n * fraction) of each class to train, rest to val.

    ``records`` is any sequence of objects with ``id`` and ``label``, or of
    ``(id, label)`` pairs. Entry order follows the input order.
    """
    if not 0 < fraction < 1:
        raise DatasetError(f"fraction must be in (0, 1), got {fraction}")
    pairs = [(r.id, int(r.label)) if hasattr(r, "id") else (str(r[0]), int(r[1])) for r in records]
    ids = [i for i, _ in pairs]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate ids in records")
    rng = make_rng(seed)
    assignment: dict[str, str] = {}
    for label in (0, 1):
        members = sorted(i for i, y in pairs if y == label)
        if not members:
            raise DatasetError(f"class {label} has no records")
        n_train = math.floor(len(members) * fraction + 1e-9)
        order = rng.permutation(len(members))
        for rank, idx in enumerate(order):
            assignment[members[idx]] = "train" if rank < n_train else "val"
    entries = [(i, y, assignment[i]) for i, y in pairs]
    return DatasetManifest(source, target_size, seed, fraction, entries)


# -- in-memory dataset ----------------------------------------------------------

@dataclass
class Dataset:
    """Preprocessed images as an [N,1,S,S] float32 stack with aligned metadata."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray
    splits: list[str]
    blobs: list | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def subset(self, which: str) -> "Dataset":
        idx = [i for i, s in enumerate(self.splits) if s == which]
        return self.take(idx)

    def take(self, idx) -> "Dataset":
        idx = list(idx)
        blobs = [self.blobs[i] for i in idx] if self.blobs is not None else None
        return Dataset([self.ids[i] for i in idx], self.images[idx], self.labels[idx],
                       [self.splits[i] for i in idx], blobs)


def build_dataset(records, manifest: DatasetManifest, size: int = DEFAULT_SIZE,
                  blobs: list | None = None) -> Dataset:
    split_of = manifest.split_of()
    images = np.stack([preprocess(r.pixels, size, r.maxval) for r in records])[:, None]
    return Dataset(
        [r.id for r in records],
        images.astype(np.float32),
        np.array([r.label for r in records], dtype=np.int64),
        [split_of[r.id] for r in records],
        blobs,
    )


# -- synthetic stand-in data ----------------------------------------------------

@dataclass(frozen=True)
class Blob:
    """Bright Gaussian lesion; ``radius`` is the ground-truth extent (sigma = radius / 2)."""

    cx: float
    cy: float
    radius: float
    amplitude: float


@dataclass
class SyntheticImage(RawImage):
    texture_seed: int = 0
    blob: Blob | None = None


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    half = max(1, int(3 * sigma))
    x = np.arange(-half, half + 1)
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    padded = np.pad(img, half, mode="reflect")
    rows = np.apply_along_axis(np.convolve, 1, padded, k, mode="valid")
    return np.apply_along_axis(np.convolve, 0, rows, k, mode="valid")


def _ellipse(size: int) -> tuple[np.ndarray, float, float]:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    a, b = 0.42 * size, 0.36 * size
    c = size / 2
    return ((xx - c) / b) ** 2 + ((yy - c) / a) ** 2 <= 1.0, a, b


def render_texture(texture_seed: int, size: int) -> np.ndarray:
    """Smooth low-frequency 'brain' texture in an elliptical mask, values in [0, 1]."""
    rng = make_rng(texture_seed)
    noise = _gaussian_blur(rng.standard_normal((size, size)), sigma=size / 12)
    noise = (noise - noise.mean()) / (noise.std() + 1e-12)
    tissue = 0.40 + 0.07 * noise
    mask, _, _ = _ellipse(size)
    return np.where(mask, np.clip(tissue, 0.15, 0.65), 0.02)


def render_blob(blob: Blob, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (xx - blob.cx) ** 2 + (yy - blob.cy) ** 2
    sigma = blob.radius / 2
    return blob.amplitude * np.exp(-d2 / (2 * sigma ** 2))


def blob_mask(blob: Blob, size: int, out_size: int | None = None) -> np.ndarray:
    """Pixels of an ``out_size`` grid whose centers fall within the blob radius."""
    out_size = size if out_size is None else out_size
    scale = size / out_size
    yy, xx = (np.mgrid[0:out_size, 0:out_size] + 0.5) * scale
    return (xx - blob.cx) ** 2 + (yy - blob.cy) ** 2 <= blob.radius ** 2


def render_sample(texture_seed: int, size: int, blob: Blob | None = None) -> np.ndarray:
    """uint8 image: texture, plus the blob when given."""
    img = render_texture(texture_seed, size)
    if blob is not None:
        img = img + render_blob(blob, size)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _draw_blob(rng: np.random.Generator, size: int) -> Blob:
    _, a, b = _ellipse(size)
    radius = rng.uniform(0.14, 0.20) * size
    while True:
        # keep the whole blob inside the tissue ellipse
        cx = rng.uniform(size / 2 - b + radius, size / 2 + b - radius)
        cy = rng.uniform(size / 2 - a + radius, size / 2 + a - radius)
        if ((cx - size / 2) / (b - radius)) ** 2 + ((cy - size / 2) / (a - radius)) ** 2 <= 1:
            return Blob(float(cx), float(cy), float(radius), float(rng.uniform(0.45, 0.6)))


def synthesize(count: int, size: int = 64, seed: int = 0) -> list[SyntheticImage]:
    """``count`` negatives then ``count`` positives; positives carry their blob."""
    if count < 1:
        raise DatasetError("count must be at least 1")
    out: list[SyntheticImage] = []
    for label, sub in ((0, "no"), (1, "yes")):
        for i in range(count):
            tseed = child_seed(seed, label, i, 0)
            blob = _draw_blob(make_rng(child_seed(seed, label, i, 1)), size) if label else None
            out.append(SyntheticImage(f"{sub}/syn_{i:05d}.pgm", render_sample(tseed, size, blob),
                                      255, label, tseed, blob))
    return out


def synthetic_dataset(count: int, size: int = 64, seed: int = 0, target_size: int = DEFAULT_SIZE,
                      fraction: float = 0.8, split_seed: int = 42) -> tuple[Dataset, DatasetManifest]:
    records = synthesize(count, size, seed)
    manifest = split(records, fraction, split_seed, source=f"synthetic:{count}x{size}@{seed}",
                     target_size=target_size)
    return build_dataset(records, manifest, target_size, blobs=[r.blob for r in records]), manifest


def load_dataset(root, positive: str = "yes", negative: str = "no", target_size: int = DEFAULT_SIZE,
                 fraction: float = 0.8, split_seed: int = 42) -> tuple[Dataset, DatasetManifest]:
    loaded = load_directory(root, positive, negative)
    manifest = split(loaded.records, fraction, split_seed, source=str(root), target_size=target_size)
    return build_dataset(loaded.records, manifest, target_size), manifest
