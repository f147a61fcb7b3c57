"""Datasets: a procedural filled-primitive generator, MNIST IDX ingestion,
and a generic image-directory loader, all emitting batches of N x C x H x W
floats in [0, 1].
"""

import gzip
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, UsageError

log = logging.getLogger(__name__)

DATASET_NAMES = ("shape", "mnist", "image_dir")
DEFAULT_COUNTS = {"train": 10000, "test": 1000}
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ImageBatch:
    """A batch of images plus optional integer labels."""

    data: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, np.float32)
        if self.data.ndim != 4 or self.data.shape[1] not in (1, 3):
            raise UsageError(f"image batches are N x C x H x W with C in (1, 3), got {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise UsageError("image values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise UsageError(f"labels must be one int per image, got {self.labels.shape}")

    def __len__(self):
        return self.data.shape[0]


@dataclass
class DatasetSpec:
    """Which dataset to load, at which resolution, from where."""

    name: str
    resolution: int = 0
    split: str = "train"
    root: str = "."
    seed: int = 0

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {DATASET_NAMES}")
        native = 64 if self.name == "image_dir" else 32
        if self.resolution == 0:
            self.resolution = native
        if self.resolution != native:
            raise ConfigError(f"dataset {self.name} is fixed at {native}x{native}, got {self.resolution}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")


def generate_shapes(count: int, seed) -> ImageBatch:
    """count 32x32 grayscale images, each one filled primitive (circle,
    square, or triangle) at a random center, size, and intensity on a black
    background.  Labels are the primitive index in that order.  Intensities
    sit on the 8-bit grid so a lossless save round-trips exactly."""
    if count < 1:
        raise UsageError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    size = 32
    yy, xx = np.mgrid[0:size, 0:size]
    data = np.zeros((count, 1, size, size), np.float32)
    labels = np.zeros(count, np.int64)
    for i in range(count):
        kind = int(rng.integers(0, 3))
        r = int(rng.integers(6, 13))
        cy = int(rng.integers(r + 1, size - r - 1))
        cx = int(rng.integers(r + 1, size - r - 1))
        value = int(rng.integers(64, 256)) / 255.0
        if kind == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        else:
            # upward triangle: apex at (cy - r, cx), base along y = cy + r
            t = (yy - (cy - r)) / (2.0 * r)
            half = np.floor(t * r)
            mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= half)
        data[i, 0][mask] = value
        labels[i] = kind
    return ImageBatch(data=data, labels=labels)


def _read_idx(path: Path) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes into an ndarray."""
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0 ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic at offset 0: {raw[:4].hex()}")
    if raw[2] != 0x08:
        raise FormatError(f"{path}: unsupported element type 0x{raw[2]:02x} at offset 2")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    expected = header_end + int(np.prod(dims, dtype=np.int64)) if ndim else header_end
    if len(raw) != expected:
        raise FormatError(f"{path}: payload ends at offset {len(raw)}, expected {expected} "
                          f"for dimensions {dims}")
    return np.frombuffer(raw, np.uint8, offset=header_end).reshape(dims)


def _find_idx_file(root: Path, prefix: str, kind: str) -> Path:
    ints = "idx3" if kind == "images" else "idx1"
    stems = [f"{prefix}-{kind}-{ints}-ubyte", f"{prefix}-{kind}.{ints}-ubyte"]
    candidates = [root / s for s in stems] + [root / (s + ".gz") for s in stems]
    for c in candidates:
        if c.is_file():
            return c
    raise UsageError(f"no {prefix} {kind} IDX file under {root}; tried "
                     + ", ".join(c.name for c in candidates))


def load_mnist(spec: DatasetSpec) -> ImageBatch:
    """Load one MNIST split from IDX files under the dataset root, scaled
    to [0, 1] and zero-padded from 28x28 to 32x32 centered."""
    root = Path(spec.root)
    if (root / "mnist").is_dir():
        root = root / "mnist"
    prefix = "train" if spec.split == "train" else "t10k"
    images = _read_idx(_find_idx_file(root, prefix, "images"))
    labels = _read_idx(_find_idx_file(root, prefix, "labels"))
    if images.ndim != 3:
        raise FormatError(f"image file has {images.ndim} dimensions, expected 3")
    if labels.ndim != 1:
        raise FormatError(f"label file has {labels.ndim} dimensions, expected 1")
    if images.shape[1:] != (28, 28):
        raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    scaled = images.astype(np.float32) / 255.0
    padded = np.zeros((images.shape[0], 1, 32, 32), np.float32)
    padded[:, 0, 2:30, 2:30] = scaled
    return ImageBatch(data=padded, labels=labels.astype(np.int64))


def _bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel-centered sampling; H x W x C
    float64 in, float64 out.  An integer 2x reduction degenerates to exact
    2x2 block averages."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis_coords(n_src, n_dst):
        s = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        i0 = np.clip(np.floor(s).astype(np.int64), 0, n_src - 1)
        i1 = np.minimum(i0 + 1, n_src - 1)
        frac = np.clip(s - i0, 0.0, 1.0)
        return i0, i1, frac

    r0, r1, rf = axis_coords(h, out_h)
    rows = image[r0] * (1.0 - rf)[:, None, None] + image[r1] * rf[:, None, None]
    c0, c1, cf = axis_coords(w, out_w)
    return rows[:, c0] * (1.0 - cf)[None, :, None] + rows[:, c1] * cf[None, :, None]


def load_image_dir(spec: DatasetSpec, resolution: int = 0) -> ImageBatch:
    """Load every readable image under the root in lexicographic name
    order: center-crop to square, bilinear-resize, RGB floats in [0, 1].
    resolution overrides the spec's size for tests and experiments."""
    root = Path(spec.root)
    if not root.is_dir():
        raise UsageError(f"image directory {root} does not exist")
    out = resolution or spec.resolution
    frames = []
    names = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    for path in names:
        try:
            with Image.open(path) as img:
                rgb = np.asarray(img.convert("RGB"), np.float64) / 255.0
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        h, w = rgb.shape[:2]
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        square = rgb[top: top + side, left: left + side]
        small = _bilinear_resize(square, out, out)
        frames.append(np.clip(small, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32))
    if not frames:
        raise FormatError(f"no readable images under {root}")
    return ImageBatch(data=np.stack(frames))


def save_png(path, image) -> None:
    """Write one image as 8-bit PNG; accepts H x W or C x H x W in [0, 1]."""
    arr = np.asarray(image, np.float64)
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        elif arr.shape[0] == 3:
            arr = arr.transpose(1, 2, 0)
        else:
            raise UsageError(f"expected 1 or 3 channels, got {arr.shape}")
    elif arr.ndim != 2:
        raise UsageError(f"expected 2 or 3 dimensions, got {arr.ndim}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(Path(path), format="PNG")


def batches(batch: ImageBatch, batch_size: int, shuffle_seed=None):
    """Yield mini-batches, shuffled when a seed is given, the final one
    possibly short.  The same seed always yields the same order."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    n = len(batch)
    order = (np.random.default_rng(shuffle_seed).permutation(n)
             if shuffle_seed is not None else np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start: start + batch_size]
        labels = batch.labels[idx] if batch.labels is not None else None
        yield ImageBatch(data=batch.data[idx], labels=labels)


def load_dataset(spec: DatasetSpec, count: int = 0) -> ImageBatch:
    """Dispatch on the spec name; count applies to the procedural generator
    and defaults to 10000 train / 1000 test."""
    if spec.name == "shape":
        n = count or DEFAULT_COUNTS[spec.split]
        return generate_shapes(n, [spec.seed, 0 if spec.split == "train" else 1])
    if spec.name == "mnist":
        return load_mnist(spec)
    return load_image_dir(spec)