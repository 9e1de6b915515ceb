"""Dataset ingestion and synthesis.

Loads MNIST-style IDX and CIFAR-10 binary files, generates Gaussian-mixture
feature sets and a small procedurally drawn digit set for desk-scale runs.
Images are scaled to [-1, 1] to match the generator's tanh output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .fileio import CodecError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray | None
    preset: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError(
                f"label count {len(self.labels)} != image count {len(self.images)}"
            )

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class SynthSpec:
    k: int
    dim: int
    means: np.ndarray  # (k, dim)
    std: float
    weights: np.ndarray  # (k,)
    n: int
    seed: int

    def validate(self):
        if self.n <= 0:
            raise ValueError(f"sample count must be positive, got {self.n}")
        means = np.asarray(self.means, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.shape != (self.k, self.dim):
            raise ValueError(f"means must be ({self.k}, {self.dim}), got {means.shape}")
        if weights.shape != (self.k,) or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per component")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {weights.sum()}")
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")
        return self


def scale_to_unit(pixels):
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (pixels.astype(np.float32) / 255.0) * 2.0 - 1.0


def unscale(values):
    """Invert :func:`scale_to_unit` back to byte values."""
    return np.clip(np.rint((values + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def center_crop(images, size):
    h, w = images.shape[2], images.shape[3]
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image size {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return images[:, :, top : top + size, left : left + size]


def downsample(images, factor):
    """Area-average downsample by an integer factor."""
    n, c, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"size {h}x{w} not divisible by factor {factor}")
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


# ---------------------------------------------------------------------------
# IDX / CIFAR loaders


def _read_idx(path, expect_magic, what):
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise CodecError(f"truncated {what} file: no magic")
        (magic,) = struct.unpack(">I", head)
        if magic != expect_magic:
            raise CodecError(
                f"bad {what} magic: expected {expect_magic:#010x}, got {magic:#010x}"
            )
        ndim = magic & 0xFF
        raw_dims = fh.read(4 * ndim)
        if len(raw_dims) != 4 * ndim:
            raise CodecError(f"truncated {what} file: incomplete dimension fields")
        dims = struct.unpack(f">{ndim}I", raw_dims)
        count = int(np.prod(dims, dtype=np.int64))
        payload = fh.read(count)
        if len(payload) != count:
            raise CodecError(
                f"truncated {what} file: expected {count} payload bytes, got {len(payload)}"
            )
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, crop=None, preset="idx"):
    """Load big-endian IDX images (and labels), scaled to [-1, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "IDX image")
    images = scale_to_unit(images)[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "IDX label").astype(np.int64)
        if len(labels) != len(images):
            raise CodecError(
                f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
            )
    if crop is not None:
        images = center_crop(images, crop)
    return ImageDataset(np.ascontiguousarray(images), labels, preset)


def write_idx_images(path, images_u8):
    """Write (N, H, W) uint8 images in IDX format (test fixtures, synth sets)."""
    n, h, w = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


def load_cifar_bin(paths, preset="cifar10"):
    """Concatenate CIFAR-10 binary batch files into one dataset."""
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % RECORD_BYTES:
            raise CodecError(
                f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    return ImageDataset(
        scale_to_unit(np.concatenate(images)), np.concatenate(labels), preset
    )


# ---------------------------------------------------------------------------
# synthetic feature mixtures


def gauss_spec(k=3, dim=8, std=1.0, sep=6.0, weights=None, n=3000, seed=0):
    """Mixture spec with component means pairwise ``sep * std`` apart.

    Means sit on a regular simplex, so every pair of components has the same
    separation.
    """
    if k > dim + 1:
        raise ValueError(f"need dim >= k-1 for a regular simplex, got k={k}, dim={dim}")
    corners = np.eye(k, dim)
    corners -= corners.mean(axis=0)
    # scale so pairwise distances are exactly sep * std
    d0 = np.linalg.norm(corners[0] - corners[1])
    means = corners * (sep * std / d0)
    if weights is None:
        weights = np.full(k, 1.0 / k)
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    return SynthSpec(k=k, dim=dim, means=means, std=std, weights=weights, n=n, seed=seed)


def synth_gaussians(spec: SynthSpec):
    """Sample the mixture; returns (features (N, dim) float32, labels)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = rng.choice(spec.k, size=spec.n, p=np.asarray(spec.weights, dtype=np.float64))
    points = rng.standard_normal((spec.n, spec.dim)) * spec.std
    points += np.asarray(spec.means, dtype=np.float64)[labels]
    return points.astype(np.float32), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# procedural digit-like glyphs (desk-scale stand-in for handwriting sets)


def _glyph(cls, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 - 0.5 + rng.uniform(-1.0, 1.0)
    cy = size / 2 - 0.5 + rng.uniform(-1.0, 1.0)
    thick = rng.uniform(0.9, 1.6)
    img = np.zeros((size, size))
    if cls == 0:
        # ring
        r = size * rng.uniform(0.28, 0.36)
        dist = np.sqrt((xx - cx) ** 2 + ((yy - cy) * rng.uniform(0.8, 1.0)) ** 2)
        img = np.exp(-((dist - r) ** 2) / (2 * thick**2))
    elif cls == 1:
        # near-vertical stroke
        slope = rng.uniform(-0.25, 0.25)
        dist = np.abs((xx - cx) - slope * (yy - cy))
        img = np.exp(-(dist**2) / (2 * thick**2))
        img[yy < size * 0.12] = 0
        img[yy > size * 0.88] = 0
    else:
        # top bar, diagonal, bottom bar
        top = np.exp(-((yy - size * 0.22 - rng.uniform(-1, 1)) ** 2) / (2 * thick**2))
        top[np.abs(xx - cx) > size * 0.32] = 0
        bot = np.exp(-((yy - size * 0.8 - rng.uniform(-1, 1)) ** 2) / (2 * thick**2))
        bot[np.abs(xx - cx) > size * 0.32] = 0
        diag = np.abs((xx - cx) + (yy - cy) * rng.uniform(0.45, 0.7))
        mid = np.exp(-(diag**2) / (2 * thick**2))
        mid[(yy < size * 0.2) | (yy > size * 0.82)] = 0
        img = np.maximum(np.maximum(top, bot), mid)
    img += rng.normal(0, 0.04, size=(size, size))
    return np.clip(img, 0.0, 1.0)


def synth_digits(n=3000, size=14, classes=(0, 1, 2), seed=0, preset="mnist-mini"):
    """Procedural glyph dataset: ring / stroke / zigzag, one style per class."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(classes), size=n)
    images = np.empty((n, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        images[i] = np.rint(_glyph(int(classes[lab]), size, rng) * 255).astype(np.uint8)
    return ImageDataset(
        scale_to_unit(images)[:, None, :, :], labels.astype(np.int64), preset
    )


def mnist_mini_from_idx(images_path, labels_path, n=3000, classes=(0, 1, 2), seed=0):
    """Build the desk-scale digit set from real IDX files: filter classes,
    downsample 28 -> 14, take the first n (seed-shuffled)."""
    ds = load_idx(images_path, labels_path)
    mask = np.isin(ds.labels, classes)
    images, labels = ds.images[mask], ds.labels[mask]
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.asarray([remap[int(v)] for v in labels], dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(images))[:n]
    images = downsample(images[order], 2).astype(np.float32)
    return ImageDataset(np.ascontiguousarray(images), labels[order], "mnist-mini")
