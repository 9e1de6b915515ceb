"""Run the trained discriminator over a dataset to emit feature matrices.

The clean matrix ``m`` comes from a rate-0 pass; the consistency variant
``m'`` from a low-dropout pass. Batchnorm always runs on its frozen running
statistics here, and dropout masks are keyed by (seed, layer, sample index)
so the result is independent of batch partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .nn import ForwardCtx
from . import fileio


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (N, d) float32
    dropout_rate: float
    source: str
    seed: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got {self.values.shape}")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def extract_features(disc, images, dropout_rate=0.0, seed=0, batch_size=256,
                     source=""):
    """Forward the dataset through the discriminator trunk, collecting M.

    ``images`` is an (N, C, H, W) array or an ImageDataset. Deterministic for
    a fixed seed; rate 0 has no stochasticity at all.
    """
    arr = images.images if hasattr(images, "images") else np.asarray(images)
    n = arr.shape[0]
    if arr.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got {arr.shape}")
    expected = disc.preset.image_channels
    if arr.shape[1] != expected:
        raise ValueError(
            f"dataset has {arr.shape[1]} channels but discriminator preset "
            f"{disc.preset.name!r} expects {expected}"
        )
    rows = []
    for start in range(0, n, batch_size):
        batch = arr[start : start + batch_size]
        ctx = ForwardCtx(
            training=False,
            dropout_rate=float(dropout_rate),
            sample_keys=np.arange(start, start + len(batch)),
            mask_seed=int(seed),
        )
        m = disc.features(Tensor(batch), ctx).data
        if not np.all(np.isfinite(m)):
            raise RuntimeError(f"non-finite activations in batch starting at {start}")
        rows.append(m.astype(np.float32, copy=False))
    values = np.concatenate(rows) if rows else np.zeros((0, disc.preset.feature_width),
                                                        dtype=np.float32)
    return FeatureMatrix(values, float(dropout_rate), source, int(seed))


def save_features(path, feats: FeatureMatrix):
    fileio.write_features(path, feats.values, feats.dropout_rate, feats.seed)


def load_features(path, source=""):
    values, rate, seed = fileio.read_features(path)
    return FeatureMatrix(values, rate, seed=seed, source=source or str(path))
