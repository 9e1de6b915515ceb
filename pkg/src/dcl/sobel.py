"""Constant-kernel edge front-end placed before the discriminator.

RGB input is collapsed to luminance by a pointwise convolution with fixed
weights, run through depthwise horizontal/vertical Sobel correlations, and
the two edge maps are concatenated after the original channels. Everything
is built from ordinary conv primitives with non-trainable kernels, so the
whole block stays differentiable with respect to the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_KX = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
_KY = tuple(zip(*_KX))
_GRAY = (0.299, 0.587, 0.114)  # BT.601 luminance


@dataclass(frozen=True)
class SobelKernels:
    kx: tuple = _KX
    ky: tuple = _KY
    gray_weights: tuple = _GRAY

    def validate(self):
        kx = np.asarray(self.kx, dtype=np.float64)
        ky = np.asarray(self.ky, dtype=np.float64)
        if kx.shape != (3, 3) or ky.shape != (3, 3):
            raise ValueError("sobel kernels must be 3x3")
        if np.abs(kx.sum(axis=1)).max() > 0:
            raise ValueError("each kx row must sum to 0")
        if not np.array_equal(ky, kx.T):
            raise ValueError("ky must be the transpose of kx")
        if abs(sum(self.gray_weights) - 1.0) > 1e-12:
            raise ValueError("gray weights must sum to 1")
        return self


DEFAULT_KERNELS = SobelKernels().validate()


def _gray_kernel(dtype, kernels):
    w = np.asarray(kernels.gray_weights, dtype=dtype).reshape(1, 3, 1, 1)
    return Tensor(w)


def _edge_kernel(dtype, kernels):
    w = np.stack([np.asarray(kernels.kx, dtype=dtype),
                  np.asarray(kernels.ky, dtype=dtype)])[:, None, :, :]
    return Tensor(w)  # (2, 1, 3, 3): dx then dy


def rgb_to_gray(image, kernels=DEFAULT_KERNELS):
    """Pointwise luminance: (N, 3, H, W) -> (N, 1, H, W)."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ad.ShapeError(f"rgb_to_gray expects (N, 3, H, W), got {image.shape}")
    return ad.conv2d(image, _gray_kernel(image.dtype, kernels), stride=1, padding="valid")


def sobel_edges(gray, kernels=DEFAULT_KERNELS):
    """Depthwise dx/dy correlations: (N, 1, H, W) -> (N, 2, H, W), zero-padded."""
    if gray.ndim != 4 or gray.shape[1] != 1:
        raise ad.ShapeError(f"sobel_edges expects (N, 1, H, W), got {gray.shape}")
    return ad.conv2d(gray, _edge_kernel(gray.dtype, kernels), stride=1, padding="same")


def augment_input(image, kernels=DEFAULT_KERNELS):
    """Concatenate the original channels with their dx/dy edge maps.

    3-channel input goes through the gray conversion first (5 output
    channels); 1-channel input feeds the edge filters directly (3 outputs).
    """
    channels = image.shape[1]
    if channels == 3:
        gray = rgb_to_gray(image, kernels)
    elif channels == 1:
        gray = image
    else:
        raise ad.ShapeError(
            f"augment_input supports 1 or 3 channels, got {channels} in {image.shape}"
        )
    edges = sobel_edges(gray, kernels)
    return ad.concat([image, edges], axis=1)


class SobelFrontend:
    """Layer-shaped wrapper so models can drop the front-end in line."""

    def __init__(self, kernels=DEFAULT_KERNELS):
        self.kernels = kernels

    def params(self):
        return []

    def forward(self, x, ctx):
        return augment_input(x, self.kernels)
