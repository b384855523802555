"""Spatial basis extractors and the spatial difference decomposition modules.

The eight 3x3 difference kernels each hold +1 at one neighbour and -1 at the
centre; neighbours run clockwise from the top-left, and a dilation ``d``
places the neighbour ``d`` pixels away. Rotating any kernel by 90 degrees
gives another member of the bank, which is what makes ``sd2m`` rotation
equivariant.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .bdm import bdm_forward
from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    avg_pool2,
    concat,
    conv2d,
    conv_bank,
    max_pool2,
    reshape,
    slice_axis,
)

DEFAULT_DILATIONS = (1, 3)

NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _difference_bank() -> np.ndarray:
    bank = np.zeros((8, 3, 3))
    for k, (di, dj) in enumerate(NEIGHBOURS):
        bank[k, 1, 1] = -1.0
        bank[k, 1 + di, 1 + dj] = 1.0
    return bank


DIFFERENCE_KERNELS = _difference_bank()

DOWNSAMPLE_KERNELS = np.array([
    [[1.0, 1.0], [-1.0, -1.0]],
    [[1.0, -1.0], [1.0, -1.0]],
    [[1.0, -1.0], [-1.0, 1.0]],
])

HAAR_KERNELS = 0.5 * np.array([
    [[1.0, 1.0], [1.0, 1.0]],
    [[1.0, 1.0], [-1.0, -1.0]],
    [[1.0, -1.0], [1.0, -1.0]],
    [[1.0, -1.0], [-1.0, 1.0]],
])


def _require_even(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} input must be [B,C,H,W], got dims {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{op} needs even H and W, got H={x.shape[2]}, W={x.shape[3]}")


def _flatten_bases(y: Tensor) -> Tensor:
    B, C, K, H, W = y.shape
    return reshape(y, (B, C, K, H * W))


def dfem(x: Tensor, dilations: Sequence[int] = DEFAULT_DILATIONS, kernels: np.ndarray = DIFFERENCE_KERNELS) -> Tensor:
    """Difference basis maps [B,C,8n,HW]: every kernel at d1, then every kernel at d2, ..."""
    return _flatten_bases(conv_bank(x, kernels, dilations, stride=1, padding="replicate"))


def fem_1x1(x: Tensor, weight: Tensor) -> Tensor:
    """Original-feature branch: bias-free 1x1 convolution flattened to [B,C,1,HW]."""
    y = conv2d(x, weight)
    B, C, H, W = y.shape
    return reshape(y, (B, C, 1, H * W))


def sd2m(x: Tensor, weight: Tensor, dilations: Sequence[int] = DEFAULT_DILATIONS,
         orthogonal: bool = False) -> Tensor:
    """Resolution-preserving spatial difference decomposition."""
    B, C, H, W = x.shape
    out = bdm_forward(fem_1x1(x, weight), dfem(x, dilations), orthogonal=orthogonal)
    return reshape(out, (B, C, H, W))


def dfed(x: Tensor) -> Tensor:
    """Downsampling basis [B,C,4,HW/4]: max-pool map then the three stride-2 difference maps."""
    _require_even(x, "dfed")
    B, C, H, W = x.shape
    pooled = reshape(max_pool2(x), (B, C, 1, H * W // 4))
    diffs = _flatten_bases(conv_bank(x, DOWNSAMPLE_KERNELS, (1,), stride=2))
    return concat([pooled, diffs], axis=2)


def haar_bfem(x: Tensor) -> Tensor:
    """Haar analysis bands [B,C,4,HW/4] (LL, then the three detail bands)."""
    _require_even(x, "haar_bfem")
    return _flatten_bases(conv_bank(x, HAAR_KERNELS, (1,), stride=2))


def haar_inverse(bands: np.ndarray, h: int, w: int) -> np.ndarray:
    """Rebuild [B,C,h,w] from haar_bfem output; the 2x2 Haar transform is orthogonal."""
    B, C = bands.shape[:2]
    coeffs = bands.reshape(B, C, 4, h // 2, w // 2)
    blocks = np.einsum("bckyx,kij->bcyixj", coeffs, HAAR_KERNELS.astype(bands.dtype))
    return blocks.reshape(B, C, h, w)


def sd3m(x: Tensor, weight: Tensor, orthogonal: bool = False, basis: str = "dfed") -> Tensor:
    """Downsampling spatial difference decomposition, output [B,C,H/2,W/2]."""
    _require_even(x, "sd3m")
    B, C, H, W = x.shape
    t = fem_1x1(avg_pool2(x), weight)
    p = haar_bfem(x) if basis == "haar" else dfed(x)
    out = bdm_forward(t, p, orthogonal=orthogonal)
    return reshape(out, (B, C, H // 2, W // 2))


def split_sizes(channels: int) -> tuple:
    """Near-equal three-way channel split: (ceil(C/3), ceil(rest/2), remainder)."""
    if channels < 3:
        raise ShapeError(f"inception_pool needs at least 3 channels, got {channels}")
    g1 = math.ceil(channels / 3)
    g2 = math.ceil((channels - g1) / 2)
    return g1, g2, channels - g1 - g2


def inception_pool(x: Tensor, weight: Tensor, orthogonal: bool = False, basis: str = "dfed") -> Tensor:
    """Max-pool / avg-pool / sd3m on three channel groups, concatenated in that order.

    ``weight`` is the sd3m 1x1 weight for the third group, [g3,g3,1,1].
    """
    _require_even(x, "inception_pool")
    g1, g2, g3 = split_sizes(x.shape[1])
    if weight.shape != (g3, g3, 1, 1):
        raise ShapeError(f"inception_pool sd3m weight must be {(g3, g3, 1, 1)}, got {weight.shape}")
    a = max_pool2(slice_axis(x, 1, 0, g1))
    b = avg_pool2(slice_axis(x, 1, g1, g1 + g2))
    c = sd3m(slice_axis(x, 1, g1 + g2, g1 + g2 + g3), weight, orthogonal=orthogonal, basis=basis)
    return concat([a, b, c], axis=1)
