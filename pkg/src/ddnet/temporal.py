"""Temporal basis extraction and the temporal difference decomposition module.

A frame stack is an ordered list of N same-shaped [B,C,H,W] tensors; the
last entry is the current frame and the others are reference frames.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .bdm import bdm_forward
from .spatial import fem_1x1
from .tensor import ShapeError, Tensor, concat, reshape, stack, sub


def _validate(frames: Sequence[Tensor]) -> None:
    if len(frames) < 2:
        raise ShapeError(f"a frame stack needs N >= 2 frames, got {len(frames)}")
    dims = frames[0].shape
    if len(dims) != 4:
        raise ShapeError(f"frames must be [B,C,H,W], got dims {dims}")
    for k, f in enumerate(frames):
        if f.shape != dims:
            raise ShapeError(f"frame {k} has dims {f.shape}, expected {dims}")


def tfem(frames: Sequence[Tensor]) -> Tensor:
    """Temporal bases [B,C,N,HW]: current minus each reference frame, then the current frame."""
    _validate(frames)
    current = frames[-1]
    bases = [sub(current, ref) for ref in frames[:-1]] + [current]
    B, C, H, W = current.shape
    return reshape(stack(bases, axis=2), (B, C, len(frames), H * W))


def td2m(frames: Sequence[Tensor], weight: Tensor, orthogonal: bool = False) -> Tensor:
    """Fuse an N-frame stack into [B,C,H,W] by temporal difference decomposition.

    ``weight`` is the bias-free 1x1 kernel [C, N*C, 1, 1] applied to the
    channel concatenation of the frames.
    """
    _validate(frames)
    B, C, H, W = frames[0].shape
    if weight.shape != (C, len(frames) * C, 1, 1):
        raise ShapeError(f"td2m weight must be {(C, len(frames) * C, 1, 1)}, got {weight.shape}")
    t = fem_1x1(concat(list(frames), axis=1), weight)
    out = bdm_forward(t, tfem(frames), orthogonal=orthogonal)
    return reshape(out, (B, C, H, W))


def pad_window(frames: Sequence, n: int) -> list:
    """Left-pad a short sequence to ``n`` frames by repeating its earliest frame."""
    frames = list(frames)
    if not frames:
        raise ShapeError("empty frame sequence")
    if len(frames) >= n:
        return frames[-n:]
    return [frames[0]] * (n - len(frames)) + frames


def permute_td2m_weight(weight: np.ndarray, order: Sequence[int], channels: int) -> np.ndarray:
    """Reorder the frame blocks of a td2m 1x1 kernel to match a reordered stack."""
    blocks = weight.reshape(weight.shape[0], len(order), channels, 1, 1)
    return np.ascontiguousarray(blocks[:, list(order)].reshape(weight.shape))
