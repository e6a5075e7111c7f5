"""Depth-driven foreground/background splitting.

A depth map assigns every pixel a value in [0, 1] — 1 meaning closest to the
camera. An image I splits into a foreground I * D and a background I * (1 - D)
(elementwise, broadcast across channels), so the two regions always sum back
to the original image. The depth map is a constant of the computation: masking
is differentiable with respect to the image only.
"""
from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from .diffcore import DTYPE, ShapeError, Tensor4, mul

__all__ = [
    "DepthRangeError",
    "depth_from_8bit",
    "validate_depth",
    "region_masks",
    "split",
]


class DepthRangeError(ValueError):
    """A depth value lies outside [0, 1]; the message names the coordinate."""


def depth_from_8bit(raw: np.ndarray) -> np.ndarray:
    """Map an 8-bit depth image to [0, 1] floats (255 -> 1.0)."""
    arr = np.asarray(raw)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 depth data, got dtype {arr.dtype}")
    return (arr.astype(np.float64) / 255.0).astype(DTYPE)


def validate_depth(values: np.ndarray, policy: str = "reject") -> np.ndarray:
    """Return a float32 copy of ``values`` guaranteed to lie in [0, 1].

    ``policy="reject"`` raises :class:`DepthRangeError` naming the first
    offending coordinate; ``policy="clamp"`` silently clips instead.
    """
    if policy not in ("reject", "clamp"):
        raise ValueError(f"unknown depth policy {policy!r}; use 'reject' or 'clamp'")
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"depth must be (H, W) or (N, H, W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DepthRangeError(f"depth{tuple(int(i) for i in bad)} is not finite")
    if policy == "clamp":
        return np.clip(arr, 0.0, 1.0)
    out_of_range = (arr < 0.0) | (arr > 1.0)
    if out_of_range.any():
        bad = np.argwhere(out_of_range)[0]
        idx = tuple(int(i) for i in bad)
        raise DepthRangeError(f"depth{list(idx)} = {float(arr[idx]):g} outside [0, 1]")
    return arr


def _broadcast_depth(depth: np.ndarray, batch: int, channels: int) -> np.ndarray:
    if depth.ndim == 2:
        d = np.broadcast_to(depth, (batch, channels) + depth.shape)
    elif depth.ndim == 3:
        if depth.shape[0] != batch:
            raise ShapeError(
                f"depth batch {depth.shape[0]} does not match image batch {batch} "
                f"(depth {depth.shape})"
            )
        d = np.broadcast_to(depth[:, None, :, :], (batch, channels) + depth.shape[1:])
    else:  # pragma: no cover - validate_depth already rejects
        raise ShapeError(f"depth must be (H, W) or (N, H, W), got {depth.shape}")
    return np.ascontiguousarray(d, dtype=DTYPE)


def region_masks(
    depth: np.ndarray,
    batch: int,
    channels: int,
    image_hw: Optional[Tuple[int, int]] = None,
    policy: str = "reject",
) -> Tuple[Tensor4, Tensor4]:
    """Constant (fg, bg) mask tensors: D and 1 - D, broadcast to (N, C, H, W)."""
    d = validate_depth(depth, policy=policy)
    hw = d.shape[-2:]
    if image_hw is not None and tuple(image_hw) != hw:
        raise ShapeError(f"depth spatial dims {hw} do not match image dims {tuple(image_hw)}")
    full = _broadcast_depth(d, batch, channels)
    return Tensor4(full), Tensor4(np.float32(1.0) - full)


def split(
    images: Tensor4,
    depth: Union[np.ndarray, "np.typing.ArrayLike"],
    policy: str = "reject",
) -> Tuple[Tensor4, Tensor4]:
    """Split a batch into (foreground, background) along the depth map.

    ``depth`` is (H, W) — shared by the whole batch — or (N, H, W). Gradients
    flow through the images only; the masks are constants.
    """
    n, c, h, w = images.shape
    d = np.asarray(depth)
    if d.shape[-2:] != (h, w):
        raise ShapeError(
            f"depth spatial dims {d.shape[-2:]} do not match image dims {(h, w)} "
            f"(images {images.shape}, depth {d.shape})"
        )
    fg_mask, bg_mask = region_masks(d, n, c, policy=policy)
    return mul(images, fg_mask), mul(images, bg_mask)
