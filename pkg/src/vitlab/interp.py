"""Separable linear resampling (bilinear / trilinear as tensor products)."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def linear_weights(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    """(n_out, n_in) matrix of 1D linear interpolation weights.

    With ``align_corners`` the end knots map onto each other; a single
    output sample reads knot 0. Otherwise sample centres are matched and
    coordinates are clamped to the valid range.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resample sizes must be positive, got {n_in} -> {n_out}")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    i = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    else:
        src = np.clip((i + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    t = src - lo
    rows = np.arange(n_out)
    w[rows, lo] += 1.0 - t
    w[rows, lo + 1] += t
    return w


def resample(arr: np.ndarray, axes: Sequence[int], sizes: Sequence[int], align_corners: bool = True) -> np.ndarray:
    """Linearly resample ``arr`` along each of ``axes`` to the matching size."""
    arr = np.asarray(arr)
    out = arr.astype(np.float64)
    for axis, n_out in zip(axes, sizes):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        w = linear_weights(n_in, n_out, align_corners)
        out = np.moveaxis(np.tensordot(w, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
    return np.ascontiguousarray(out, dtype=arr.dtype)
