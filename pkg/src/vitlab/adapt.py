"""Adapting pretrained checkpoints to a new patch size, dimensionality and class count.

Every function returns a new :class:`Checkpoint` and never mutates its input.
Tensors that an operation does not touch are shared copies of the input
bytes, so identity adaptations are bit-exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .interp import resample
from .vit import PatchSpec, trunc_normal

MODES = ("auto", "bilinear", "trilinear")


def _is_3d(ckpt: Checkpoint) -> bool:
    return ckpt.tensors["patch_embed.weight"].ndim == 5


def resample_patch_embedding_2d(ckpt: Checkpoint, target_p: int, fresh_init: bool = False,
                                seed: int = 0) -> Checkpoint:
    """Resize the 2D patch-projection kernel ``(p, p, C, d)`` to ``target_p``.

    The spatial taps are resampled with half-pixel bilinear weights and then
    multiplied by ``(p_src / target_p) ** 2`` so that a constant input patch
    produces the same response. ``fresh_init`` discards the source kernel and
    draws a new one uniformly in ``+-1/sqrt(fan_in)``.
    """
    if target_p <= 0:
        raise ValueError(f"target patch size must be positive, got {target_p}")
    kernel = ckpt.tensors["patch_embed.weight"]
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"expected a square 2D kernel (p, p, C, d), got {kernel.shape}")
    p_src = kernel.shape[0]
    if target_p == p_src and not fresh_init:
        return ckpt.copy()
    out = ckpt.copy()
    if fresh_init:
        C, d = kernel.shape[2:]
        bound = 1.0 / math.sqrt(target_p * target_p * C)
        rng = np.random.default_rng(seed)
        new = rng.uniform(-bound, bound, size=(target_p, target_p, C, d))
    else:
        new = resample(kernel.astype(np.float64), (0, 1), (target_p, target_p), align_corners=False)
        new = new * (p_src / target_p) ** 2
    out.tensors["patch_embed.weight"] = new.astype(np.float32)
    out.meta["patch_size"] = int(target_p)
    return out


def inflate_patch_embedding_3d(ckpt: Checkpoint, depth_p: int, D: int = 28, normalize: bool = True) -> Checkpoint:
    """Repeat a 2D kernel ``depth_p`` times along a new leading depth axis.

    With ``normalize`` each copy is divided by ``depth_p``, so a volume made
    by stacking one slice projects to the same tokens as that slice. A
    checkpoint that is already 3D is returned unchanged.
    """
    if depth_p < 1 or D % depth_p:
        raise ValueError(f"depth patch size {depth_p} does not divide depth D={D}")
    if _is_3d(ckpt):
        return ckpt.copy()
    kernel = ckpt.tensors["patch_embed.weight"].astype(np.float64)
    new = np.repeat(kernel[None], depth_p, axis=0)
    if normalize:
        new = new / depth_p
    out = ckpt.copy()
    out.tensors["patch_embed.weight"] = new.astype(np.float32)
    out.meta["dims"] = 3
    out.meta["patch_depth"] = int(depth_p)
    out.meta["image_size"] = [int(D)] + list(out.meta["image_size"])[-2:]
    return out


def _source_grid(ckpt: Checkpoint) -> tuple:
    n = ckpt.tensors["pos_embed"].shape[0] - 1
    grid = tuple(ckpt.meta.get("grid", ()))
    if len(grid) == 3 and int(np.prod(grid)) == n:
        return grid
    side = math.isqrt(max(n, 0))
    if n < 1 or side * side != n:
        raise ValueError(f"positional embeddings hold {n} patch tokens, which is not a square grid")
    return (side, side)


def interpolate_positional_embeddings(ckpt: Checkpoint, target_grid: Sequence[int], mode: str = "auto") -> Checkpoint:
    """Resample grid positional embeddings to ``target_grid`` (align-corners).

    The class-token row is carried over unchanged. For a 3D target from a 2D
    source the in-plane grid is stacked as a single depth slice and the
    stack is resampled trilinearly in one pass.
    """
    if mode not in MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    target = tuple(int(g) for g in target_grid)
    if len(target) not in (2, 3) or min(target) < 1:
        raise ValueError(f"target grid must have 2 or 3 positive extents, got {target_grid}")
    expected = "bilinear" if len(target) == 2 else "trilinear"
    if mode != "auto" and mode != expected:
        raise ValueError(f"{mode} interpolation does not fit a {len(target)}D grid")
    src_grid = _source_grid(ckpt)
    if len(src_grid) == 3 and len(target) == 2:
        raise ValueError("cannot interpolate a 3D positional grid down to 2D")
    out = ckpt.copy()
    if src_grid == target:
        out.meta["grid"] = list(target)
        return out
    pos = ckpt.tensors["pos_embed"]
    d = pos.shape[1]
    field = pos[1:].astype(np.float64).reshape(src_grid + (d,))
    if len(target) == 3 and len(src_grid) == 2:
        field = field[None]
    field = resample(field, tuple(range(len(target))), target, align_corners=True)
    out.tensors["pos_embed"] = np.concatenate([pos[:1], field.reshape(-1, d).astype(np.float32)], axis=0)
    out.meta["grid"] = list(target)
    return out


def replace_classification_head(ckpt: Checkpoint, K: int, seed: int = 0, reuse: bool = False) -> Checkpoint:
    """Fresh ``d x K`` head (truncated normal, std 0.02) with zero bias.

    With ``reuse`` and an unchanged class count the existing head is kept.
    """
    if K < 2:
        raise ValueError(f"a classification head needs K >= 2 classes, got {K}")
    out = ckpt.copy()
    if reuse and ckpt.tensors["head.weight"].shape[1] == K:
        return out
    d = ckpt.tensors["head.weight"].shape[0]
    rng = np.random.default_rng(seed)
    out.tensors["head.weight"] = trunc_normal(rng, (d, K), 0.02).astype(np.float32)
    out.tensors["head.bias"] = np.zeros(K, dtype=np.float32)
    out.meta["num_classes"] = int(K)
    return out


@dataclass(frozen=True)
class AdaptationPlan:
    target: PatchSpec
    num_classes: int
    mode: str = "auto"
    normalize_inflation: bool = True
    fresh_patch_embed: bool = False
    reuse_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown interpolation mode {self.mode!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


def adapt(ckpt: Checkpoint, plan: AdaptationPlan) -> Checkpoint:
    """Apply ``plan`` end to end; applying it to its own output is a no-op."""
    spec = plan.target
    if ckpt.meta["in_chans"] != spec.C:
        raise ValueError(f"checkpoint expects {ckpt.meta['in_chans']} channels, target has {spec.C}")
    out = ckpt
    kernel = ckpt.tensors["patch_embed.weight"]
    if _is_3d(ckpt):
        if spec.dims != 3 or set(kernel.shape[:3]) != {spec.p}:
            raise ValueError(f"cannot re-patch a 3D kernel {kernel.shape[:3]} to {spec.dims}D p={spec.p}")
    else:
        # fresh init happens once: a kernel already at the target size is kept
        fresh = plan.fresh_patch_embed and kernel.shape[0] != spec.p
        out = resample_patch_embedding_2d(out, spec.p, fresh_init=fresh, seed=plan.seed)
        out.meta["image_size"] = [spec.H, spec.W]
        if spec.dims == 3:
            out = inflate_patch_embedding_3d(out, spec.p, spec.D, plan.normalize_inflation)
    out = interpolate_positional_embeddings(out, spec.grid, plan.mode)
    out = replace_classification_head(out, plan.num_classes, plan.seed, reuse=plan.reuse_head)
    out.validate()
    return out
