"""Analytic token and FLOP accounting for ViT configurations.

Two counting modes, both at one FLOP per multiply-accumulate:

``paper``
    dense projections only (qkv, attention output, MLP) over all tokens
    including the class token; attention matmuls, norms, activations,
    patch embedding and head are ignored.
``full``
    adds the two attention matmuls, the patch embedding and the head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Tuple

from .vit import PatchSpec, ViTConfig

MODES = ("paper", "full")


@dataclass(frozen=True)
class CostReport:
    T_patch: int
    T_total: int
    qkv: int
    attn_scores: int
    attn_apply: int
    proj: int
    mlp: int
    patch_embed: int
    head: int
    mode: str

    @property
    def macs(self) -> int:
        terms = self.qkv + self.proj + self.mlp
        if self.mode == "full":
            terms += self.attn_scores + self.attn_apply + self.patch_embed + self.head
        return terms

    @property
    def gflops(self) -> float:
        return self.macs / 1e9

    def as_dict(self) -> dict:
        out = asdict(self)
        out["gflops"] = self.gflops
        return out


def token_count(spec: PatchSpec) -> Tuple[int, int]:
    """``(T_patch, T_total)``; PatchSpec has already enforced divisibility."""
    return spec.num_patches, spec.num_patches + 1


def attention_macs(T: int, d: int, L: int = 1) -> int:
    """Scores (QK^T) plus weighted sum (AV) over ``T`` tokens."""
    return 2 * T * T * d * L


def model_flops(config: ViTConfig, mode: str = "paper") -> CostReport:
    if mode not in MODES:
        raise ValueError(f"unknown cost mode {mode!r}; expected one of {MODES}")
    spec = config.patch
    t_patch, t_total = token_count(spec)
    L, d = config.L, config.d
    per_matmul = L * t_total * d * t_total
    return CostReport(
        T_patch=t_patch,
        T_total=t_total,
        qkv=L * t_total * 3 * d * d,
        attn_scores=per_matmul,
        attn_apply=per_matmul,
        proj=L * t_total * d * d,
        mlp=L * t_total * 2 * config.mlp_ratio * d * d,
        patch_embed=t_patch * spec.patch_dim * d,
        head=d * config.num_classes,
        mode=mode,
    )


def ensemble_gflops(configs: Iterable[ViTConfig], mode: str = "paper") -> float:
    """Members run independently, so costs add."""
    return sum(model_flops(c, mode).gflops for c in configs)


def attention_scaling_ratio(N: int, dims: int) -> int:
    """Growth of attention cost over patch tokens when the patch edge shrinks by ``N``."""
    if N < 1:
        raise ValueError(f"shrink factor must be >= 1, got {N}")
    if dims not in (2, 3):
        raise ValueError(f"dims must be 2 or 3, got {dims}")
    return N ** (2 * dims)
