"""Vision Transformer with variable 2D/3D patchification.

Pre-norm encoder blocks, a learnable class token at index 0 and learnable
positional embeddings. Weights live in a flat dict keyed by the canonical
checkpoint names (see :func:`canonical_names`); linear layers use the
``x @ W + b`` convention, so ``W`` has shape ``(in, out)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .interp import resample
from .tensor import Tensor


@dataclass(frozen=True)
class PatchSpec:
    """Patch edge ``p`` over an ``H x W`` image or ``D x H x W`` volume with ``C`` channels."""

    p: int
    H: int = 28
    W: int = 28
    D: Optional[int] = None
    C: int = 3

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"patch size must be positive, got p={self.p}")
        extents = {"H": self.H, "W": self.W}
        if self.D is not None:
            extents["D"] = self.D
        bad = {k: v for k, v in extents.items() if v % self.p}
        if bad:
            dims = ", ".join(f"{k}={v}" for k, v in extents.items())
            raise ValueError(f"patch size p={self.p} does not divide the input ({dims}); padding is not supported")

    @property
    def dims(self) -> int:
        return 2 if self.D is None else 3

    @property
    def grid(self) -> Tuple[int, ...]:
        if self.D is None:
            return (self.H // self.p, self.W // self.p)
        return (self.D // self.p, self.H // self.p, self.W // self.p)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        if self.D is None:
            return (self.H, self.W, self.C)
        return (self.D, self.H, self.W, self.C)

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.grid))

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.p ** self.dims * self.C


@dataclass(frozen=True)
class ViTConfig:
    L: int
    d: int
    h: int
    patch: PatchSpec = field(default_factory=lambda: PatchSpec(16, 224, 224))
    num_classes: int = 2
    mlp_ratio: int = 4
    drop_rate: float = 0.0

    def __post_init__(self):
        if self.d % self.h:
            raise ValueError(f"embedding dim d={self.d} is not divisible by heads h={self.h}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def hidden(self) -> int:
        return self.d * self.mlp_ratio

    def to_meta(self) -> dict:
        spec = self.patch
        meta = {
            "L": self.L,
            "d": self.d,
            "h": self.h,
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
            "in_chans": spec.C,
            "dims": spec.dims,
            "image_size": list(spec.image_shape[:-1]),
            "patch_size": spec.p,
            "grid": list(spec.grid),
        }
        if spec.dims == 3:
            meta["patch_depth"] = spec.p
        return meta

    @classmethod
    def from_meta(cls, meta: dict, drop_rate: float = 0.0) -> "ViTConfig":
        size = list(meta["image_size"])
        p = int(meta["patch_size"])
        if meta["dims"] == 3:
            if int(meta.get("patch_depth", p)) != p:
                raise ValueError(f"only cubic 3D patches are supported, got depth {meta['patch_depth']} vs {p}")
            spec = PatchSpec(p, H=size[1], W=size[2], D=size[0], C=meta["in_chans"])
        else:
            spec = PatchSpec(p, H=size[0], W=size[1], C=meta["in_chans"])
        if list(meta["grid"]) != list(spec.grid):
            raise ValueError(f"positional grid {meta['grid']} does not match patch grid {list(spec.grid)}")
        return cls(meta["L"], meta["d"], meta["h"], spec, meta["num_classes"], meta["mlp_ratio"], drop_rate)


def vit_small(patch: PatchSpec, num_classes: int, **kw) -> ViTConfig:
    return ViTConfig(12, 384, 6, patch, num_classes, **kw)


def vit_micro(patch: PatchSpec, num_classes: int, **kw) -> ViTConfig:
    return ViTConfig(4, 64, 4, patch, num_classes, **kw)


PRESETS = {"vit_small": (12, 384, 6), "vit_micro": (4, 64, 4)}


# -- patchification ------------------------------------------------------------

def _check_spatial(x: np.ndarray, spec: PatchSpec, nd: int):
    if spec.dims != nd:
        raise ValueError(f"expected a {nd}D patch spec, got {spec.dims}D")
    if x.ndim < nd + 1 or tuple(x.shape[-(nd + 1):]) != spec.image_shape:
        raise ValueError(f"input shape {x.shape} does not end with {spec.image_shape}")


def patchify_2d(image: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Split ``(..., H, W, C)`` into raster-ordered patches ``(..., T, p*p*C)``."""
    _check_spatial(image, spec, 2)
    p, (gh, gw) = spec.p, spec.grid
    lead = image.shape[:-3]
    x = image.reshape(lead + (gh, p, gw, p, spec.C))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return np.ascontiguousarray(x).reshape(lead + (gh * gw, p * p * spec.C))


def unpatchify_2d(patches: np.ndarray, spec: PatchSpec) -> np.ndarray:
    p, (gh, gw) = spec.p, spec.grid
    lead = patches.shape[:-2]
    n = len(lead)
    x = patches.reshape(lead + (gh, gw, p, p, spec.C))
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return np.ascontiguousarray(x).reshape(lead + (spec.H, spec.W, spec.C))


def patchify_3d(volume: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Split ``(..., D, H, W, C)`` into depth-major cubes ``(..., T, p**3*C)``."""
    _check_spatial(volume, spec, 3)
    p, (gd, gh, gw) = spec.p, spec.grid
    lead = volume.shape[:-4]
    n = len(lead)
    x = volume.reshape(lead + (gd, p, gh, p, gw, p, spec.C))
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6))
    return np.ascontiguousarray(x).reshape(lead + (gd * gh * gw, p ** 3 * spec.C))


def unpatchify_3d(patches: np.ndarray, spec: PatchSpec) -> np.ndarray:
    p, (gd, gh, gw) = spec.p, spec.grid
    lead = patches.shape[:-2]
    n = len(lead)
    x = patches.reshape(lead + (gd, gh, gw, p, p, p, spec.C))
    x = x.transpose(tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2, n + 5, n + 6))
    return np.ascontiguousarray(x).reshape(lead + (spec.D, spec.H, spec.W, spec.C))


def patchify(x: np.ndarray, spec: PatchSpec) -> np.ndarray:
    return patchify_2d(x, spec) if spec.dims == 2 else patchify_3d(x, spec)


def unpatchify(patches: np.ndarray, spec: PatchSpec) -> np.ndarray:
    return unpatchify_2d(patches, spec) if spec.dims == 2 else unpatchify_3d(patches, spec)


# -- weights ---------------------------------------------------------------------

def canonical_names(L: int) -> List[str]:
    names = ["cls_token", "pos_embed", "patch_embed.weight", "patch_embed.bias"]
    for i in range(L):
        b = f"blocks.{i}."
        names += [
            b + "norm1.gamma", b + "norm1.beta",
            b + "attn.qkv.weight", b + "attn.qkv.bias",
            b + "attn.proj.weight", b + "attn.proj.bias",
            b + "norm2.gamma", b + "norm2.beta",
            b + "mlp.fc1.weight", b + "mlp.fc1.bias",
            b + "mlp.fc2.weight", b + "mlp.fc2.bias",
        ]
    return names + ["norm.gamma", "norm.beta", "head.weight", "head.bias"]


def expected_shapes(meta: dict) -> Dict[str, Tuple[int, ...]]:
    """Tensor shapes implied by checkpoint metadata (see :meth:`ViTConfig.to_meta`)."""
    d, L = meta["d"], meta["L"]
    hidden = d * meta["mlp_ratio"]
    p, C = meta["patch_size"], meta["in_chans"]
    if meta["dims"] == 3:
        kernel = (meta.get("patch_depth", p), p, p, C, d)
    else:
        kernel = (p, p, C, d)
    shapes = {
        "cls_token": (d,),
        "pos_embed": (int(np.prod(meta["grid"])) + 1, d),
        "patch_embed.weight": kernel,
        "patch_embed.bias": (d,),
    }
    for i in range(L):
        b = f"blocks.{i}."
        shapes.update({
            b + "norm1.gamma": (d,), b + "norm1.beta": (d,),
            b + "attn.qkv.weight": (d, 3 * d), b + "attn.qkv.bias": (3 * d,),
            b + "attn.proj.weight": (d, d), b + "attn.proj.bias": (d,),
            b + "norm2.gamma": (d,), b + "norm2.beta": (d,),
            b + "mlp.fc1.weight": (d, hidden), b + "mlp.fc1.bias": (hidden,),
            b + "mlp.fc2.weight": (hidden, d), b + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.gamma": (d,), "norm.beta": (d,),
        "head.weight": (d, meta["num_classes"]), "head.bias": (meta["num_classes"],),
    })
    return shapes


def check_weights(meta: dict, weights: Dict[str, np.ndarray]):
    """Raise ``ValueError`` listing every missing, unexpected or mis-shaped tensor."""
    want = expected_shapes(meta)
    problems = [f"missing tensor {k}" for k in want if k not in weights]
    problems += [f"unexpected tensor {k}" for k in weights if k not in want]
    problems += [
        f"shape mismatch for {k}: expected {tuple(want[k])}, got {tuple(np.shape(v))}"
        for k, v in weights.items() if k in want and tuple(np.shape(v)) != tuple(want[k])
    ]
    if problems:
        raise ValueError("weights do not match config: " + "; ".join(problems))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_weights(config: ViTConfig, seed: int = 0, dtype=np.float32) -> Dict[str, np.ndarray]:
    """From-scratch initialisation.

    Zero class token; truncated-normal(0.02) positions and head; Xavier-uniform
    encoder linears; patch projection uniform in +-1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    meta = config.to_meta()
    shapes = expected_shapes(meta)
    w = {}
    for name in canonical_names(config.L):
        shape = shapes[name]
        if name == "cls_token" or name.endswith(".bias") or name.endswith(".beta"):
            arr = np.zeros(shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name == "patch_embed.weight":
            bound = 1.0 / math.sqrt(config.patch.patch_dim)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("blocks."):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = trunc_normal(rng, shape)
        w[name] = arr.astype(dtype)
    return w


# -- model -----------------------------------------------------------------------

def multi_head_attention(x: Tensor, qkv_weight: Tensor, qkv_bias: Tensor, proj_weight: Tensor,
                         proj_bias: Tensor, num_heads: int):
    """Scaled dot-product self-attention over ``x`` of shape (B, T, d).

    Returns the projected output and the attention weights (B, h, T, T).
    """
    B, Tn, d = x.shape
    if d % num_heads:
        raise ValueError(f"d={d} is not divisible by heads={num_heads}")
    dh = d // num_heads
    qkv = T.linear(x, qkv_weight, qkv_bias).reshape(B, Tn, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = T.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1, scale=1.0 / math.sqrt(dh))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tn, d)
    return T.linear(out, proj_weight, proj_bias), attn.data


class ViT:
    """A ViT whose parameters are autodiff leaves keyed by canonical name."""

    ln_eps = 1e-6

    def __init__(self, config: ViTConfig, weights: Optional[Dict[str, np.ndarray]] = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        if weights is None:
            weights = init_weights(config, seed, dtype)
        check_weights(config.to_meta(), weights)
        self.params: Dict[str, Tensor] = {
            name: Tensor(np.array(weights[name], dtype=self.dtype), requires_grad=True)
            for name in canonical_names(config.L)
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, weights: Dict[str, np.ndarray]):
        check_weights(self.config.to_meta(), weights)
        for k, t in self.params.items():
            t.data = np.array(weights[k], dtype=self.dtype)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def embed_patches(self, x: np.ndarray) -> Tensor:
        """Patch tokens (B, T_patch, d) before class token and positions."""
        spec = self.config.patch
        nd = spec.dims
        if x.ndim != nd + 2 or tuple(x.shape[1:]) != spec.image_shape:
            raise ValueError(f"batch shape {x.shape} does not match (B,) + {spec.image_shape}")
        patches = Tensor(patchify(np.asarray(x, dtype=self.dtype), spec))
        w = self.params["patch_embed.weight"].reshape(spec.patch_dim, self.config.d)
        return T.linear(patches, w, self.params["patch_embed.bias"])

    def forward_tokens(self, tokens: Tensor, pos_embed: Optional[Tensor] = None, train: bool = False,
                       rng: Optional[np.random.Generator] = None, return_attention: bool = False):
        """Run class token + positions + encoder + head on embedded patch tokens."""
        cfg, P = self.config, self.params
        B = tokens.shape[0]
        cls = T.broadcast_leading(P["cls_token"].reshape(1, 1, cfg.d), (B, 1, cfg.d))
        x = T.concat([cls, tokens], axis=1)
        x = x + (P["pos_embed"] if pos_embed is None else pos_embed)
        drop = cfg.drop_rate if train else 0.0
        x = T.dropout(x, drop, rng)
        maps = []
        for i in range(cfg.L):
            b = f"blocks.{i}."
            y = T.layer_norm(x, P[b + "norm1.gamma"], P[b + "norm1.beta"], self.ln_eps)
            y, attn = multi_head_attention(y, P[b + "attn.qkv.weight"], P[b + "attn.qkv.bias"],
                                           P[b + "attn.proj.weight"], P[b + "attn.proj.bias"], cfg.h)
            if return_attention:
                maps.append(attn)
            x = x + T.dropout(y, drop, rng)
            y = T.layer_norm(x, P[b + "norm2.gamma"], P[b + "norm2.beta"], self.ln_eps)
            y = T.gelu(T.linear(y, P[b + "mlp.fc1.weight"], P[b + "mlp.fc1.bias"]))
            y = T.linear(T.dropout(y, drop, rng), P[b + "mlp.fc2.weight"], P[b + "mlp.fc2.bias"])
            x = x + T.dropout(y, drop, rng)
        x = T.layer_norm(x, P["norm.gamma"], P["norm.beta"], self.ln_eps)
        logits = T.linear(x[:, 0], P["head.weight"], P["head.bias"])
        return (logits, maps) if return_attention else logits

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None,
                return_attention: bool = False):
        return self.forward_tokens(self.embed_patches(x), train=train, rng=rng, return_attention=return_attention)

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(x), batch_size):
                logits = self.forward(x[s:s + batch_size]).data.astype(np.float64)
                z = np.exp(logits - logits.max(axis=1, keepdims=True))
                out.append(z / z.sum(axis=1, keepdims=True))
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))


def vit_forward(batch: np.ndarray, config: ViTConfig, weights: Dict[str, np.ndarray],
                return_attention: bool = False, dtype=np.float32):
    """Stateless eval-mode forward returning logits (B, K) as numpy, optionally with
    per-layer attention weights."""
    model = ViT(config, weights, dtype=dtype)
    with T.no_grad():
        out = model.forward(batch, return_attention=return_attention)
    if return_attention:
        logits, maps = out
        return logits.data, maps
    return out.data


@dataclass
class AttentionMap:
    heatmap: np.ndarray      # (H, W) in [0, 1]
    grid: np.ndarray         # (H/p, W/p) class-token attention to patches, head-averaged
    prediction: int
    probabilities: np.ndarray


def extract_attention_map(image: np.ndarray, config: ViTConfig, weights: Dict[str, np.ndarray]) -> AttentionMap:
    """Final-layer class-token attention, head-averaged, upsampled and min-max scaled.

    A single-patch model (p equal to the image edge) yields an all-zero map.
    """
    spec = config.patch
    if spec.dims != 2:
        raise ValueError("attention maps are only defined for 2D inputs")
    logits, maps = vit_forward(image[None], config, weights, return_attention=True)
    row = maps[-1][0, :, 0, :].astype(np.float64).mean(axis=0)
    grid = row[1:].reshape(spec.grid)
    up = resample(grid, axes=(0, 1), sizes=(spec.H, spec.W), align_corners=False)
    lo, hi = up.min(), up.max()
    heat = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    z = np.exp(logits[0] - logits[0].max())
    probs = z / z.sum()
    return AttentionMap(heat, grid, int(np.argmax(probs)), probs)
