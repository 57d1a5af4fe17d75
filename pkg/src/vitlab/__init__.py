"""Vision Transformer patch-size laboratory: autodiff core, ViT, adaptation, cost model and sweeps."""

__version__ = "0.1.0"
