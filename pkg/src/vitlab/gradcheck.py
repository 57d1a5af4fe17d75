"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max norms."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, coords: Sequence[int], h_rel: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the flat ``coords`` of ``x`` (perturbed in place).

    The step is ``h_rel * (1 + |x_i|)``.
    """
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        h = h_rel * (1.0 + abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    h_rel: float = 1e-5,
) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` maps tensors to a scalar tensor. Inputs must be float64. With
    ``max_coords`` only that many randomly chosen coordinates per input are
    differenced.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    loss.backward()
    rng = rng or np.random.default_rng(0)

    def evaluate():
        return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    for t, a in zip(tensors, arrays):
        n = a.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        num = numeric_gradient(evaluate, a, coords, h_rel)
        ana = (t.grad if t.grad is not None else np.zeros_like(a)).reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return worst
