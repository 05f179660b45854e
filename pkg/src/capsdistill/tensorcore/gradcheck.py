from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. every entry of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = fn().item()
            flat[k] = orig - step
            lo = fn().item()
            flat[k] = orig
            out.reshape(-1)[k] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                    step: float = 1e-5) -> dict[int, float]:
    """Compare backprop with finite differences; returns relative error per input index."""
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    errs = {}
    for idx, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errs[idx] = relative_error(analytic, numeric_grad(fn, t, step))
    return errs
