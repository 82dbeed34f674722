"""Central finite-difference verification of reverse-mode gradients.

The checker only ever calls the forward pass, so it is independent of the
backward implementations it validates.  Errors are reported per tensor as
``||g_ad - g_fd||_2 / max(||g_ad||_2, ||g_fd||_2, floor)``.
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from .tensor import Tensor


def finite_difference_grad(forward: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued forward w.r.t. ``t``."""
    base = t.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = forward().item()
        flat[i] = orig - h
        down = forward().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    denom = max(na, nb, floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    forward: Callable[[], Tensor],
    tensors: Dict[str, Tensor],
    h: float = 1e-5,
) -> Dict[str, float]:
    """Compare backward gradients against central differences.

    ``forward`` must rebuild the graph from the given leaf tensors on every
    call and return a scalar loss.  Returns the per-tensor relative error.
    """
    for t in tensors.values():
        t.grad = None
    loss = forward()
    loss.backward()
    errors: Dict[str, float] = {}
    for name, t in tensors.items():
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        g_fd = finite_difference_grad(forward, t, h=h)
        errors[name] = relative_error(g_ad, g_fd)
    return errors


def max_error(errors: Dict[str, float]) -> Tuple[str, float]:
    name = max(errors, key=errors.get)
    return name, errors[name]
