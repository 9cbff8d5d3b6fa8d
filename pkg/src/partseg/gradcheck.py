"""Central finite-difference verification of analytic gradients.

The numeric side only ever calls the forward pass, so it stays independent
of the backward implementation it is checking. Use float64 parameters: with
h = 1e-5 the truncation plus roundoff error sits far below the 1e-4
acceptance tolerance for O(1) losses.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
# entries with |grad| below this are compared absolutely, not relatively
REL_FLOOR = 1e-3


def numeric_gradient(loss_fn, t: Tensor, h: float = DEFAULT_H) -> np.ndarray:
    """d loss / d t by central differences, perturbing t.data in place."""
    flat = t.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g.reshape(t.data.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def gradient_check(make_loss, tensors: dict[str, Tensor], h: float = DEFAULT_H) -> dict[str, float]:
    """Per-tensor max relative error between backprop and finite differences.

    ``make_loss(tape)`` must rebuild the same scalar loss every call
    (any randomness inside must be replayed identically).
    """
    tape = ad.Tape()
    loss = make_loss(tape)
    for t in tensors.values():
        t.zero_grad()
    ad.backward(loss, tape)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    def value():
        return make_loss(None).item()

    return {
        k: max_rel_error(analytic[k], numeric_gradient(value, t, h))
        for k, t in tensors.items()
    }
