"""Central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, no_grad, use_tape


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                 indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the flat entries ``indices`` of ``x``."""
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.empty(len(idx), dtype=np.float64)
    with no_grad():                      # nothing to differentiate; keep the implicit tape empty
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            out[k] = (fp - fm) / (2 * h)
    return out


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with use_tape() as tape:
        loss = f(x)
    if loss.tape is tape:
        tape.backward(loss)
    x.requires_grad = was
    g = np.zeros_like(x.data) if x.grad is None else x.grad
    x.grad = None
    return np.asarray(g, dtype=np.float64).reshape(-1)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Optional[np.ndarray] = None) -> float:
    """Max elementwise relative error between backprop and central differences.

    ``f`` must return a scalar tensor and should be evaluated in float64.
    ``indices`` restricts the check to a subset of flat positions of ``x``.
    """
    a = analytic_grad(f, x)
    idx = np.arange(x.size) if indices is None else np.asarray(indices)
    n = numeric_grad(f, x, h, idx)
    if len(idx) == 0:
        return 0.0
    return float(relative_errors(a[idx], n).max())
