"""Central finite-difference checks for the autodiff tape (run in float64)."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numeric_grad(
    fn: Callable[[], Tensor],
    t: Tensor,
    eps: float = 1e-3,
    index=None,
    signature: Optional[Callable[[], np.ndarray]] = None,
    min_eps: float = 1e-7,
) -> np.ndarray:
    """d fn() / d t by central differences, entry by entry (or only ``index``).

    ``signature`` returns a discrete fingerprint of the piecewise-smooth
    region (e.g. the integer cells of every sampling coordinate). When a
    step of ``eps`` changes it, the step is divided by 10 until it does not
    or ``min_eps`` is reached, so differences are taken inside one smooth
    piece.
    """
    out = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    entries = range(flat.size) if index is None else index
    with ad.no_grad():
        base = signature() if signature is not None else None
        for i in entries:
            orig = flat[i]
            h = eps
            while True:
                flat[i] = orig + h
                hi = fn().item()
                same = base is None or np.array_equal(signature(), base)
                flat[i] = orig - h
                lo = fn().item()
                same = same and (base is None or np.array_equal(signature(), base))
                flat[i] = orig
                if same or h / 10 < min_eps:
                    break
                h /= 10
            out.reshape(-1)[i] = (hi - lo) / (2 * h)
    return out


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    ad.backward(fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64) for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    floor: float = 1e-6,
    signature: Optional[Callable[[], np.ndarray]] = None,
) -> list[float]:
    """Relative error of the analytic gradient of every tensor in ``params``."""
    grads = analytic_grads(fn, params)
    return [relative_error(g, numeric_grad(fn, p, eps, signature=signature), floor) for g, p in zip(grads, params)]
