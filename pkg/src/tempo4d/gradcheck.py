"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_grads(f: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray],
                    eps: float = 1e-6, names=None) -> dict[str, np.ndarray]:
    """``df/dparam`` for every entry by central differences; ``f`` must be pure."""
    out = {}
    for name in names or params:
        p = params[name]
        g = np.zeros_like(p, dtype=np.float64)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            fp = f(params)
            p[idx] = old - eps
            fm = f(params)
            p[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max absolute deviation scaled by the group's largest gradient magnitude."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> tuple[float, str]:
    worst, where = 0.0, ""
    for name, num in numeric.items():
        err = relative_error(analytic[name], num)
        if err > worst:
            worst, where = err, name
    return worst, where
