"""Central finite differences, the oracle for every reverse-mode gradient."""
import logging
from typing import Callable, Sequence

import numpy as np

from ctxdesc.errors import ContractError

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_FLOOR = 1e-4


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP,
                         indices: Sequence[int] | None = None) -> np.ndarray:
    """Estimate the gradient of scalar ``f`` at ``x`` by central differences.

    Args:
        f: scalar function of an array shaped like ``x``
        x: evaluation point (not modified)
        h: step, must be positive
        indices: optional flat coordinates to differentiate; the others are left at 0

    Returns:
        Array shaped like ``x`` with (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
    """
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    chosen = range(flat.size) if indices is None else indices
    for i in chosen:
        original = flat[i]
        flat[i] = original + h
        upper = float(f(base))
        flat[i] = original - h
        lower = float(f(base))
        flat[i] = original
        grad[i] = (upper - lower) / (2.0 * h)
    return grad.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def sample_indices(size: int, limit: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``limit`` distinct flat coordinates, sorted."""
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))
