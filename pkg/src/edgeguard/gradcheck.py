"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def numerical_gradient(f, array, step=1e-5, indices=None):
    """Central-difference gradient of the scalar ``f()`` with respect to ``array``.

    ``array`` is perturbed in place and restored.  When ``indices`` is given only
    those flat positions are evaluated; the remaining entries are NaN.
    """
    grad = np.full(array.shape, np.nan) if indices is not None else np.zeros(array.shape)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over entries where ``numeric`` is defined.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference round-off by zero.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
