"""Shared oracles for the test suite.

The finite-difference gradient here is the independent check for every
backward rule: central differences with step h = cbrt(machine eps) *
max(1, |x|), evaluated coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(f, x: np.ndarray, indices=None, h_factor: float = 1.0) -> np.ndarray:
    """Central-difference gradient of scalar-valued f() wrt the buffer x.

    f takes no arguments and must re-read x on every call; x is perturbed
    in place and restored. If indices is given, only those flat coordinates
    are evaluated (others are left as NaN).
    """
    eps = np.finfo(x.dtype).eps
    base_h = float(eps) ** (1.0 / 3.0) * h_factor
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i].copy()
        h = x.dtype.type(base_h * max(1.0, abs(float(orig))))
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * float(h))
    return grad.reshape(x.shape)


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Guarded relative error: |a-b| / max(|a|, |b|, floor), maxed over entries.

    The floor turns the comparison absolute for entries smaller than floor,
    where finite differences are dominated by roundoff.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
