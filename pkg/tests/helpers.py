"""Shared oracles for the test suite: finite differences and tolerances."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5


def finite_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function at x (array-shaped)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def fd_jacobian(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vector function at a vector x."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((f(xp) - f(xm)) / (2.0 * h))
    return np.stack(cols, axis=1)


def assert_close(actual, expected, rel=1e-5, abs_=1e-8, msg=""):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = np.maximum(np.abs(expected), np.abs(actual))
    err = np.abs(actual - expected)
    bad = err > abs_ + rel * denom
    if np.any(bad):
        worst = float(np.max(err / (abs_ + rel * denom)))
        raise AssertionError(f"{msg} mismatch: worst ratio {worst:.3g}, "
                             f"max abs err {float(err.max()):.3e}")
