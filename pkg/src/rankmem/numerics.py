"""Deterministic scalar/vector/matrix primitives for routing and certification.

All functions operate on float64 numpy arrays and are pure: no shared
state, safe to call concurrently.  The ``*_rows`` variants apply the same
map independently to each row of a 2-D array; they are the building blocks
of the batched forward engine and are defined next to their single-vector
counterparts so both share one formula.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-6


def _check_vector(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def check_simplex(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Validate a probability vector: entries >= 0, sum within ``tol`` of 1."""
    a = _check_vector(a, "simplex")
    if np.any(a < 0):
        raise ValueError("simplex entries must be non-negative")
    if abs(a.sum() - 1.0) > tol:
        raise ValueError(f"simplex does not sum to 1 (off by {a.sum() - 1.0:.3e})")
    return a


# ---------------------------------------------------------------------------
# RMS normalization
# ---------------------------------------------------------------------------


def rms(x: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    """Epsilon-stabilized root mean square, sqrt(mean(x_i^2) + eps)."""
    x = _check_vector(x)
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return float(np.sqrt(x.dot(x) / x.size + eps))


def rmsnorm(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """x / rms(x, eps).  The output 2-norm is at most sqrt(dim)."""
    x = _check_vector(x)
    return x / rms(x, eps)


def rms_rows(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.einsum("bd,bd->b", x, x) / x.shape[1] + eps)


def rmsnorm_rows(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    return x / rms_rows(x, eps)[:, None]


def rmsnorm_jacobian(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Exact Jacobian of rmsnorm: (1/r) I - (1/(d r^3)) x x^T.

    Symmetric, with spectral norm at most 1/rms(x, eps).
    """
    x = _check_vector(x)
    r = rms(x, eps)
    d = x.size
    return np.eye(d) / r - np.outer(x, x) / (d * r**3)


def rmsnorm_jvp_rows(x: np.ndarray, v: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Row-wise J_rmsnorm(x) @ v without forming the Jacobian.

    The Jacobian is symmetric, so this doubles as the vector-Jacobian
    product used in backpropagation.
    """
    r = rms_rows(x, eps)
    xv = np.einsum("bd,bd->b", x, v)
    return v / r[:, None] - x * (xv / (x.shape[1] * r**3))[:, None]


def rms_lastaxis(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """rms over the last axis of an arbitrary-shape array."""
    return np.sqrt(np.einsum("...d,...d->...", x, x) / x.shape[-1] + eps)


def rmsnorm_lastaxis(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    return x / rms_lastaxis(x, eps)[..., None]


def rmsnorm_jvp_lastaxis(x: np.ndarray, v: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    r = rms_lastaxis(x, eps)
    xv = np.einsum("...d,...d->...", x, v)
    return v / r[..., None] - x * (xv / (x.shape[-1] * r**3))[..., None]


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-subtracted stable softmax; returns a valid simplex."""
    z = _check_vector(z, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_jacobian(alpha: np.ndarray) -> np.ndarray:
    """diag(alpha) - alpha alpha^T: symmetric PSD, spectral norm <= 1/2."""
    alpha = check_simplex(alpha)
    return np.diag(alpha) - np.outer(alpha, alpha)


def topk_softmax(z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax restricted to the k largest logits.

    Returns ``(active, alpha)`` where ``active`` holds the indices of the k
    largest entries (ties broken toward the lowest index, result sorted
    ascending) and ``alpha`` is a full-length simplex that is zero off the
    active set.  With ``k == len(z)`` this is exactly ``softmax(z)``.
    """
    z = _check_vector(z, "logits")
    if not 1 <= k <= z.size:
        raise ValueError(f"k={k} out of range for {z.size} logits")
    # Stable sort on -z keeps the first occurrence of equal values first.
    active = np.sort(np.argsort(-z, kind="stable")[:k])
    alpha = np.zeros_like(z)
    alpha[active] = softmax(z[active])
    return active, alpha


def topk_softmax_rows(z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-k softmax: ``(active (B,k) int, alpha (B,M))``."""
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.shape[1]:
        raise ValueError(f"k={k} out of range for {z.shape[1]} logits")
    active = np.sort(np.argsort(-z, axis=1, kind="stable")[:, :k], axis=1)
    picked = np.take_along_axis(z, active, axis=1)
    w = softmax_rows(picked)
    alpha = np.zeros_like(z)
    np.put_along_axis(alpha, active, w, axis=1)
    return active, alpha


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def entropy(a: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0.  Range [0, log(dim)]."""
    a = check_simplex(a)
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def kl_div(a: np.ndarray, b: np.ndarray) -> float:
    """KL(a || b); requires support(a) within support(b)."""
    a = check_simplex(a)
    b = check_simplex(b)
    if a.size != b.size:
        raise ValueError("dimension mismatch")
    if np.any((a > 0) & (b == 0)):
        raise ValueError("support violation: a places mass where b is zero")
    mask = a > 0
    return float((a[mask] * (np.log(a[mask]) - np.log(b[mask]))).sum())


# ---------------------------------------------------------------------------
# Operator norms
# ---------------------------------------------------------------------------


def spectral_norm(m: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value via power iteration on M^T M.

    Deterministic: starts from a fixed vector.  ``iters``/``tol`` defaults
    match the certification suite's configuration.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("spectral_norm expects a matrix")
    # Fixed pseudo-random start: a structured start (e.g. all-ones) can sit
    # in the null space of structured inputs like centered projectors.
    v = np.random.default_rng(0x5EED).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(iters):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        sigma = float(np.sqrt(norm))
        if abs(sigma - prev) <= tol * max(1.0, sigma):
            break
        prev = sigma
    return float(np.linalg.norm(m @ v))
