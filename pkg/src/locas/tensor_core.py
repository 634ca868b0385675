"""Dense numerics shared by the model, the memory and the compressor.

Everything here works in float64. Matrices are plain 2-D ``numpy`` arrays and
vectors are 1-D arrays; functions never modify their inputs.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import DegenerateGradient, NumericalError, ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite input")


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def activation(kind: str, x):
    """Element-wise ``relu``, ``silu`` or tanh-approximated ``gelu``."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "gelu":
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x):
    """Derivative of :func:`activation` evaluated at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "silu":
        s = sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    if kind == "gelu":
        inner = _GELU_C * (x + 0.044715 * x**3)
        th = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
    raise ValueError(f"unknown activation {kind!r}")


def normalize_rows(M, floor: float = 1e-12):
    """Scale each row of ``M`` to unit L2 norm.

    Returns ``(normalized, norms, degenerate)``. Rows whose norm is below
    ``floor`` (and exactly zero rows) are left as they are and flagged in the boolean ``degenerate``
    mask rather than raising.
    """
    if floor < 0:
        raise ValueError("floor must be non-negative")
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {M.shape}")
    norms = np.sqrt(np.sum(M * M, axis=1))
    degenerate = (norms < floor) | (norms == 0)
    scale = np.where(degenerate, 1.0, norms)
    return M / scale[:, None], norms, degenerate


def normalize_columns(M, floor: float = 1e-12):
    out, norms, degenerate = normalize_rows(np.asarray(M).T, floor)
    return out.T, norms, degenerate


def global_normalize(grads):
    """Jointly L2-normalize a stack of per-layer gradient vectors.

    ``grads`` is an ``(L, d)`` array (or a list of ``d``-vectors) holding one
    token's hidden-state gradient at every layer; the norm is taken over the
    concatenation of all layers.
    """
    g = np.asarray(grads, dtype=np.float64)
    total = np.sqrt(np.sum(g * g))
    if not np.isfinite(total):
        raise NumericalError("non-finite gradient")
    if total == 0.0:
        raise DegenerateGradient("gradient is zero across every layer")
    return g / total


def _off_norm(A):
    return np.linalg.norm(A - np.diag(np.diag(A)))


def _round_robin(n):
    """Pairings for parallel Jacobi: ``n - 1`` rounds of disjoint pairs."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[k], idx[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def symmetric_evd(S, tol: float = 1e-10, max_sweeps: int = 80):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order so that each round annihilates
    ``n // 2`` disjoint off-diagonal pairs at once. Returns ``(U, eigvals)``
    with eigenvalues in descending order (ties keep their original index
    order) and orthonormal eigenvectors in the columns of ``U``.

    ``tol`` bounds the accepted asymmetry ``|S - S^T|`` relative to ``|S|``.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {S.shape}")
    _check_finite(S)
    n = S.shape[0]
    scale = np.linalg.norm(S)
    if np.linalg.norm(S - S.T) > tol * max(scale, np.finfo(float).tiny):
        raise ShapeError("matrix is not symmetric within tolerance")
    A = 0.5 * (S + S.T)
    U = np.eye(n)
    if n <= 1 or scale == 0.0:
        return U, np.diag(A).copy()

    rounds = _round_robin(n)
    target = 1e-15 * scale
    off = _off_norm(A)
    for _ in range(max_sweeps):
        if off <= target:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            app = A[p, p]
            aqq = A[q, q]
            theta = np.where(active, (aqq - app) / np.where(active, 2.0 * apq, 1.0), 0.0)
            sgn = np.where(theta >= 0, 1.0, -1.0)
            t = np.where(active, sgn / (np.abs(theta) + np.hypot(1.0, theta)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp, rq = A[p, :], A[q, :]
            A[p, :] = c[:, None] * rp - s[:, None] * rq
            A[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = A[:, p], A[:, q]
            A[:, p] = cp * c - cq * s
            A[:, q] = cp * s + cq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            up, uq = U[:, p], U[:, q]
            U[:, p] = up * c - uq * s
            U[:, q] = up * s + uq * c
        new_off = _off_norm(A)
        if new_off >= off and new_off <= 1e-12 * scale:
            off = new_off
            break
        off = new_off
    else:
        if off > 1e-12 * scale:
            raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")

    eigvals = np.diag(A).copy()
    order = np.argsort(-eigvals, kind="stable")
    return U[:, order], eigvals[order]
