"""Small deterministic linear-algebra kernels."""

from __future__ import annotations

from typing import Callable

import numpy as np


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration cap before reaching tolerance."""


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = 1e-10,
    maxiter: int | None = None,
) -> tuple[np.ndarray, int]:
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as a matvec.

    Returns the solution and the number of iterations used. Raises
    ``ConvergenceError`` if ``||r|| <= rtol * ||b||`` is not reached.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if maxiter is None:
        maxiter = max(10 * n, 100)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    target = rtol * bnorm
    p = r.copy()
    rs = r @ r
    for k in range(1, maxiter + 1):
        if np.sqrt(rs) <= target:
            return x, k - 1
        Ap = matvec(p)
        alpha = rs / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    if np.sqrt(rs) <= target:
        return x, maxiter
    raise ConvergenceError(f"CG did not converge in {maxiter} iterations "
                           f"(residual {np.sqrt(rs) / bnorm:.3e})")


def power_norm(apply: Callable[[np.ndarray], np.ndarray],
               apply_t: Callable[[np.ndarray], np.ndarray],
               size: int, iters: int = 100, seed: int = 0) -> float:
    """Estimate the operator 2-norm of ``K`` by power iteration on ``K^T K``."""
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal(size)
    x /= np.linalg.norm(x)
    s = 0.0
    for _ in range(iters):
        y = apply_t(apply(x))
        s = np.linalg.norm(y)
        if s == 0.0:
            return 0.0
        x = y / s
    return float(np.sqrt(s))
