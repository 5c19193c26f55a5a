"""Matrix-free real GMRES with left preconditioning.

Non-restarted Arnoldi with modified Gram-Schmidt plus one reorthogonalization
pass, Givens rotations on the Hessenberg least-squares problem. Convergence is
measured on the preconditioned relative residual

    ||P^{-1}(b - A x)|| / ||P^{-1} b|| <= tol,

tracked incrementally through the rotated right-hand side. The operator count
stays at one matvec and one preconditioner application per iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonConvergenceError


@dataclass
class GmresResult:
    x: np.ndarray
    residuals: list[float] = field(default_factory=list)
    converged: bool = True

    @property
    def iterations(self) -> int:
        return len(self.residuals) - 1


def gmres(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-8,
    maxiter: int = 400,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
    x0: np.ndarray | None = None,
    raise_on_fail: bool = True,
) -> GmresResult:
    """Solve A x = b. On stagnation past maxiter raises NonConvergenceError
    carrying the best iterate unless raise_on_fail is False."""
    b = np.asarray(b, dtype=float)
    n = b.size
    apply_p = precond if precond is not None else (lambda v: v)

    pb = apply_p(b)
    bnorm = float(np.linalg.norm(pb))
    if bnorm == 0.0:
        return GmresResult(x=np.zeros(n), residuals=[0.0])

    if x0 is None:
        x0 = np.zeros(n)
        r = pb.copy()
    else:
        x0 = np.asarray(x0, dtype=float)
        r = apply_p(b - matvec(x0))

    beta = float(np.linalg.norm(r))
    residuals = [beta / bnorm]
    if residuals[0] <= tol:
        return GmresResult(x=x0.copy(), residuals=residuals)

    maxiter = min(maxiter, n)
    V = np.empty((maxiter + 1, n))
    V[0] = r / beta
    H = np.zeros((maxiter + 1, maxiter))
    cs = np.zeros(maxiter)
    sn = np.zeros(maxiter)
    g = np.zeros(maxiter + 1)
    g[0] = beta

    k_done = 0
    for k in range(maxiter):
        # copy: matvec or precond may return its input unchanged
        w = np.array(apply_p(matvec(V[k])), dtype=float)
        # modified Gram-Schmidt with one reorthogonalization pass
        for _ in range(2):
            for i in range(k + 1):
                h = float(V[i] @ w)
                H[i, k] += h
                w -= h * V[i]
        hk1 = float(np.linalg.norm(w))
        H[k + 1, k] = hk1

        # apply accumulated Givens rotations to the new column
        for i in range(k):
            t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = t
        denom = np.hypot(H[k, k], H[k + 1, k])
        if denom == 0.0:
            cs[k], sn[k] = 1.0, 0.0
        else:
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
        H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]

        k_done = k + 1
        residuals.append(abs(g[k + 1]) / bnorm)
        if residuals[-1] <= tol or hk1 == 0.0:
            break
        V[k + 1] = w / hk1

    # back-substitute for the best iterate found
    y = np.zeros(k_done)
    for i in range(k_done - 1, -1, -1):
        y[i] = (g[i] - H[i, i + 1 : k_done] @ y[i + 1 :]) / H[i, i]
    x = x0 + V[:k_done].T @ y

    if residuals[-1] <= tol:
        return GmresResult(x=x, residuals=residuals)
    result = GmresResult(x=x, residuals=residuals, converged=False)
    if raise_on_fail:
        raise NonConvergenceError(
            f"gmres stalled at relative residual {residuals[-1]:.3e} "
            f"after {k_done} iterations (tol {tol:.1e})",
            best=result,
            residuals=residuals,
        )
    return result
