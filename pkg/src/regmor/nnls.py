"""Non-negative least squares by the Lawson-Hanson active-set method.

The solver stops as soon as the relative residual drops below a requested
tolerance, which is what makes it usable as a sparsifier: each outer
iteration admits one column, so early termination bounds the support size.
"""

import numpy as np

__all__ = ["nnls", "NNLSError"]


class NNLSError(RuntimeError):
    def __init__(self, message, x, resid):
        super().__init__(message)
        self.x = x
        self.resid = resid


def nnls(A, b, tol=0.0, maxiter=None):
    """Solve ``min ||A x - b||  s.t.  x >= 0``, stopping early.

    Iterations end once ``||A x - b|| <= tol * ||b||`` or at the classical
    optimality condition. Returns ``(x, residual_norm)``.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float).reshape(-1)
    m, n = A.shape
    maxiter = maxiter or 3 * n
    x = np.zeros(n)
    passive = np.zeros(n, bool)
    resid = b.copy()
    rnorm = float(np.linalg.norm(resid))
    target = tol * float(np.linalg.norm(b))
    grad_tol = 10.0 * np.finfo(float).eps * np.linalg.norm(A, ord=1) * np.linalg.norm(b)

    for _ in range(maxiter):
        if rnorm <= target:
            break
        w = A.T @ resid
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= grad_tol:
            break  # stationary: no admissible descent column
        passive[j] = True
        while True:
            idx = np.where(passive)[0]
            z = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
            if z.min() > 0.0:
                x[:] = 0.0
                x[idx] = z
                break
            neg = z <= 0.0
            alpha = np.min(x[idx][neg] / (x[idx][neg] - z[neg]))
            x[idx] += alpha * (z - x[idx])
            passive[idx[x[idx] <= 1e-14]] = False
            x[~passive] = 0.0
        resid = b - A @ x
        rnorm = float(np.linalg.norm(resid))
    return x, rnorm
