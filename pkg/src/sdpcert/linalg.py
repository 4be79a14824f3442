"""Top eigenpairs of dense symmetric matrices.

The iterative path is ARPACK's implicitly restarted Lanczos (``eigsh``). When it
does not converge, or the top of the spectrum is degenerate, we fall back to a
full dense decomposition.
"""
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigsh

from .errors import InvalidInputError

DEFAULT_TOL = 1e-7
# below this size a dense solve is both exact and cheaper than Lanczos
DENSE_CUTOFF = 64


@dataclass(frozen=True)
class EigPair:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


def as_symmetric(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] == 0:
        raise InvalidInputError("matrix has dimension 0")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix has non-finite entries")
    if not np.array_equal(A, A.T):
        scale = max(1.0, float(np.max(np.abs(A))))
        if np.max(np.abs(A - A.T)) > 1e-10 * scale:
            raise InvalidInputError("matrix is not symmetric")
        A = 0.5 * (A + A.T)
    return A


def _start_vector(dim: int) -> np.ndarray:
    # fixed per dimension so certificates are reproducible run to run
    return np.random.default_rng(dim).uniform(-1.0, 1.0, size=dim)


def _dense(A: np.ndarray, iterations: int) -> EigPair:
    w, U = np.linalg.eigh(A)
    return EigPair(float(w[-1]), U[:, -1].copy(), True, iterations)


def _residual(A, value, vector):
    return float(np.linalg.norm(A @ vector - value * vector))


def top_eigenpair(A, tol: float = DEFAULT_TOL, max_iter: int | None = None,
                  method: str = "auto") -> EigPair:
    """Algebraically largest eigenvalue of ``A`` and a unit eigenvector.

    ``method`` is ``"lanczos"``, ``"dense"`` or ``"auto"`` (dense below
    ``DENSE_CUTOFF``). The Lanczos result is accepted only when its residual
    is at most ``tol * max(1, |value|)`` and the top eigenvalue is separated
    from the next one. Otherwise the dense fallback runs and ``iterations``
    is set to ``max_iter + 1``.
    """
    A = as_symmetric(A)
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    n = A.shape[0]
    if max_iter is None:
        max_iter = 20 * n
    if method == "auto":
        method = "dense" if n <= DENSE_CUTOFF else "lanczos"
    if method == "dense":
        return _dense(A, 0)
    if method != "lanczos":
        raise InvalidInputError(f"unknown method {method!r}")
    fallback = max_iter + 1
    if n < 3:
        # ARPACK needs k < ncv <= n with k = 2
        return _dense(A, fallback)

    count = [0]

    def matvec(x):
        count[0] += 1
        return A @ x

    op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    try:
        w, U = eigsh(op, k=2, which="LA", v0=_start_vector(n), tol=tol / 10,
                     maxiter=max_iter)
    except (ArpackNoConvergence, ArpackError):
        return _dense(A, fallback)
    order = np.argsort(w)
    value, second = float(w[order[-1]]), float(w[order[0]])
    vector = U[:, order[-1]]
    vector = vector / np.linalg.norm(vector)
    scale = max(1.0, abs(value))
    if value - second <= tol * scale or _residual(A, value, vector) > tol * scale:
        return _dense(A, fallback)
    return EigPair(value, vector, True, count[0])


def lambda_max_plus(A, tol: float = DEFAULT_TOL, method: str = "auto"):
    """``(max(lambda_max(A), 0), vector)``; the vector is None unless lambda_max > 0."""
    pair = top_eigenpair(A, tol=tol, method=method)
    if pair.value > 0:
        return pair.value, pair.vector
    return 0.0, None


def lambda_max(A) -> float:
    """Top eigenvalue from a dense solve; used where the value must be rigorous."""
    A = as_symmetric(A)
    return float(np.linalg.eigvalsh(A)[-1])
