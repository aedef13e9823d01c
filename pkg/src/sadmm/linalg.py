"""Dense vector helpers and regularized symmetric solves.

Every Newton, predictor and corrector step in the package goes through
:func:`solve_sym`, so the diagonal-shift policy defined here is the only
regularization mechanism applied to indefinite subproblem Hessians.
"""

import numpy as np
from scipy.linalg import LinAlgError as _LapackError
from scipy.linalg import cho_factor, cho_solve

SYM_TOL = 1e-10
SHIFT_START = 1e-8
SHIFT_LIMIT = 1e6
RESIDUAL_TOL = 1e-8


class LinalgError(ValueError):
    """Raised on malformed linear-algebra inputs."""


class SingularSystemError(LinalgError):
    """Raised when no admissible diagonal shift makes the matrix factorizable."""

    def __init__(self, msg, shift):
        super().__init__(msg)
        self.shift = shift


def as_vector(data):
    """Return `data` as a finite 1-D float array (a copy)."""
    v = np.array(data, dtype=float).reshape(-1)
    if v.size == 0:
        raise LinalgError("vector must have positive dimension")
    if not np.all(np.isfinite(v)):
        raise LinalgError("vector has non-finite entries")
    return v


def as_symmatrix(data):
    """Return `data` as a finite, exactly symmetric square float array.

    Inputs asymmetric by more than ``1e-10`` (absolute) are rejected;
    smaller asymmetries are removed by averaging with the transpose.
    """
    A = np.array(data, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise LinalgError(f"expected a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise LinalgError("matrix has non-finite entries")
    if np.max(np.abs(A - A.T)) > SYM_TOL:
        raise LinalgError("matrix is not symmetric")
    return 0.5 * (A + A.T)


def norms(v):
    """Euclidean and max-abs norms of `v`, returned as ``(two_norm, inf_norm)``.

    The two-norm is computed on ``v / ||v||_inf`` so it stays accurate for
    entries whose squares would underflow or overflow.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size == 0:
        return 0.0, 0.0
    if not np.all(np.isfinite(v)):
        raise LinalgError("vector has non-finite entries")
    inf = float(np.max(np.abs(v)))
    if inf == 0.0:
        return 0.0, 0.0
    # scale by the largest entry so squares neither underflow nor overflow
    return inf * float(np.linalg.norm(v / inf)), inf


def solve_sym(A, b, return_shift=False):
    """Solve ``A x = b`` for symmetric `A` by Cholesky factorization.

    If the factorization fails (``A`` not positive definite), ``tau * I`` is
    added with ``tau`` starting at ``1e-8 * (1 + ||A||_inf)`` and doubling
    until it succeeds. The residual bound
    ``||(A + tau I) x - b||_inf <= 1e-8 * (1 + ||b||_inf)`` is checked, with
    one step of iterative refinement if needed.

    Parameters
    ----------
    A : array_like, shape (n, n)
    b : array_like, shape (n,)
    return_shift : bool
        Also return the diagonal shift that was applied (0.0 if none).

    Raises
    ------
    LinalgError
        Dimension mismatch or non-finite input.
    SingularSystemError
        The shift exceeded ``1e6 * (1 + ||A||_inf)``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] != b.size:
        raise LinalgError(f"dimension mismatch: A is {A.shape}, b has {b.size} entries")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise LinalgError("non-finite input to solve_sym")
    A = 0.5 * (A + A.T)

    scale = 1.0 + np.max(np.abs(A).sum(axis=1))
    shift = 0.0
    Ashift = A
    while True:
        try:
            factor = cho_factor(Ashift, lower=True, check_finite=False)
            break
        except _LapackError:
            shift = SHIFT_START * scale if shift == 0.0 else 2.0 * shift
            if shift > SHIFT_LIMIT * scale:
                raise SingularSystemError(
                    f"matrix not factorizable with shift up to {SHIFT_LIMIT * scale:.3g}",
                    shift,
                )
            Ashift = A + shift * np.eye(A.shape[0])

    x = cho_solve(factor, b, check_finite=False)
    bound = RESIDUAL_TOL * (1.0 + np.max(np.abs(b)))
    res = Ashift @ x - b
    if np.max(np.abs(res)) > bound:
        x = x - cho_solve(factor, res, check_finite=False)
        res = Ashift @ x - b
        if np.max(np.abs(res)) > bound:
            raise SingularSystemError(
                "residual bound not met after refinement; system too ill-conditioned", shift
            )
    if return_shift:
        return x, shift
    return x
