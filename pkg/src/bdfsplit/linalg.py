"""Vector and linear-operator primitives shared by the solvers.

Operators are ``scipy.sparse.linalg.LinearOperator`` instances, dense
``numpy`` arrays or ``scipy.sparse`` matrices; :func:`as_operator` normalizes
all three.  Everything here is immutable once constructed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, aslinearoperator

__all__ = [
    "as_operator",
    "diagonal_operator",
    "scaled_identity",
    "apply_operator",
    "m_norm_sq",
    "SpectralEstimate",
    "estimate_spectral_norm",
    "CGResult",
    "conjugate_gradient",
    "NotPSDError",
]

log = logging.getLogger(__name__)


class NotPSDError(ValueError):
    """Raised when a quadratic form that must be nonnegative is not."""


def as_operator(op) -> LinearOperator:
    if isinstance(op, LinearOperator):
        return op
    if sps.issparse(op):
        return aslinearoperator(sps.csr_matrix(op))
    return aslinearoperator(np.asarray(op, dtype=float))


def diagonal_operator(d) -> LinearOperator:
    d = np.asarray(d, dtype=float)
    return aslinearoperator(sps.diags(d, format="csr"))


def scaled_identity(n: int, scale: float = 1.0) -> LinearOperator:
    return LinearOperator((n, n), matvec=lambda x: scale * np.ravel(x),
                          rmatvec=lambda x: scale * np.ravel(x), dtype=float)


def apply_operator(op, x) -> np.ndarray:
    """Return ``op @ x`` after checking shapes and finiteness."""
    x = np.asarray(x, dtype=float)
    shape = op.shape
    if x.ndim != 1 or x.shape[0] != shape[1]:
        raise ValueError(f"dimension mismatch: operator is {shape[0]}x{shape[1]}, "
                         f"vector has shape {x.shape}")
    out = np.asarray(op @ x, dtype=float).ravel()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("operator produced non-finite entries")
    return out


def m_norm_sq(M, x) -> float:
    """Squared seminorm ``<Mx, x>`` for a symmetric PSD ``M``.

    Small negative values from rounding are clipped to zero; anything below
    ``-1e-12 * ||x||^2`` means ``M`` is not PSD.
    """
    x = np.asarray(x, dtype=float)
    val = float(apply_operator(M, x) @ x)
    if val < 0.0:
        if val < -1e-12 * float(x @ x):
            raise NotPSDError(f"<Mx, x> = {val:.3e} < 0: metric is not PSD")
        return 0.0
    return val


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int

    def upper(self, safety: float = 1e-6) -> float:
        """Inflated estimate ``value * (1 + safety)`` used to build PSD metrics."""
        return self.value * (1.0 + safety)


def estimate_spectral_norm(op, tol: float = 1e-10, max_iter: int = 5000,
                           seed: int = 0) -> SpectralEstimate:
    """Largest eigenvalue of a symmetric PSD operator by power iteration.

    Stops when successive Rayleigh quotients agree to ``tol`` relatively.
    The start vector is drawn from a seeded generator so results are
    reproducible.
    """
    n = op.shape[0]
    if op.shape[0] != op.shape[1]:
        raise ValueError("power iteration needs a square operator")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    rq = 0.0
    for it in range(1, max_iter + 1):
        w = apply_operator(op, v)
        rq_new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return SpectralEstimate(0.0, True, it)
        v = w / nrm
        if abs(rq_new - rq) <= tol * abs(rq_new):
            return SpectralEstimate(rq_new, True, it)
        rq = rq_new
    log.warning("power iteration did not converge in %d iterations", max_iter)
    return SpectralEstimate(rq, False, max_iter)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    # operator applications, including the initial residual
    applies: int


def conjugate_gradient(op, rhs, x0=None, inner_tol: float = 1e-8,
                       max_iter: int = 10000) -> CGResult:
    """Conjugate gradients for an SPD operator.

    Terminates once successive iterates differ by less than ``inner_tol``
    in the Euclidean norm, or when the residual vanishes.
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - apply_operator(op, x)
    applies = 1
    p = r.copy()
    rr = float(r @ r)
    if rr == 0.0:
        return CGResult(x, 0, True, applies)
    for it in range(1, max_iter + 1):
        q = apply_operator(op, p)
        applies += 1
        pq = float(p @ q)
        if pq <= 0.0:
            raise NotPSDError("operator is not positive definite along a CG direction")
        alpha = rr / pq
        step = alpha * p
        x += step
        r -= alpha * q
        rr_new = float(r @ r)
        if np.linalg.norm(step) < inner_tol or rr_new == 0.0:
            return CGResult(x, it, True, applies)
        p = r + (rr_new / rr) * p
        rr = rr_new
    log.warning("CG hit max_iter=%d without meeting inner_tol=%g", max_iter, inner_tol)
    return CGResult(x, max_iter, False, applies)
