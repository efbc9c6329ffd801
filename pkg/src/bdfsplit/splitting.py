"""Splitting energies and subproblem backends.

The composite energy is ``E = H + F`` with ``H`` convex and ``F`` smooth.  One
outer step of the BDF2/Adams-Bashforth scheme with extrapolation solves

    0 in dH(u) + (3u - 4u_n + u_{n-1}) / (2 dt) + drive + M (u - y_n)

where ``drive = (1 + w) f(u_n) - w f(u_{n-1})`` and ``y_n`` is the extrapolated
point.  Two structures for ``H`` are supported:

* ``"l1-quadratic"``: ``lam*||u||_1 + 0.5*||Au - b||^2`` with the metric
  ``M = lam_hat*I - A^T A``, which makes the subproblem a single
  soft-threshold.
* ``"quadratic-linear"``: ``0.5*u^T K u - b0^T u + c0``, where ``M`` is
  induced by a few sweeps of a classical preconditioned iteration on
  ``T = 3/(2 dt) I + K``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, splu, spsolve_triangular

from .linalg import apply_operator, as_operator, estimate_spectral_norm

__all__ = [
    "Point",
    "SplitProblem",
    "L1QuadraticProblem",
    "QuadraticLinearProblem",
    "StepParams",
    "SubproblemSpec",
    "validate_step",
    "assemble_spec",
    "grad_Fn",
    "solve_subproblem_prox",
    "Preconditioner",
    "build_preconditioner",
    "PrecondResult",
    "solve_subproblem_preconditioned",
    "is_strictly_diagonally_dominant",
    "soft_threshold",
]

log = logging.getLogger(__name__)


def soft_threshold(x, tau):
    """Componentwise ``sign(x) * max(|x| - tau, 0)``."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("threshold must be nonnegative")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


@dataclass(frozen=True)
class Point:
    """An iterate together with the linear images the problem caches for it.

    Because every cached image is linear in ``u``, affine combinations of
    points are exact and cost no operator applications.
    """

    u: np.ndarray
    images: tuple = ()

    def combine(self, a: float, other: "Point", b: float) -> "Point":
        return Point(a * self.u + b * other.u,
                     tuple(a * p + b * q for p, q in zip(self.images, other.images)))

    def extrapolate(self, prev: "Point", beta: float) -> "Point":
        """``self + beta * (self - prev)``."""
        if beta == 0.0:
            return self
        return self.combine(1.0 + beta, prev, -beta)

    def __sub__(self, other: "Point") -> "Point":
        return self.combine(1.0, other, -1.0)


class SplitProblem:
    """Base class for ``E = H + F``.

    Subclasses provide ``f`` (the gradient of ``F``), ``F_value``, a Lipschitz
    constant ``lipschitz`` for ``f`` and point/energy helpers that work from
    cached operator images.  Operator applications are tallied in the
    ``counts`` mapping passed by the caller, so shared problem objects stay
    read-only.
    """

    structure: str = ""
    lipschitz: float = 0.0
    dim: int = 0

    def __init__(self, grad_F: Callable, F_value: Callable, lipschitz: float):
        self._grad_F = grad_F
        self._F_value = F_value
        self.lipschitz = float(lipschitz)

    def f(self, u, counts: Counter | None = None) -> np.ndarray:
        if counts is not None:
            counts["f"] += 1
        out = np.asarray(self._grad_F(u), dtype=float)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("gradient oracle returned non-finite values")
        return out

    def F(self, u) -> float:
        return float(self._F_value(u))

    def point(self, u, counts: Counter | None = None) -> Point:
        raise NotImplementedError

    def energy_at(self, pt: Point) -> float:
        raise NotImplementedError

    def energy(self, u) -> float:
        return self.energy_at(self.point(np.asarray(u, dtype=float)))

    def residual_at(self, pt: Point, fu) -> float:
        raise NotImplementedError

    def check_iterate(self, u) -> None:
        """Hook for problem-specific sanity checks on new iterates."""


class L1QuadraticProblem(SplitProblem):
    """``H(u) = lam*||u||_1 + 0.5*||Au - b||^2``.

    Points cache ``(A u, A^T A u)``.  ``lambda_hat`` must dominate the largest
    eigenvalue of ``A^T A``; it is estimated by power iteration with a small
    safety factor when not given.
    """

    structure = "l1-quadratic"

    def __init__(self, A, b, lam: float, grad_F, F_value, lipschitz: float,
                 lambda_hat: float | None = None, literal_residual: bool = False):
        super().__init__(grad_F, F_value, lipschitz)
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.lam = float(lam)
        self.dim = self.A.shape[1]
        self.Atb = self.A.T @ self.b
        if lambda_hat is None:
            lambda_hat = gram_lambda_max(self.A).upper(1e-6)
        self.lambda_hat = float(lambda_hat)
        self.literal_residual = literal_residual

    def point(self, u, counts: Counter | None = None) -> Point:
        u = np.asarray(u, dtype=float)
        Au = self.A @ u
        AtAu = self.A.T @ Au
        if counts is not None:
            counts["A"] += 1
            counts["At"] += 1
        return Point(u, (Au, AtAu))

    def energy_at(self, pt: Point) -> float:
        r = pt.images[0] - self.b
        return 0.5 * float(r @ r) + self.lam * float(np.abs(pt.u).sum()) + self.F(pt.u)

    def metric_apply(self, pt: Point) -> np.ndarray:
        """``M v`` for ``M = lam_hat*I - A^T A`` from cached images."""
        return self.lambda_hat * pt.u - pt.images[1]

    def metric_norm_sq(self, pt: Point) -> float:
        Av = pt.images[0]
        return self.lambda_hat * float(pt.u @ pt.u) - float(Av @ Av)

    def smooth_grad_at(self, pt: Point, fu) -> np.ndarray:
        """Gradient of ``0.5*||Au - b||^2 + F`` at the point."""
        return pt.images[1] - self.Atb + fu

    def residual_at(self, pt: Point, fu, gamma: float = 1.0) -> float:
        """Norm of the proximal-gradient map with step ``gamma``.

        With ``literal_residual`` the smooth part is ``0.5||Au-b||^2 - F``
        instead of ``0.5||Au-b||^2 + F``.
        """
        g = pt.images[1] - self.Atb + (-fu if self.literal_residual else fu)
        u = pt.u
        G = (u - soft_threshold(u - gamma * g, gamma * self.lam)) / gamma
        return float(np.linalg.norm(G))


class QuadraticLinearProblem(SplitProblem):
    """``H(u) = 0.5*u^T K u - b0^T u + c0`` with ``K`` symmetric PSD.

    ``prior_diag`` optionally marks a diagonal part of ``K`` (with matching
    part of ``b0``) that linearizing methods may treat explicitly.  Points
    cache ``K u``.
    """

    structure = "quadratic-linear"

    def __init__(self, K, b0, grad_F, F_value, lipschitz: float, c0: float = 0.0,
                 prior_diag=None):
        super().__init__(grad_F, F_value, lipschitz)
        self.K = sps.csr_matrix(K) if sps.issparse(K) else np.asarray(K, dtype=float)
        self.b0 = np.asarray(b0, dtype=float)
        self.c0 = float(c0)
        self.dim = self.K.shape[0]
        self.prior_diag = None if prior_diag is None else np.asarray(prior_diag, dtype=float)

    def apply_K(self, u, counts: Counter | None = None) -> np.ndarray:
        if counts is not None:
            counts["T"] += 1
        return np.asarray(self.K @ u, dtype=float).ravel()

    def point(self, u, counts: Counter | None = None) -> Point:
        u = np.asarray(u, dtype=float)
        return Point(u, (self.apply_K(u, counts),))

    def energy_at(self, pt: Point) -> float:
        u = pt.u
        return 0.5 * float(u @ pt.images[0]) - float(self.b0 @ u) + self.c0 + self.F(u)

    def grad_at(self, pt: Point, fu) -> np.ndarray:
        return pt.images[0] - self.b0 + fu

    def residual_at(self, pt: Point, fu) -> float:
        return float(np.linalg.norm(self.grad_at(pt, fu)))

    def T_matrix(self, delta_t: float):
        n = self.dim
        if sps.issparse(self.K):
            return (self.K + (1.5 / delta_t) * sps.identity(n, format="csr")).tocsr()
        return self.K + (1.5 / delta_t) * np.eye(n)


def gram_lambda_max(A, tol: float = 1e-10, seed: int = 0):
    """Largest eigenvalue of ``A^T A`` via power iteration on the smaller Gram side."""
    m, k = A.shape
    if m <= k:
        op = LinearOperator((m, m), matvec=lambda x: A @ (A.T @ x), dtype=float)
    else:
        op = LinearOperator((k, k), matvec=lambda x: A.T @ (A @ x), dtype=float)
    return estimate_spectral_norm(op, tol=tol, max_iter=20000, seed=seed)


# ---------------------------------------------------------------------------
# Step parameters and subproblem assembly
# ---------------------------------------------------------------------------

def validate_step(L: float, delta_t: float, omega_hat: float = 1.0) -> str:
    """Classify a time step as ``"strict"``, ``"marginal"`` or ``"invalid"``.

    ``strict``: ``delta_t < 1/(2L)`` (the splitting energy is strongly
    convex) and ``max(1, omega_hat)*delta_t < 3/(4L)``.  ``marginal``: only the
    second bound holds.  Anything else is invalid.
    """
    if L < 0 or delta_t <= 0 or omega_hat < 0:
        raise ValueError("need L >= 0, delta_t > 0, omega_hat >= 0")
    if L == 0:
        return "strict"
    if max(1.0, omega_hat) * delta_t >= 3.0 / (4.0 * L):
        return "invalid"
    if delta_t < 1.0 / (2.0 * L):
        return "strict"
    return "marginal"


@dataclass(frozen=True)
class StepParams:
    delta_t: float
    omega: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")


@dataclass(frozen=True)
class SubproblemSpec:
    """Data of one convexified subproblem.

    ``linear`` is the gradient of the explicit energy at the expansion point,
    ``(history - u_nm1)/(2 dt) - drive``; the subproblem minimizes
    ``H(u) + 3/(4dt)||u - u_n||^2 - <linear, u> + 0.5||u - y_n||_M^2``.
    """

    u_n: Point
    u_nm1: Point
    y_n: Point
    drive: np.ndarray
    linear: np.ndarray
    params: StepParams


def _as_point(problem: SplitProblem, u, counts) -> Point:
    return u if isinstance(u, Point) else problem.point(u, counts)


def assemble_spec(problem: SplitProblem, u_n, u_nm1, params: StepParams,
                  f_n=None, f_nm1=None, counts: Counter | None = None,
                  variant: str = "standard") -> SubproblemSpec:
    """Build the subproblem for one outer step.

    Gradients not supplied through ``f_n``/``f_nm1`` are evaluated.  The
    ``variant`` switches between the standard expansion at ``u_n`` and two
    expansions at the extrapolated point: ``"grad-at-y"`` evaluates the whole
    explicit gradient at ``y_n``; ``"mixed"`` only moves the BDF history term.
    """
    p_n = _as_point(problem, u_n, counts)
    p_nm1 = _as_point(problem, u_nm1, counts)
    if p_n.u.shape != p_nm1.u.shape:
        raise ValueError("iterates must have the same dimension")
    if f_n is None:
        f_n = problem.f(p_n.u, counts)
    if f_nm1 is None:
        f_nm1 = problem.f(p_nm1.u, counts)
    w, dt = params.omega, params.delta_t
    y = p_n.extrapolate(p_nm1, params.beta)
    if variant == "standard":
        drive = (1.0 + w) * f_n - w * f_nm1 if w != 0.0 else f_n
        history = p_n.u
    elif variant == "grad-at-y":
        drive = problem.f(y.u, counts) + w * (f_n - f_nm1)
        history = y.u
    elif variant == "mixed":
        drive = (1.0 + w) * f_n - w * f_nm1
        history = y.u
    else:
        raise ValueError(f"unknown subproblem variant {variant!r}")
    linear = (history - p_nm1.u) / (2.0 * dt) - drive
    return SubproblemSpec(p_n, p_nm1, y, drive, linear, params)


def grad_Fn(problem: SplitProblem, u, u_n, u_nm1, delta_t: float, omega: float = 1.0):
    """Gradient of the explicit per-step energy ``F^n``.

    ``(u - u_{n-1})/(2dt) - f(u) - (1+w) f(u_n) + w f(u_{n-1})``; at ``w = 1``
    this is the BDF2/AB2 form.
    """
    u = np.asarray(u, dtype=float)
    return ((u - np.asarray(u_nm1, dtype=float)) / (2.0 * delta_t) - problem.f(u)
            - (1.0 + omega) * problem.f(u_n) + omega * problem.f(u_nm1))


def solve_subproblem_prox(spec: SubproblemSpec, problem: L1QuadraticProblem) -> np.ndarray:
    """Exact minimizer for the l1-plus-quadratic structure.

    With ``M = lam_hat*I - A^T A`` the quadratic terms in ``A`` cancel and the
    minimizer is ``soft(c/rho, lam/rho)`` with ``rho = lam_hat + 3/(2dt)``.
    """
    if problem.structure != "l1-quadratic":
        raise TypeError("prox backend needs an l1-quadratic problem")
    dt = spec.params.delta_t
    rho = problem.lambda_hat + 1.5 / dt
    y = spec.y_n
    c = problem.Atb + (1.5 / dt) * spec.u_n.u + spec.linear + problem.metric_apply(y)
    return soft_threshold(c / rho, problem.lam / rho)


# ---------------------------------------------------------------------------
# Preconditioners
# ---------------------------------------------------------------------------

def is_strictly_diagonally_dominant(T) -> bool:
    T = sps.csr_matrix(T)
    d = np.abs(T.diagonal())
    off = np.asarray(abs(T).sum(axis=1)).ravel() - d
    return bool(np.all(d > off))


class Preconditioner:
    """Splitting operator ``PM`` approximating ``T``; one sweep is
    ``v <- v + PM^{-1}(b - T v)``.

    ``kind`` is one of ``jacobi``, ``sgs``, ``richardson`` or ``exact``.  The
    proximal metric of a single sweep is ``PM - T``.
    """

    def __init__(self, T, kind: str, tau: float | None = None):
        self.kind = kind
        self.T = sps.csr_matrix(T)
        n = self.T.shape[0]
        d = self.T.diagonal()
        if kind != "exact" and np.any(d <= 0):
            raise ValueError("preconditioner needs a strictly positive diagonal")
        self.diag = d
        if kind == "jacobi":
            self._inv = lambda r: r / d
            self.matrix = sps.diags(d, format="csr")
        elif kind == "sgs":
            self._lower = sps.tril(self.T, format="csr")          # D + L
            self._upper = sps.triu(self.T, format="csr")          # D + L^T
            self._inv = self._sgs_inv
            self.matrix = (self._lower @ sps.diags(1.0 / d) @ self._upper).tocsr()
        elif kind == "richardson":
            if tau is None:
                lam = estimate_spectral_norm(as_operator(self.T), tol=1e-10).upper(1e-6)
                tau = 1.0 / lam
            if tau <= 0:
                raise ValueError("Richardson step must be positive")
            self.tau = float(tau)
            self._inv = lambda r: self.tau * r
            self.matrix = sps.identity(n, format="csr") / self.tau
        elif kind == "exact":
            lu = splu(sps.csc_matrix(self.T))
            self._inv = lu.solve
            self.matrix = self.T
        else:
            raise ValueError(f"unknown preconditioner kind {kind!r}")

    def _sgs_inv(self, r):
        z = spsolve_triangular(self._lower, r, lower=True)
        return spsolve_triangular(self._upper, self.diag * z, lower=False)

    def apply_inv(self, r) -> np.ndarray:
        return np.asarray(self._inv(np.asarray(r, dtype=float)), dtype=float).ravel()

    def metric_apply(self, v) -> np.ndarray:
        """``(PM - T) v``, the metric induced by one sweep."""
        return np.asarray(self.matrix @ v - self.T @ v).ravel()


def build_preconditioner(T, kind: str, tau: float | None = None) -> Preconditioner:
    return Preconditioner(T, kind, tau)


@dataclass
class PrecondResult:
    u: np.ndarray
    Ku: np.ndarray
    residual: np.ndarray     # b^n - T u
    rhs: np.ndarray          # b^n
    applies: int


def solve_subproblem_preconditioned(spec: SubproblemSpec, problem: QuadraticLinearProblem,
                                    pc: Preconditioner, k_steps: int = 1,
                                    counts: Counter | None = None) -> PrecondResult:
    """Run ``k_steps`` preconditioned sweeps on ``T u = b^n`` from ``y_n``.

    ``b^n = b0 + 3/(2dt) u_n + linear``, which for the standard expansion is
    ``b0 + (4u_n - u_{n-1})/(2dt) - drive``.  ``T y_n`` comes from the cached
    image of ``y_n``, so the cost is exactly ``k_steps`` applications of ``K``.
    """
    if problem.structure != "quadratic-linear":
        raise TypeError("preconditioned backend needs a quadratic-linear problem")
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    c = 1.5 / spec.params.delta_t
    bn = problem.b0 + c * spec.u_n.u + spec.linear
    v = spec.y_n.u.copy()
    Kv = spec.y_n.images[0]
    for _ in range(k_steps):
        r = bn - (c * v + Kv)
        v = v + pc.apply_inv(r)
        Kv = problem.apply_K(v, counts)
    r = bn - (c * v + Kv)
    return PrecondResult(v, Kv, r, bn, k_steps)
