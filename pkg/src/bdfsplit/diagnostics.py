"""Post-hoc checks on solver traces.

All functions are pure: they read completed traces (or plain arrays) and
return small report objects that serialize to JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .splitting import L1QuadraticProblem, grad_Fn

__all__ = [
    "auxiliary_A",
    "MonotoneReport",
    "check_monotone_decrease",
    "ResidualBoundReport",
    "residual_bound_check",
    "RateFit",
    "fit_rate",
    "strong_convexity_gap",
]


class _Report:
    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def auxiliary_A(x, y, problem, delta_t: float, lipschitz: float | None = None,
                metric=None, variant: str = "A", omega_hat: float = 1.0) -> float:
    """``E(x) + (1/(4 dt) + L/2)||x - y||^2 + 1/2 ||x - y||_M^2``.

    ``metric`` is a callable returning ``M v``; for l1-quadratic problems it
    defaults to ``lam_hat*I - A^T A``, otherwise to zero.  ``variant="A_hat"``
    replaces ``L`` by ``omega_hat * L``.
    """
    if variant not in ("A", "A_hat"):
        raise ValueError("variant must be 'A' or 'A_hat'")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    L = problem.lipschitz if lipschitz is None else lipschitz
    if variant == "A_hat":
        L = omega_hat * L
    d = x - y
    if metric is None and isinstance(problem, L1QuadraticProblem):
        dp = problem.point(d)
        md = problem.metric_norm_sq(dp)
    elif metric is None:
        md = 0.0
    else:
        md = float(d @ np.asarray(metric(d), dtype=float))
    return problem.energy(x) + (0.25 / delta_t + 0.5 * L) * float(d @ d) + 0.5 * md


def strong_convexity_gap(problem, u1, u2, u_n, u_nm1, delta_t: float, omega: float = 1.0) -> float:
    """``<grad F^n(u1) - grad F^n(u2), u1 - u2> - (1/(2dt) - L)||u1 - u2||^2``.

    Nonnegative whenever the explicit step energy is strongly convex with the
    modulus ``1/(2dt) - L``.
    """
    d = np.asarray(u1, dtype=float) - np.asarray(u2, dtype=float)
    g1 = grad_Fn(problem, u1, u_n, u_nm1, delta_t, omega)
    g2 = grad_Fn(problem, u2, u_n, u_nm1, delta_t, omega)
    m = 0.5 / delta_t - problem.lipschitz
    return float((g1 - g2) @ d) - m * float(d @ d)


@dataclass
class MonotoneReport(_Report):
    steps: int
    violations: int
    worst_violation: float
    violation_indices: list
    c_min: float
    c_fit: float
    positive_fraction: float
    sum_step_sq: float
    aux_drop: float
    sum_bound: float
    sum_bound_holds: bool
    final_aux: float
    regime: str = "unknown"
    asserted: bool = True


def check_monotone_decrease(trace, tol_rel: float = 1e-10, tol_abs: float = 0.0,
                            aux0: float | None = None, step_norms=None,
                            regime: str | None = None) -> MonotoneReport:
    """Count increases of the auxiliary sequence and fit the per-step constant.

    ``trace`` is a :class:`~bdfsplit.solvers.Trace` or an array of ``A``
    values (then ``aux0`` and ``step_norms`` must be given).  A violation is
    ``A_{n+1} > A_n (1 + tol_rel) + tol_abs`` (relative to ``|A_n|``).  The
    per-step ratios ``(A_n - A_{n+1}) / ||u_{n+1} - u_n||^2`` give ``c_min``;
    ``c_fit`` is their minimum over the steps where it is positive.
    """
    if hasattr(trace, "records"):
        A = trace.column("A")
        steps = trace.column("step_norm")
        a0 = trace.energy0 if aux0 is None else aux0
        regime = regime or trace.meta.get("regime", "unknown")
    else:
        A = np.asarray(trace, dtype=float)
        if aux0 is None or step_norms is None:
            raise ValueError("array input needs aux0 and step_norms")
        steps = np.asarray(step_norms, dtype=float)
        a0 = aux0
    regime = regime or "unknown"
    if A.size == 0:
        raise ValueError("empty trace")
    if np.any(np.isnan(A)):
        raise ValueError("trace has no auxiliary values (implicit metric)")
    prev = np.concatenate([[a0], A[:-1]])
    excess = A - (prev + tol_rel * np.abs(prev) + tol_abs)
    bad = np.flatnonzero(excess > 0)
    drop = prev - A
    sq = steps ** 2
    moving = sq > 0
    ratios = np.full(A.shape, np.inf)
    ratios[moving] = drop[moving] / sq[moving]
    c_min = float(ratios[moving].min()) if moving.any() else math.inf
    pos = ratios[moving] > 0
    c_fit = float(ratios[moving][pos].min()) if pos.any() else math.nan
    positive_fraction = float(pos.mean()) if moving.any() else 1.0
    total_drop = float(a0 - A[-1])
    sum_sq = float(sq.sum())
    bound = total_drop / c_fit if c_fit and math.isfinite(c_fit) and c_fit > 0 else math.nan
    holds = bool(sum_sq == 0.0 or (math.isfinite(bound) and sum_sq <= bound * (1.0 + 1e-6)))
    return MonotoneReport(
        steps=int(A.size), violations=int(bad.size),
        worst_violation=float(excess[bad].max()) if bad.size else 0.0,
        violation_indices=[int(i) for i in bad[:50]],
        c_min=c_min, c_fit=c_fit, positive_fraction=positive_fraction,
        sum_step_sq=sum_sq, aux_drop=total_drop, sum_bound=bound, sum_bound_holds=holds,
        final_aux=float(A[-1]), regime=regime, asserted=(regime != "marginal"),
    )


@dataclass
class ResidualBoundReport(_Report):
    steps: int
    d_fit: float
    d_tail: float
    diverging: bool
    surrogate_first: float
    surrogate_final: float
    label: str = "upper-bound surrogate of dist(0, dA)"


def residual_bound_check(trace, surrogate=None, step_norms=None,
                         tail_fraction: float = 0.25) -> ResidualBoundReport:
    """Smallest ``D`` with ``s_n <= D (||d_n|| + ||d_{n-1}||)`` along the trace.

    ``s_n`` is the recorded subgradient surrogate.  The fit is divergent when
    some step in the tail window needs an infinite ``D`` (positive surrogate
    while the iterates stand still).
    """
    if hasattr(trace, "records"):
        s = trace.column("surrogate")
        d = trace.column("step_norm")
    else:
        s = np.asarray(surrogate, dtype=float)
        d = np.asarray(step_norms, dtype=float)
    if s.size == 0:
        raise ValueError("empty trace")
    if np.all(np.isnan(s)):
        raise ValueError("trace carries no surrogate values")
    denom = d + np.concatenate([[0.0], d[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s == 0.0, 0.0, s / denom)
    ratio = np.where(np.isnan(ratio), 0.0, ratio)
    start = int(len(ratio) * (1.0 - tail_fraction)) if len(ratio) > 1 else 0
    tail = ratio[start:]
    return ResidualBoundReport(
        steps=int(s.size), d_fit=float(ratio.max()), d_tail=float(tail.max()),
        diverging=bool(not np.all(np.isfinite(tail))),
        surrogate_first=float(s[0]), surrogate_final=float(s[-1]),
    )


@dataclass
class RateFit(_Report):
    kind: str                       # finite-termination | linear | sublinear | inconclusive
    eta: float = math.nan
    p: float = math.nan
    r2_linear: float = math.nan
    r2_sublinear: float = math.nan
    n_points: int = 0
    n_terminate: int | None = None
    extra: dict = field(default_factory=dict)


def _r2(x, y) -> tuple[float, float]:
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def fit_rate(trace_or_errors, u_star=None, tail_fraction: float = 1.0,
             zero_tol: float = 0.0, min_points: int = 10) -> RateFit:
    """Classify the decay of ``e_n = ||u_n - u*||``.

    Accepts a trace (using its kept iterates with ``u_star``, or its
    ``dist_ref`` column) or the error sequence itself, indexed from 1.  If
    the errors hit ``zero_tol`` and stay there the result is finite
    termination; otherwise ``log e_n`` is regressed on ``n`` (linear,
    ``eta = exp(slope)``) and on ``log n`` (sublinear, ``p = -slope``) over
    the last ``tail_fraction`` of the points and the better ``R^2`` wins.
    """
    if hasattr(trace_or_errors, "records"):
        tr = trace_or_errors
        if tr.iterates is not None and u_star is not None:
            us = np.asarray(u_star, dtype=float)
            e = np.array([np.linalg.norm(u - us) for u in tr.iterates[1:]])
        else:
            e = tr.column("dist_ref")
            if np.all(np.isnan(e)):
                raise ValueError("trace has neither iterates nor reference distances")
    else:
        e = np.asarray(trace_or_errors, dtype=float)
    n = np.arange(1, e.size + 1, dtype=float)
    zero = e <= zero_tol
    if zero.any():
        first = int(np.argmax(zero))
        if zero[first:].all():
            return RateFit("finite-termination", n_points=int(e.size), n_terminate=first + 1)
    keep = np.isfinite(e) & (e > zero_tol)
    n, e = n[keep], e[keep]
    start = int(round(len(e) * (1.0 - tail_fraction)))
    n, e = n[start:], e[start:]
    if e.size < min_points:
        return RateFit("inconclusive", n_points=int(e.size))
    le = np.log(e)
    s_lin, r2_lin = _r2(n, le)
    s_sub, r2_sub = _r2(np.log(n), le)
    kind = "linear" if r2_lin >= r2_sub else "sublinear"
    return RateFit(kind, eta=math.exp(s_lin), p=-s_sub, r2_linear=r2_lin, r2_sublinear=r2_sub,
                   n_points=int(e.size))


def save_report(report: _Report, path) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json(indent=2, sort_keys=True))
