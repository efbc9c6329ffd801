"""Outer iteration drivers.

Algorithms
----------
``dca``
    Classical DCA with the strongly convex split ``H + a/2||u||^2`` minus
    ``a/2||u||^2 - F``.
``pdca_e``
    Proximal DCA with extrapolation: a proximal-gradient step on the smooth
    part taken at the extrapolated point.
``bdca``
    DCA followed by a backtracking line search along the DCA direction.
``bapdca_e``
    BDF2/Adams-Bashforth splitting with extrapolation and preconditioning
    (``pubc_e`` with the gradient-history weight fixed at one).
``pubc_e``
    The unified scheme with both extrapolation schedules.

For the l1-quadratic structure all subproblems are soft-thresholds; for the
quadratic-linear structure ``pubc_e``/``bapdca_e`` use preconditioned sweeps
and the DCA family uses conjugate gradients.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .gl import dice
from .linalg import conjugate_gradient
from .schedules import BetaSchedule, OmegaSchedule, adaptive_restart_check
from .splitting import (
    Point,
    Preconditioner,
    SplitProblem,
    StepParams,
    assemble_spec,
    build_preconditioner,
    is_strictly_diagonally_dominant,
    soft_threshold,
    solve_subproblem_preconditioned,
    solve_subproblem_prox,
    validate_step,
)

__all__ = [
    "ALGORITHMS",
    "LineSearchParams",
    "StopRule",
    "SolverConfig",
    "TraceRecord",
    "Trace",
    "IterationState",
    "SolverError",
    "check_stop",
    "run",
    "step_pubce",
    "step_dca",
    "step_pdcae",
    "step_bdca",
]

log = logging.getLogger(__name__)

ALGORITHMS = ("dca", "pdca_e", "bdca", "bapdca_e", "pubc_e")
TRACE_COLUMNS = ("n", "E", "A", "step_norm", "beta", "omega", "residual", "restart",
                 "wall_ns", "surrogate", "dist_ref", "dice")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class LineSearchParams:
    t0: float = 1.0
    alpha: float = 1e-4
    shrink: float = 0.5
    t_min: float = 1e-8
    grow: float = 2.0


@dataclass(frozen=True)
class StopRule:
    """Termination test.

    kinds: ``rel-change`` (``||u_n - u_{n-1}|| / max(1, ||u_n||) < tol``),
    ``abs-change``, ``grad-norm`` (smooth problems only), ``dice-bound``
    (DICE against the truth mask ``>= tol``) and ``composite`` (first
    satisfied of ``rules``).
    """

    kind: str = "rel-change"
    tol: float = 1e-5
    rules: tuple = ()

    def __post_init__(self):
        if self.kind not in ("rel-change", "abs-change", "grad-norm", "dice-bound", "composite"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if self.kind == "composite":
            if not self.rules:
                raise ValueError("composite stop rule needs sub-rules")
        elif self.tol <= 0:
            raise ValueError("stop tolerance must be positive")

    @property
    def name(self) -> str:
        return f"{self.kind}({self.tol:g})"


@dataclass
class SolverConfig:
    algorithm: str = "pubc_e"
    delta_t: float | None = None
    beta: BetaSchedule = field(default_factory=lambda: BetaSchedule.fista_adaptive_restart())
    omega: OmegaSchedule = field(default_factory=OmegaSchedule.constant)
    preconditioner: str = "jacobi"
    k_steps: int = 1
    alpha: float | None = None          # DCA modulus
    alpha_hat: float | None = None      # pDCA_e proximal constant
    linesearch: LineSearchParams = field(default_factory=LineSearchParams)
    stop: StopRule = field(default_factory=StopRule)
    max_iter: int = 5000
    variant: str = "standard"
    cg_tol: float = 1e-8
    cg_max_iter: int = 10000
    keep_iterates: bool = False
    label: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")

    @property
    def name(self) -> str:
        return self.label or self.algorithm


@dataclass
class TraceRecord:
    n: int
    energy: float
    aux: float
    step_norm: float
    beta: float
    omega: float
    residual: float
    restart: bool
    wall_ns: int = 0
    surrogate: float = math.nan
    dist_ref: float = math.nan
    dice: float = math.nan
    counts: dict = field(default_factory=dict)
    u_norm: float = 0.0

    def row(self) -> list:
        return [self.n, self.energy, self.aux, self.step_norm, self.beta, self.omega,
                self.residual, int(self.restart), self.wall_ns, self.surrogate,
                self.dist_ref, self.dice]


@dataclass
class Trace:
    algorithm: str
    records: list
    u: np.ndarray
    stop_reason: str
    wall_time: float
    counts: dict
    energy0: float
    iterates: list | None = None
    meta: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        attr = {"E": "energy", "A": "aux"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.records], dtype=float)

    @property
    def final_residual(self) -> float:
        return self.records[-1].residual if self.records else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])


@dataclass
class IterationState:
    n: int
    cur: Point
    prev: Point
    f_cur: np.ndarray
    f_prev: np.ndarray
    beta_sched: BetaSchedule
    omega_sched: OmegaSchedule
    counts: Counter
    y_prev: np.ndarray | None = None
    trace: list = field(default_factory=list)
    pc: Preconditioner | None = None
    delta_t: float = 1.0
    L_eff: float = 0.0
    t_trial: float = 1.0

    def advance(self, new: Point, f_new: np.ndarray, y: np.ndarray | None = None):
        self.prev, self.cur = self.cur, new
        self.f_prev, self.f_cur = self.f_cur, f_new
        self.y_prev = y
        self.n += 1


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _restart_signal(state: IterationState) -> bool:
    if not state.beta_sched.adaptive or state.y_prev is None:
        return False
    return adaptive_restart_check(state.y_prev, state.cur.u, state.prev.u)


def _metric_of_step(problem, state: IterationState, config: SolverConfig, delta: Point):
    """``M (u_{n+1} - u_n)`` and ``||u_{n+1} - u_n||_M^2`` when ``M`` is explicit."""
    if problem.structure == "l1-quadratic":
        return problem.metric_apply(delta), problem.metric_norm_sq(delta)
    pc = state.pc
    if pc is None or config.k_steps != 1:
        return None, math.nan
    if pc.kind == "exact":
        z = np.zeros_like(delta.u)
        return z, 0.0
    T_delta = (1.5 / state.delta_t) * delta.u + delta.images[0]
    Md = np.asarray(pc.matrix @ delta.u).ravel() - T_delta
    return Md, float(delta.u @ Md)


def step_pubce(problem: SplitProblem, state: IterationState, config: SolverConfig) -> TraceRecord:
    """One outer step of the unified scheme; appends and returns its record."""
    counts = state.counts
    dt = state.delta_t
    restart = _restart_signal(state)
    beta, restarted = state.beta_sched.next_beta(restart)
    omega = 1.0 if config.algorithm == "bapdca_e" else state.omega_sched.next_omega(beta)
    params = StepParams(dt, omega, beta)
    spec = assemble_spec(problem, state.cur, state.prev, params, state.f_cur, state.f_prev,
                         counts, config.variant)
    if problem.structure == "l1-quadratic":
        u_new = solve_subproblem_prox(spec, problem)
        new = problem.point(u_new, counts)
        M_uy = problem.metric_apply(new - spec.y_n)
    else:
        res = solve_subproblem_preconditioned(spec, problem, state.pc, config.k_steps, counts)
        new = Point(res.u, (res.Ku,))
        M_uy = res.residual
    problem.check_iterate(new.u)
    f_new = problem.f(new.u, counts)

    delta = new - state.cur
    step_norm = float(np.linalg.norm(delta.u))
    E_new = problem.energy_at(new)
    Md, md_sq = _metric_of_step(problem, state, config, delta)
    dsq = step_norm * step_norm
    aux = E_new + (0.25 / dt + 0.5 * state.L_eff) * dsq + 0.5 * md_sq
    surrogate = math.nan
    if Md is not None:
        # element of dH(u_{n+1}) read off the optimality condition
        xi = -(1.5 / dt) * delta.u + spec.linear - M_uy
        CMd = (0.5 / dt + state.L_eff) * delta.u + Md
        surrogate = math.sqrt(float(np.sum((xi + f_new + CMd) ** 2)) + float(np.sum(CMd ** 2)))
    rec = TraceRecord(state.n, E_new, aux, step_norm, beta, omega,
                      problem.residual_at(new, f_new), restarted or restart,
                      surrogate=surrogate, u_norm=float(np.linalg.norm(new.u)))
    state.advance(new, f_new, spec.y_n.u)
    return rec


def _dca_point_l1(problem, state: IterationState, alpha: float) -> np.ndarray:
    cur = state.cur
    g = alpha * cur.u - state.f_cur - (cur.images[1] - problem.Atb)
    return soft_threshold(g / alpha, problem.lam / alpha)


def _cg_solve(problem, state, config, diag_shift: float, rhs, x0, drop_prior: bool = False):
    K = problem.K
    prior = problem.prior_diag if drop_prior else None
    counts = state.counts

    def mv(x):
        out = np.asarray(K @ x).ravel() + diag_shift * x
        if prior is not None:
            out = out - prior * x
        return out

    op = LinearOperator(K.shape, matvec=mv, dtype=float)
    res = conjugate_gradient(op, rhs, x0, inner_tol=config.cg_tol, max_iter=config.cg_max_iter)
    counts["T"] += res.applies
    counts["cg"] += res.iterations
    if not res.converged:
        log.warning("inner CG did not converge at outer iteration %d", state.n)
    return res.x


def _dca_point_ql(problem, state: IterationState, config: SolverConfig, alpha: float) -> np.ndarray:
    rhs = problem.b0 + alpha * state.cur.u - state.f_cur
    return _cg_solve(problem, state, config, alpha, rhs, state.cur.u)


def _simple_record(problem, state, new: Point, f_new, beta=0.0, restart=False) -> TraceRecord:
    step_norm = float(np.linalg.norm(new.u - state.cur.u))
    E_new = problem.energy_at(new)
    return TraceRecord(state.n, E_new, math.nan, step_norm, beta, 0.0,
                       problem.residual_at(new, f_new), restart,
                       u_norm=float(np.linalg.norm(new.u)))


def step_dca(problem: SplitProblem, state: IterationState, alpha: float,
             config: SolverConfig | None = None) -> TraceRecord:
    config = config or SolverConfig(algorithm="dca")
    if problem.structure == "l1-quadratic":
        u_new = _dca_point_l1(problem, state, alpha)
    else:
        u_new = _dca_point_ql(problem, state, config, alpha)
    new = problem.point(u_new, state.counts)
    problem.check_iterate(new.u)
    f_new = problem.f(new.u, state.counts)
    rec = _simple_record(problem, state, new, f_new)
    state.advance(new, f_new)
    return rec


def step_pdcae(problem: SplitProblem, state: IterationState, config: SolverConfig,
               alpha_hat: float) -> TraceRecord:
    restart = _restart_signal(state)
    beta, restarted = state.beta_sched.next_beta(restart)
    y = state.cur.extrapolate(state.prev, beta)
    if problem.structure == "l1-quadratic":
        g = y.images[1] - problem.Atb + state.f_cur
        u_new = soft_threshold(y.u - g / alpha_hat, problem.lam / alpha_hat)
    else:
        rhs = alpha_hat * y.u + problem.b0 - state.f_cur
        drop = problem.prior_diag is not None
        if drop:
            rhs = rhs - problem.prior_diag * y.u
        u_new = _cg_solve(problem, state, config, alpha_hat, rhs, y.u, drop_prior=drop)
    new = problem.point(u_new, state.counts)
    problem.check_iterate(new.u)
    f_new = problem.f(new.u, state.counts)
    rec = _simple_record(problem, state, new, f_new, beta, restarted or restart)
    state.advance(new, f_new, y.u)
    return rec


def step_bdca(problem: SplitProblem, state: IterationState, ls: LineSearchParams,
              alpha: float, config: SolverConfig | None = None) -> TraceRecord:
    """DCA point ``v`` then backtracking along ``d = v - u_n``.

    ``v + t d`` is accepted when ``E(v + t d) <= E(v) - alpha_ls t^2 ||d||^2``;
    the trial step doubles after an immediate acceptance and falls back to
    ``t0`` after a failed search.
    """
    config = config or SolverConfig(algorithm="bdca")
    counts = state.counts
    cur = state.cur
    if problem.structure == "l1-quadratic":
        v = _dca_point_l1(problem, state, alpha)
        Av = problem.A @ v
        counts["A"] += 1
    else:
        v = _dca_point_ql(problem, state, config, alpha)
        Av = problem.apply_K(v, counts)
    d = v - cur.u
    Ad = Av - cur.images[0]
    dsq = float(d @ d)
    E_v = problem.energy_at(Point(v, (Av,)))
    t_acc = 0.0
    if dsq > 0.0:
        t = state.t_trial
        first = True
        while t >= ls.t_min:
            counts["F"] += 1
            if problem.energy_at(Point(v + t * d, (Av + t * Ad,))) <= E_v - ls.alpha * t * t * dsq:
                t_acc = t
                break
            t *= ls.shrink
            first = False
        if t_acc == 0.0:
            state.t_trial = ls.t0
        elif first:
            state.t_trial = ls.grow * t_acc
        else:
            state.t_trial = t_acc
    u_new = v + t_acc * d
    Au_new = Av + t_acc * Ad
    if problem.structure == "l1-quadratic":
        new = Point(u_new, (Au_new, problem.A.T @ Au_new))
        counts["At"] += 1
    else:
        new = Point(u_new, (Au_new,))
    problem.check_iterate(new.u)
    f_new = problem.f(new.u, counts)
    rec = _simple_record(problem, state, new, f_new)
    state.advance(new, f_new)
    return rec


# ---------------------------------------------------------------------------
# stopping and the driver loop
# ---------------------------------------------------------------------------

def _rule_met(rule: StopRule, rec: TraceRecord, problem, truth) -> bool:
    if rule.kind == "rel-change":
        return rec.step_norm / max(1.0, rec.u_norm) < rule.tol
    if rule.kind == "abs-change":
        return rec.step_norm < rule.tol
    if rule.kind == "grad-norm":
        if problem is not None and problem.structure != "quadratic-linear":
            raise TypeError("grad-norm stopping needs a smooth (quadratic-linear) energy")
        return rec.residual < rule.tol
    if rule.kind == "dice-bound":
        if truth is None:
            raise ValueError("dice-bound stopping needs a ground-truth mask")
        return rec.dice >= rule.tol
    raise ValueError(rule.kind)


def check_stop(state: IterationState, rule: StopRule, problem=None, truth=None,
               max_iter: int | None = None) -> str | None:
    """Return a stop reason, or ``None`` to continue."""
    if not state.trace:
        raise ValueError("check_stop needs at least one completed iteration")
    rec = state.trace[-1]
    rules = rule.rules if rule.kind == "composite" else (rule,)
    met = [r.name for r in rules if _rule_met(r, rec, problem, truth)]
    if met:
        return "+".join(met)
    if max_iter is not None and state.n >= max_iter:
        return "Max"
    return None


def _default_delta_t(problem, omega_hat: float) -> float:
    L = problem.lipschitz
    if L == 0:
        return 1.0
    return 0.9 / (2.0 * L * max(1.0, omega_hat))


def run(problem: SplitProblem, config: SolverConfig, u0=None, truth=None, u_ref=None) -> Trace:
    """Iterate ``config.algorithm`` from ``u0`` until the stop rule fires.

    ``truth`` is a flat boolean mask used for DICE (thresholding at zero);
    ``u_ref`` a reference solution whose distance is recorded per step.
    """
    counts: Counter = Counter()
    u0 = np.zeros(problem.dim) if u0 is None else np.array(u0, dtype=float)
    if u0.shape != (problem.dim,):
        raise ValueError(f"u0 has shape {u0.shape}, expected ({problem.dim},)")
    beta_sched = config.beta.fresh()
    omega_sched = config.omega.fresh()
    if config.algorithm == "bapdca_e":
        omega_sched = OmegaSchedule.constant(1.0)
    omega_hat = omega_sched.sup_after_start()
    if config.algorithm in ("pubc_e", "bapdca_e"):
        dt = config.delta_t or _default_delta_t(problem, omega_hat)
        regime = validate_step(problem.lipschitz, dt, omega_hat)
        if regime == "invalid":
            raise ValueError(f"step size delta_t={dt} is outside the admissible range "
                             f"for L={problem.lipschitz}, omega_hat={omega_hat}")
        if regime == "marginal":
            log.warning("delta_t=%g is beyond 1/(2L); running in the marginal regime", dt)
    else:
        dt = config.delta_t or 1.0
        regime = "n/a"

    pc = None
    if problem.structure == "quadratic-linear" and config.algorithm in ("pubc_e", "bapdca_e"):
        T = problem.T_matrix(dt)
        kind = config.preconditioner
        if kind == "jacobi" and not is_strictly_diagonally_dominant(T):
            log.warning("T is not strictly diagonally dominant; using symmetric Gauss-Seidel")
            kind = "sgs"
        pc = build_preconditioner(T, kind)

    start = problem.point(u0, counts)
    f0 = problem.f(start.u, counts)
    state = IterationState(0, start, start, f0, f0, beta_sched, omega_sched, counts,
                           pc=pc, delta_t=dt, L_eff=problem.lipschitz * omega_hat,
                           t_trial=config.linesearch.t0)
    energy0 = problem.energy_at(start)

    alg = config.algorithm
    if alg in ("dca", "bdca"):
        alpha = config.alpha
        if alpha is None:
            alpha = problem.lambda_hat if problem.structure == "l1-quadratic" else problem.lipschitz
    if alg == "pdca_e":
        alpha_hat = config.alpha_hat
        if alpha_hat is None:
            if problem.structure == "l1-quadratic":
                alpha_hat = problem.lambda_hat + problem.lipschitz
            else:
                prior = 0.0 if problem.prior_diag is None else float(np.max(problem.prior_diag))
                alpha_hat = problem.lipschitz + prior

    truth_flat = None if truth is None else np.asarray(truth, dtype=bool).ravel()
    iterates = [u0.copy()] if config.keep_iterates else None
    reason = None
    t_start = time.perf_counter()
    while reason is None:
        t0 = time.perf_counter_ns()
        try:
            if alg in ("pubc_e", "bapdca_e"):
                rec = step_pubce(problem, state, config)
            elif alg == "dca":
                rec = step_dca(problem, state, alpha, config)
            elif alg == "pdca_e":
                rec = step_pdcae(problem, state, config, alpha_hat)
            else:
                rec = step_bdca(problem, state, config.linesearch, alpha, config)
        except (FloatingPointError, ArithmeticError, ValueError) as exc:
            raise SolverError(f"{alg} failed at iteration {state.n}: {exc}") from exc
        rec.wall_ns = time.perf_counter_ns() - t0
        if truth_flat is not None:
            rec.dice = dice(state.cur.u > 0, truth_flat)
        if u_ref is not None:
            rec.dist_ref = float(np.linalg.norm(state.cur.u - u_ref))
        rec.counts = dict(counts)
        state.trace.append(rec)
        if iterates is not None:
            iterates.append(state.cur.u.copy())
        reason = check_stop(state, config.stop, problem, truth_flat, config.max_iter)
    wall = time.perf_counter() - t_start
    meta = {"delta_t": dt, "regime": regime, "L_eff": state.L_eff,
            "preconditioner": None if pc is None else pc.kind}
    if alg in ("dca", "bdca"):
        meta["alpha"] = alpha
    if alg == "pdca_e":
        meta["alpha_hat"] = alpha_hat
    return Trace(config.name, state.trace, state.cur.u.copy(), reason, wall, dict(counts),
                 energy0, iterates, meta)


def with_stop(config: SolverConfig, stop: StopRule, **kw) -> SolverConfig:
    """Copy of ``config`` with a different stop rule."""
    return replace(config, stop=stop, **kw)
