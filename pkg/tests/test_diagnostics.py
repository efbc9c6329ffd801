import json
import math

import numpy as np
import pytest

from bdfsplit.diagnostics import (
    auxiliary_A,
    check_monotone_decrease,
    fit_rate,
    residual_bound_check,
    save_report,
    strong_convexity_gap,
)
from bdfsplit.schedules import BetaSchedule
from bdfsplit.solvers import SolverConfig, StopRule, run


def test_aux_reduces_to_energy_on_diagonal(rng, make_l1):
    _, p = make_l1(rng)
    x = rng.standard_normal(5)
    assert auxiliary_A(x, x, p, 2.0) == pytest.approx(p.energy(x))


def test_aux_formula(rng, make_l1):
    inst, p = make_l1(rng)
    x, y = rng.standard_normal(5), rng.standard_normal(5)
    dt, L = 2.0, p.lipschitz
    d = x - y
    M = inst.lambda_ata * np.eye(5) - inst.A.T @ inst.A
    expect = p.energy(x) + (1 / (4 * dt) + L / 2) * d @ d + 0.5 * d @ M @ d
    assert auxiliary_A(x, y, p, dt) == pytest.approx(expect, rel=1e-12)
    expect_hat = p.energy(x) + (1 / (4 * dt) + 1.5 * L / 2) * d @ d + 0.5 * d @ M @ d
    assert auxiliary_A(x, y, p, dt, variant="A_hat", omega_hat=1.5) == pytest.approx(expect_hat)
    assert auxiliary_A(x, y, p, dt, metric=lambda v: 0 * v) == pytest.approx(
        p.energy(x) + (1 / (4 * dt) + L / 2) * d @ d)
    with pytest.raises(ValueError):
        auxiliary_A(x, y, p, dt, variant="B")


def test_trace_aux_matches_definition(rng, make_l1):
    _, p = make_l1(rng, m=30, k=20, lam=0.05)
    dt = 3.0
    tr = run(p, SolverConfig("bapdca_e", delta_t=dt, keep_iterates=True, max_iter=40,
                             beta=BetaSchedule.fista_adaptive_restart(squared=True),
                             stop=StopRule("rel-change", 1e-300)))
    us = tr.iterates
    for n, rec in enumerate(tr.records):
        assert rec.aux == pytest.approx(auxiliary_A(us[n + 1], us[n], p, dt), rel=1e-10, abs=1e-12)


def test_strong_convexity_gap_nonnegative(scad_i1_problem):
    rng = np.random.default_rng(1)
    k = scad_i1_problem.dim
    un, unm1 = 0.01 * rng.standard_normal(k), 0.01 * rng.standard_normal(k)
    for _ in range(20):
        u1, u2 = 0.01 * rng.standard_normal(k), 0.01 * rng.standard_normal(k)
        assert strong_convexity_gap(scad_i1_problem, u1, u2, un, unm1, 4.0) >= -1e-8


def test_monotone_on_arrays():
    A = np.array([9.0, 8.0, 8.0, 5.0])
    steps = np.array([1.0, 1.0, 0.0, 1.0])
    rep = check_monotone_decrease(A, aux0=10.0, step_norms=steps)
    assert rep.violations == 0
    assert rep.c_min == 1.0 and rep.c_fit == 1.0
    assert rep.sum_step_sq == 3.0
    assert rep.sum_bound == 5.0 and rep.sum_bound_holds
    assert rep.positive_fraction == 1.0


def test_monotone_detects_increase():
    rep = check_monotone_decrease(np.array([9.0, 9.5, 7.0]), aux0=10.0,
                                  step_norms=np.ones(3))
    assert rep.violations == 1 and rep.violation_indices == [1]
    assert rep.worst_violation == pytest.approx(0.5 - 9e-10)
    assert rep.c_min < 0


def test_monotone_relative_tolerance():
    a = 1.0 + 5e-11
    assert check_monotone_decrease(np.array([a]), aux0=1.0, step_norms=[1.0]).violations == 0
    assert check_monotone_decrease(np.array([a]), aux0=1.0, step_norms=[1.0],
                                   tol_rel=1e-12).violations == 1


def test_monotone_input_errors():
    with pytest.raises(ValueError):
        check_monotone_decrease(np.array([1.0]))
    with pytest.raises(ValueError):
        check_monotone_decrease(np.array([]), aux0=1.0, step_norms=[])
    with pytest.raises(ValueError):
        check_monotone_decrease(np.array([np.nan]), aux0=1.0, step_norms=[1.0])


def test_monotone_marks_marginal_regime():
    rep = check_monotone_decrease(np.array([1.0]), aux0=2.0, step_norms=[1.0], regime="marginal")
    assert not rep.asserted


def test_report_json_handles_nan(tmp_path):
    rep = check_monotone_decrease(np.array([1.0, 1.0]), aux0=1.0, step_norms=[0.0, 0.0])
    d = json.loads(rep.to_json())
    assert d["c_fit"] is None and d["c_min"] is None
    save_report(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["steps"] == 2


def test_residual_bound_fit():
    s = np.array([2.0, 3.0, 1.0])
    d = np.array([1.0, 1.0, 0.5])
    rep = residual_bound_check(None, surrogate=s, step_norms=d, tail_fraction=0.5)
    # ratios: 2/1, 3/2, 1/1.5
    assert rep.d_fit == 2.0
    assert rep.d_tail == pytest.approx(1.5)
    assert not rep.diverging


def test_residual_bound_divergence():
    rep = residual_bound_check(None, surrogate=np.array([1.0, 1.0]),
                               step_norms=np.array([0.0, 0.0]))
    assert rep.diverging


def test_residual_bound_needs_data():
    with pytest.raises(ValueError):
        residual_bound_check(None, surrogate=np.array([np.nan]), step_norms=np.array([1.0]))


def test_fit_rate_geometric():
    e = 0.8 ** np.arange(1, 60)
    r = fit_rate(e)
    assert r.kind == "linear"
    assert r.eta == pytest.approx(0.8, rel=1e-10)
    assert r.r2_linear == pytest.approx(1.0)


def test_fit_rate_power_law():
    n = np.arange(1, 200, dtype=float)
    r = fit_rate(n ** -2.0)
    assert r.kind == "sublinear"
    assert r.p == pytest.approx(2.0, rel=1e-10)


def test_fit_rate_finite_termination():
    e = np.array([1.0, 0.5, 0.1, 0.0, 0.0, 0.0])
    r = fit_rate(e)
    assert r.kind == "finite-termination" and r.n_terminate == 4


def test_fit_rate_inconclusive():
    assert fit_rate(np.array([1.0, 0.5, 0.25])).kind == "inconclusive"


def test_fit_rate_tail_window():
    e = np.concatenate([1.0 / np.arange(1, 51) ** 3, 1e-6 * 0.5 ** np.arange(1, 51)])
    assert fit_rate(e, tail_fraction=0.5).kind == "linear"


def test_fit_rate_from_trace(rng, make_l1):
    _, p = make_l1(rng, m=30, k=20, lam=0.05)
    ref = run(p, SolverConfig("bapdca_e", delta_t=3.0, max_iter=5000,
                              stop=StopRule("rel-change", 1e-15)))
    tr = run(p, SolverConfig("bapdca_e", delta_t=3.0, max_iter=5000, keep_iterates=True,
                             stop=StopRule("rel-change", 1e-10)), u_ref=ref.u)
    a = fit_rate(tr, ref.u)
    b = fit_rate(tr)
    assert a.kind == b.kind
    assert a.eta == pytest.approx(b.eta, rel=1e-9)
    tr.iterates = None
    tr.records[0].dist_ref = math.nan
    for r in tr.records:
        r.dist_ref = math.nan
    with pytest.raises(ValueError):
        fit_rate(tr)
