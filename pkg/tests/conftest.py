import numpy as np
import pytest

from bdfsplit.scad import ScadInstance, ScadParams, generate_instance, scad_problem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scad_i1():
    """SCAD size-1 instance (seed 0) at the low-precision regularization."""
    return generate_instance(1, 0, ScadParams(5e-4, 10.0))


@pytest.fixture(scope="session")
def scad_i1_problem(scad_i1):
    return scad_problem(scad_i1)


@pytest.fixture
def make_l1():
    """Factory for tiny SCAD least-squares problems with an exact lambda_hat."""

    def make(rng, m=6, k=5, lam=0.1, theta=10.0):
        A = rng.standard_normal((m, k))
        b = rng.standard_normal(m)
        lam_max = float(np.linalg.eigvalsh(A.T @ A).max()) * (1 + 1e-6)
        inst = ScadInstance(A, b, ScadParams(lam, theta), None, lam_max, 0, 0)
        return inst, scad_problem(inst)

    return make
