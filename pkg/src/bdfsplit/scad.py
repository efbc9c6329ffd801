"""SCAD-regularized least squares.

    E(u) = 0.5*||Au - b||^2 + P(u),   P(u) = lam*||u||_1 - sum_i p2(u_i)

``p2`` is C^1 with a ``1/(theta-1)``-Lipschitz derivative, so the splitting
uses ``H = lam*||.||_1 + 0.5*||A. - b||^2`` and ``F = -sum p2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .splitting import L1QuadraticProblem, gram_lambda_max, soft_threshold

__all__ = [
    "ScadParams",
    "ScadInstance",
    "scad_p2",
    "scad_p2_elementwise",
    "scad_grad_p2",
    "scad_penalty",
    "soft_threshold",
    "generate_instance",
    "residual_gproj",
    "scad_problem",
    "scad_energy",
    "save_instance",
    "load_instance",
]

LAMBDA_SAFETY = 1e-6


@dataclass(frozen=True)
class ScadParams:
    lambda_reg: float = 5e-4
    theta: float = 10.0

    def __post_init__(self):
        if self.lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")
        if self.theta <= 2:
            raise ValueError("theta must exceed 2")

    @property
    def lipschitz(self) -> float:
        return 1.0 / (self.theta - 1.0)


def scad_p2_elementwise(u, params: ScadParams) -> np.ndarray:
    lam, th = params.lambda_reg, params.theta
    a = np.abs(np.asarray(u, dtype=float))
    # the integral gives (a - lam)^2 / (2(theta - 1)); this matches the gradient
    mid = (a - lam) ** 2 / (2.0 * (th - 1.0))
    tail = lam * a - 0.5 * lam * lam * (th + 1.0)
    return np.where(a <= lam, 0.0, np.where(a < th * lam, mid, tail))


def scad_p2(u, params: ScadParams) -> float:
    return float(np.sum(scad_p2_elementwise(u, params)))


def scad_grad_p2(u, params: ScadParams) -> np.ndarray:
    lam, th = params.lambda_reg, params.theta
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.minimum(th * lam, np.abs(u)) - lam, 0.0) / (th - 1.0)


def scad_penalty(u, params: ScadParams) -> float:
    u = np.asarray(u, dtype=float)
    return params.lambda_reg * float(np.abs(u).sum()) - scad_p2(u, params)


@dataclass(frozen=True)
class ScadInstance:
    A: np.ndarray
    b: np.ndarray
    params: ScadParams
    ground_truth: np.ndarray | None
    lambda_ata: float
    size: int = 0
    seed: int = 0

    @property
    def shape(self):
        return self.A.shape

    def with_params(self, params: ScadParams) -> "ScadInstance":
        return ScadInstance(self.A, self.b, params, self.ground_truth, self.lambda_ata,
                            self.size, self.seed)


def generate_instance(i: int, seed: int, params: ScadParams | None = None) -> ScadInstance:
    """Random instance of size ``i``: ``m = 720i``, ``k = 2560i``, ``s = 80i``.

    ``A`` has standard normal entries with columns scaled to unit norm, the
    ground truth has ``s`` standard normal entries on a random support and
    ``b = A y - 0.01 n`` with standard normal noise ``n``.
    """
    if i < 1:
        raise ValueError("size index must be >= 1")
    params = params or ScadParams()
    m, k, s = 720 * i, 2560 * i, 80 * i
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, k))
    A /= np.linalg.norm(A, axis=0)
    support = rng.choice(k, size=s, replace=False)
    y = np.zeros(k)
    y[support] = rng.standard_normal(s)
    b = A @ y - 0.01 * rng.standard_normal(m)
    lam_max = gram_lambda_max(A, seed=seed).upper(LAMBDA_SAFETY)
    return ScadInstance(A, b, params, y, lam_max, i, seed)


def scad_energy(u, inst: ScadInstance) -> float:
    r = inst.A @ u - inst.b
    return 0.5 * float(r @ r) + scad_penalty(u, inst.params)


def residual_gproj(u, inst: ScadInstance, gamma_proj: float = 1.0, literal: bool = False) -> float:
    """Norm of ``(u - prox_{gamma lam||.||_1}(u - gamma grad I1(u))) / gamma``.

    ``I1 = 0.5||Au-b||^2 - sum p2`` so that the map vanishes exactly at
    stationary points of ``E``; ``literal=True`` uses ``+ sum p2`` instead.
    """
    if gamma_proj <= 0:
        raise ValueError("gamma_proj must be positive")
    u = np.asarray(u, dtype=float)
    g = inst.A.T @ (inst.A @ u - inst.b)
    gp2 = scad_grad_p2(u, inst.params)
    g = g + gp2 if literal else g - gp2
    prox = soft_threshold(u - gamma_proj * g, gamma_proj * inst.params.lambda_reg)
    return float(np.linalg.norm((u - prox) / gamma_proj))


def scad_problem(inst: ScadInstance, literal_residual: bool = False) -> L1QuadraticProblem:
    """Solver view of an instance: ``f = -grad p2`` with ``L = 1/(theta-1)``."""
    params = inst.params
    return L1QuadraticProblem(
        inst.A, inst.b, params.lambda_reg,
        grad_F=lambda u: -scad_grad_p2(u, params),
        F_value=lambda u: -scad_p2(u, params),
        lipschitz=params.lipschitz,
        lambda_hat=inst.lambda_ata,
        literal_residual=literal_residual,
    )


def save_instance(inst: ScadInstance, path) -> Path:
    """Write ``<path>.npz`` with raw arrays and ``<path>.json`` with metadata."""
    path = Path(path)
    npz = path.with_suffix(".npz")
    np.savez(npz, A=inst.A, b=inst.b,
             ground_truth=inst.ground_truth if inst.ground_truth is not None else np.zeros(0))
    meta = {
        "size": inst.size, "seed": inst.seed, "m": inst.A.shape[0], "k": inst.A.shape[1],
        "lambda_reg": inst.params.lambda_reg, "theta": inst.params.theta,
        "lambda_ata": inst.lambda_ata,
        "nnz_truth": int(np.count_nonzero(inst.ground_truth)) if inst.ground_truth is not None else 0,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return npz


def load_instance(path) -> ScadInstance:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as data:
        A, b, gt = data["A"], data["b"], data["ground_truth"]
    return ScadInstance(A, b, ScadParams(meta["lambda_reg"], meta["theta"]),
                        gt if gt.size else None, float(meta["lambda_ata"]),
                        int(meta["size"]), int(meta["seed"]))
