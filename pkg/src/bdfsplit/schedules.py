"""Extrapolation parameter schedules.

``BetaSchedule`` emits the iterate extrapolation weights (constant or
FISTA-type with restarts); ``OmegaSchedule`` emits the weights on the
gradient history used in the explicit Adams-Bashforth term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["BetaSchedule", "OmegaSchedule", "adaptive_restart_check", "gamma_step"]

BETA_CAP = 1.0 - 1e-12


def gamma_step(gamma: float, squared: bool = False) -> float:
    """One step of the momentum recursion.

    The default form is ``(1 + sqrt(1 + 4*gamma)) / 2`` (fixed point 2, so
    beta tends to 1/2).  ``squared=True`` gives the classical FISTA form
    ``(1 + sqrt(1 + 4*gamma**2)) / 2``.
    """
    g = gamma * gamma if squared else gamma
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * g))


def adaptive_restart_check(y_prev, u_curr, u_prev) -> bool:
    """True iff ``<y_prev - u_curr, u_curr - u_prev> > 0``."""
    y_prev, u_curr, u_prev = (np.asarray(v, dtype=float) for v in (y_prev, u_curr, u_prev))
    if not (y_prev.shape == u_curr.shape == u_prev.shape):
        raise ValueError("restart check needs vectors of equal shape")
    return float((y_prev - u_curr) @ (u_curr - u_prev)) > 0.0


@dataclass
class BetaSchedule:
    """Iterate-extrapolation weights.

    kind
        ``"constant"`` emits ``value`` every time.  ``"fista"`` runs the gamma
        recursion; ``restart_every`` (N-bar) triggers a fixed restart and
        ``adaptive=True`` honours restart signals from the solver.
    """

    kind: str = "fista"
    value: float = 0.0
    restart_every: int | None = None
    adaptive: bool = False
    squared: bool = False
    beta_cap: float = BETA_CAP
    gamma_prev: float = 1.0
    gamma_curr: float = 1.0
    since_restart: int = 0
    restarts: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in ("constant", "fista"):
            raise ValueError(f"unknown beta schedule kind {self.kind!r}")
        if not 0.0 <= self.beta_cap < 1.0:
            raise ValueError("beta_cap must lie in [0, 1)")
        if self.kind == "constant" and not 0.0 <= self.value <= self.beta_cap:
            raise ValueError("constant beta must lie in [0, beta_cap]")
        if self.restart_every is not None and self.restart_every < 1:
            raise ValueError("restart_every must be >= 1")

    @classmethod
    def constant(cls, value: float) -> "BetaSchedule":
        return cls(kind="constant", value=value)

    @classmethod
    def fista_fixed_restart(cls, every: int, **kw) -> "BetaSchedule":
        return cls(kind="fista", restart_every=every, **kw)

    @classmethod
    def fista_adaptive_restart(cls, every: int | None = None, **kw) -> "BetaSchedule":
        return cls(kind="fista", adaptive=True, restart_every=every, **kw)

    def restart(self):
        self.gamma_prev = self.gamma_curr = 1.0
        self.since_restart = 0
        self.restarts += 1

    def next_beta(self, restart_signal: bool = False) -> tuple[float, bool]:
        """Emit the next weight; returns ``(beta, restarted)``."""
        if self.kind == "constant":
            return self.value, False
        restarted = False
        if (restart_signal and self.adaptive) or (
                self.restart_every is not None and self.since_restart == self.restart_every):
            self.restart()
            restarted = True
        beta = (self.gamma_prev - 1.0) / self.gamma_curr
        beta = min(max(beta, 0.0), self.beta_cap)
        self.gamma_prev, self.gamma_curr = self.gamma_curr, gamma_step(self.gamma_curr, self.squared)
        self.since_restart += 1
        return beta, restarted

    def fresh(self) -> "BetaSchedule":
        """Copy with the recursion reset, for a new run."""
        return BetaSchedule(kind=self.kind, value=self.value, restart_every=self.restart_every,
                            adaptive=self.adaptive, squared=self.squared, beta_cap=self.beta_cap)


@dataclass
class OmegaSchedule:
    """Weights on the gradient history in the explicit term.

    ``"constant"`` emits ``value``; ``"decay"`` emits
    ``omega_inf + (omega0 - omega_inf) * rate**n``; ``"beta"`` reuses the
    iterate weight emitted in the same step.  ``burn_in`` is the index from
    which the step-size bound has to hold; earlier weights are unrestricted.
    """

    kind: str = "constant"
    value: float = 1.0
    omega0: float = 1.0
    omega_inf: float = 1.0
    rate: float = 0.5
    burn_in: int = 1
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "decay", "beta"):
            raise ValueError(f"unknown omega schedule kind {self.kind!r}")
        if self.kind == "constant" and self.value <= 0.0:
            raise ValueError("constant omega must be positive")
        if self.kind == "decay":
            if self.omega_inf <= 0.0 or self.omega0 <= 0.0:
                raise ValueError("decay omega endpoints must be positive")
            if not 0.0 <= self.rate < 1.0:
                raise ValueError("decay rate must lie in [0, 1)")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    @classmethod
    def constant(cls, value: float = 1.0) -> "OmegaSchedule":
        return cls(kind="constant", value=value)

    @classmethod
    def decay(cls, omega0: float, omega_inf: float, rate: float) -> "OmegaSchedule":
        return cls(kind="decay", omega0=omega0, omega_inf=omega_inf, rate=rate)

    def value_at(self, n: int, beta: float = 0.0) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "beta":
            return beta
        return self.omega_inf + (self.omega0 - self.omega_inf) * self.rate ** n

    def next_omega(self, beta: float = 0.0) -> float:
        w = self.value_at(self.step, beta)
        self.step += 1
        return w

    def sup_after_start(self) -> float:
        """Supremum of the emitted weights over ``n >= burn_in``.

        This is the weight bound entering the step-size condition.
        """
        if self.kind == "constant":
            return self.value
        if self.kind == "beta":
            return BETA_CAP
        return max(self.value_at(self.burn_in), self.omega_inf)

    def fresh(self) -> "OmegaSchedule":
        return OmegaSchedule(kind=self.kind, value=self.value, omega0=self.omega0,
                             omega_inf=self.omega_inf, rate=self.rate, burn_in=self.burn_in)
