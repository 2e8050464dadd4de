"""Weak-constraint 4D-Var baseline minimised by Levenberg-Marquardt.

The control variable is the full window.  With ``R = r_var I`` and
``Q = q_var I`` the objective is ``0.5 * ||wc_residual(u)||^2`` where the
residual stacks ``R^{-1/2} (y - H u)`` and ``Q^{-1/2} G(u)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .blocklinalg import IllPosed, assemble_normal, jacobian, residual, solve_normal
from .window import ObservationSet


@dataclass
class LMConfig:
    lambda0: float = 1e-3
    up_factor: float = 10.0
    down_factor: float = 0.1
    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    max_iter: int = 200
    lambda_max: float = 1e16

    def __post_init__(self):
        for name in ("lambda0", "up_factor", "down_factor", "grad_tol", "step_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class WCConfig:
    r_var: float = 1.0
    q_var: float = 1.0
    lm: LMConfig = field(default_factory=LMConfig)

    def __post_init__(self):
        if not (self.r_var > 0 and self.q_var > 0):
            raise ValueError("r_var and q_var must be positive")

    @classmethod
    def for_noise(cls, gamma, q_var=1.0, lm=None):
        """``r_var = gamma**2`` (1 when ``gamma`` is 0)."""
        return cls(gamma ** 2 if gamma > 0 else 1.0, q_var, lm or LMConfig())


class LMFlag(str, enum.Enum):
    GRAD_TOL = "GradTol"
    STEP_TOL = "StepTol"
    MAX_ITER = "MaxIter"
    STALLED = "Stalled"


@dataclass(frozen=True)
class LMIteration:
    k: int
    cost: float
    grad_norm: float
    step_norm: float
    lam: float
    accepted: bool


@dataclass
class LMResult:
    state: np.ndarray = field(repr=False)
    log: list
    flag: LMFlag

    @property
    def costs(self):
        """Objective after each accepted step, starting at the initial point."""
        return [self.log[0].cost] + [it.cost for it in self.log[1:] if it.accepted]


def _values(y):
    return y.values if isinstance(y, ObservationSet) else np.asarray(y, dtype=float)


def wc_residual(model, u, y, H, config):
    """Weighted stacked residual; ``0.5 * ||.||^2`` is the 4D-Var objective."""
    u = np.asarray(u, dtype=float)
    obs = (_values(y) - H.apply_H(u)) / np.sqrt(config.r_var)
    mod = residual(model, u).ravel() / np.sqrt(config.q_var)
    return np.concatenate([obs, mod])


def wc_cost(model, u, y, H, config):
    r = wc_residual(model, u, y, H, config)
    return 0.5 * float(r @ r)


def wc_gradient(model, u, y, H, config, J=None):
    J = jacobian(model, u) if J is None else J
    return (J.rmatvec(residual(model, u)) / config.q_var
            + (H.apply_HtH(u) - H.apply_Ht(_values(y))) / config.r_var)


def lm_step(model, u, y, H, config, lam, J=None):
    """Damped Gauss-Newton correction ``(J_w^T J_w + lam I)^{-1} grad``."""
    J = jacobian(model, u) if J is None else J
    A = assemble_normal(J, 1.0 / config.r_var, H, shift=lam, model_weight=1.0 / config.q_var)
    return solve_normal(A, wc_gradient(model, u, y, H, config, J))


def lm_minimize(model, u0, y, H, config, callback=None):
    """Levenberg-Marquardt with additive damping ``lam * I``.

    A trial step is accepted only if it lowers the objective; ``lam`` shrinks
    by ``down_factor`` after an acceptance and grows by ``up_factor`` after a
    rejection or an ill-posed solve.  ``callback(k, u)`` is called on the
    initial point and after every accepted step.
    """
    lm = config.lm
    u = np.array(u0, dtype=float, copy=True)
    cost = wc_cost(model, u, y, H, config)
    lam = lm.lambda0
    J = jacobian(model, u)
    g = wc_gradient(model, u, y, H, config, J)
    log = [LMIteration(0, cost, float(np.linalg.norm(g)), 0.0, lam, True)]
    if callback:
        callback(0, u)
    accepted = 0
    flag = LMFlag.MAX_ITER
    for k in range(1, lm.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= lm.grad_tol:
            flag = LMFlag.GRAD_TOL
            break
        try:
            d = lm_step(model, u, y, H, config, lam, J)
        except IllPosed:
            d = None
        if d is not None:
            snorm = float(np.linalg.norm(d))
            trial = u - d
            try:
                trial_cost = wc_cost(model, trial, y, H, config)
            except FloatingPointError:
                trial_cost = np.inf
        else:
            snorm, trial_cost = np.nan, np.inf
        ok = trial_cost < cost
        if ok:
            u, cost = trial, trial_cost
            J = jacobian(model, u)
            g = wc_gradient(model, u, y, H, config, J)
            lam *= lm.down_factor
            accepted += 1
            if callback:
                callback(accepted, u)
        else:
            lam *= lm.up_factor
        log.append(LMIteration(k, cost, float(np.linalg.norm(g)), snorm, lam, ok))
        if d is not None and snorm <= lm.step_tol * (lm.step_tol + np.linalg.norm(u)):
            flag = LMFlag.STEP_TOL
            break
        if lam > lm.lambda_max:
            flag = LMFlag.STALLED
            break
    else:
        if np.linalg.norm(g) <= lm.grad_tol:
            flag = LMFlag.GRAD_TOL
    return LMResult(u, log, flag)
