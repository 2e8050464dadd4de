"""Gauss-Newton iteration over a full assimilation window.

The unknown is the whole trajectory ``u`` of shape ``(N + 1, n)``.  Each step
solves ``(J^T J + alpha H^T H) d = J^T G(u) + alpha H^T (H u - y)`` and sets
``u <- u - d``.  Optionally the two sufficient conditions

    cond1:  ||A^{-1} J^T||          <= 1 / (L c)
    cond2:  ||H^T eta|| ||A^{-1}||  <= c / 2

are evaluated at every iterate with matrix-free power iteration.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocklinalg import (IllPosed, assemble_normal, jacobian, opnorm_inverse,
                          opnorm_solve_Jt, residual, solve_normal)
from .models import ModelKind
from .window import ObservationSet, initial_guess

ROUNDING_FLOOR = 64 * np.finfo(float).eps


class Termination(str, enum.Enum):
    STEP_TOL = "StepTol"
    MAX_ITER = "MaxIter"
    CONDITION_VIOLATED = "ConditionViolated"
    ILL_POSED = "IllPosed"


class NoAlphaFound(RuntimeError):
    """The doubling search for alpha ended without satisfying its guard."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclass
class GNConfig:
    """Settings for :func:`run`.

    ``alpha`` is a positive float or ``"auto"`` (doubling search from
    ``alpha0``).  ``c`` bounds the initial error; ``None`` means measure
    ``||u0 - truth||``, which requires the truth.  ``max_iter=None`` picks 200
    for noise-free data, else 20 (Lorenz 63) or 70 (Lorenz 96).
    """

    alpha: float | str = "auto"
    c: float | None = None
    step_tol: float = 1e-14
    max_iter: int | None = None
    alpha0: float = 1e-3
    alpha_max: float = 1e8
    monitor: bool = True
    stop_on_violation: bool = True
    norm_rel_tol: float = 1e-6
    norm_max_iter: int = 500
    stall_rtol: float = 1e-3
    stall_count: int = 3
    stall_alpha_min: float = 1.0

    def __post_init__(self):
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                raise ValueError(f"alpha must be positive or 'auto', got {self.alpha!r}")
        elif not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.c is not None and not self.c > 0:
            raise ValueError("c must be positive")
        if not self.step_tol > 0:
            raise ValueError("step_tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")

    def resolved_max_iter(self, model, noisy):
        if self.max_iter is not None:
            return self.max_iter
        if not noisy:
            return 200
        return 70 if model.kind is ModelKind.LORENZ96 else 20


@dataclass(frozen=True)
class IterationRecord:
    k: int
    cost: float
    err_total: float | None
    err_obs: float | None
    err_unobs: float | None
    step_norm: float
    cond1_lhs: float | None
    cond1_rhs: float | None
    cond2_lhs: float | None
    cond2_rhs: float | None
    bound: float | None
    norms_converged: bool | None = None

    @property
    def cond1_holds(self):
        return None if self.cond1_lhs is None else _holds(self.cond1_lhs, self.cond1_rhs)

    @property
    def cond2_holds(self):
        return None if self.cond2_lhs is None else _holds(self.cond2_lhs, self.cond2_rhs)

    def as_row(self):
        return asdict(self)


@dataclass
class GNRunRecord:
    records: list
    termination: Termination
    final_state: np.ndarray = field(repr=False)
    alpha_used: float
    c: float
    alpha_search: "AlphaSearch | None" = None

    @property
    def iterations(self):
        """Number of GN steps applied."""
        return len(self.records) - 1

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records], dtype=float)


@dataclass
class AlphaSearch:
    """Outcome of a doubling search: ``alpha = alpha0 * 2**doublings``."""

    alpha: float
    doublings: int
    cond1_lhs: float
    cond1_rhs: float
    cond2_lhs: float | None = None
    cond2_rhs: float | None = None
    history: list = field(default_factory=list, repr=False)

    @property
    def cond1_holds(self):
        return _holds(self.cond1_lhs, self.cond1_rhs)

    @property
    def both_hold(self):
        c2 = True if self.cond2_lhs is None else _holds(self.cond2_lhs, self.cond2_rhs)
        return self.cond1_holds and c2


_EST_TOL = 1e-6


def _holds(lhs, rhs, tol=_EST_TOL):
    # a check fails only beyond the estimator tolerance
    return lhs <= rhs * (1.0 + tol)


def _obs_values(y):
    return y.values if isinstance(y, ObservationSet) else np.asarray(y, dtype=float)


def theoretical_bound(alpha, c):
    """limsup error bound ``alpha c / (1 - alpha)`` for noisy data."""
    if not 0 < alpha < 1:
        raise ValueError(f"bound needs 0 < alpha < 1, got {alpha}")
    if not c > 0:
        raise ValueError("c must be positive")
    return alpha * c / (1.0 - alpha)


def error_metrics(model, u, truth, y, H, alpha):
    """``(cost, err_total, err_obs, err_unobs)``.

    ``cost = ||G(u)|| + alpha ||y - H u||`` (plain norms, not squares).
    The error terms are ``None`` when ``truth`` is ``None``.
    """
    cost = float(np.linalg.norm(residual(model, u))
                 + alpha * np.linalg.norm(_obs_values(y) - H.apply_H(u)))
    if truth is None:
        return cost, None, None, None
    e = np.asarray(truth, dtype=float) - u
    obs = H.apply_HtH(e)
    return (cost, float(np.linalg.norm(e)), float(np.linalg.norm(obs)),
            float(np.linalg.norm(e - obs)))


def gradient(model, u, y, H, alpha, J=None):
    """``J^T G(u) + alpha H^T (H u - y)``."""
    J = jacobian(model, u) if J is None else J
    return J.rmatvec(residual(model, u)) + alpha * (H.apply_HtH(u) - H.apply_Ht(_obs_values(y)))


def gn_step(model, u, y, H, alpha):
    """One undamped Gauss-Newton update of the window ``u``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    u = np.asarray(u, dtype=float)
    J = jacobian(model, u)
    A = assemble_normal(J, alpha, H)
    return u - solve_normal(A, gradient(model, u, y, H, alpha, J))


class _NormTracker:
    """Warm-started norm estimates for the condition checks."""

    def __init__(self, rel_tol, max_iter):
        self.rel_tol, self.max_iter = rel_tol, max_iter
        self.v1 = self.v2 = None

    def cond1(self, J, A):
        est = opnorm_solve_Jt(J, A, self.rel_tol, self.max_iter, self.v1)
        self.v1 = est.vector
        return est

    def inverse(self, A):
        est = opnorm_inverse(A, self.rel_tol, self.max_iter, self.v2)
        self.v2 = est.vector
        return est


def _cond1_rhs(L, c):
    return np.inf if L == 0 else 1.0 / (L * c)


def find_alpha_noisefree(model, u0, H, L1, c, alpha0=1e-3, alpha_max=1e8,
                         rel_tol=1e-6, max_iter=500, stall_rtol=1e-3, stall_count=3,
                         stall_alpha_min=1.0):
    """Double alpha from ``alpha0`` until cond1 holds at ``u0``.

    Raises :class:`NoAlphaFound` when the normal matrix becomes ill-posed,
    when alpha exceeds ``alpha_max``, or when, past ``stall_alpha_min``, the
    norm stops decreasing (``stall_count`` consecutive doublings with relative
    change below ``stall_rtol``) while still above the threshold.
    """
    if not (L1 >= 0 and c > 0 and alpha0 > 0):
        raise ValueError("need L1 >= 0, c > 0 and alpha0 > 0")
    u0 = np.asarray(u0, dtype=float)
    J = jacobian(model, u0)
    rhs = _cond1_rhs(L1, c)
    norms = _NormTracker(rel_tol, max_iter)
    alpha, m, history, stalled, prev = alpha0, 0, [], 0, None
    while True:
        if alpha > alpha_max:
            raise NoAlphaFound(f"alpha exceeded {alpha_max:g} before cond1 held", history)
        try:
            lhs = norms.cond1(J, assemble_normal(J, alpha, H)).value
        except IllPosed as exc:
            raise NoAlphaFound(f"normal matrix ill-posed at alpha={alpha:g}: {exc}", history) from exc
        history.append((alpha, lhs))
        if _holds(lhs, rhs):
            return AlphaSearch(alpha, m, lhs, rhs, history=history)
        if prev is not None and alpha > stall_alpha_min and lhs > prev * (1.0 - stall_rtol):
            stalled += 1
            if stalled >= stall_count:
                raise NoAlphaFound(
                    f"||A^-1 J^T|| levelled off at {lhs:.4g} above 1/(L c) = {rhs:.4g}", history)
        else:
            stalled = 0
        prev = lhs
        alpha *= 2.0
        m += 1


def find_alpha_noisy(model, u0, H, L2, c, Ht_eta_norm, alpha0=1e-3,
                     rel_tol=1e-6, max_iter=500):
    """Double alpha while cond1 and cond2 are both violated.

    The loop guard is a conjunction, so the search stops as soon as either
    condition holds; :attr:`AlphaSearch.both_hold` reports whether the other
    one holds too.  A candidate above 1 or an ill-posed solve raises
    :class:`NoAlphaFound`.
    """
    if not (L2 >= 0 and c > 0 and alpha0 > 0 and Ht_eta_norm >= 0):
        raise ValueError("invalid search arguments")
    u0 = np.asarray(u0, dtype=float)
    J = jacobian(model, u0)
    rhs1, rhs2 = _cond1_rhs(L2, c), c / 2.0
    norms = _NormTracker(rel_tol, max_iter)
    alpha, m, history = alpha0, 0, []
    while True:
        if alpha > 1:
            raise NoAlphaFound(f"alpha candidate {alpha:g} exceeds 1", history)
        try:
            A = assemble_normal(J, alpha, H)
            lhs1 = norms.cond1(J, A).value
            lhs2 = 0.0 if Ht_eta_norm == 0 else Ht_eta_norm * norms.inverse(A).value
        except IllPosed as exc:
            raise NoAlphaFound(f"normal matrix ill-posed at alpha={alpha:g}: {exc}", history) from exc
        history.append((alpha, lhs1, lhs2))
        if _holds(lhs1, rhs1) or _holds(lhs2, rhs2):
            return AlphaSearch(alpha, m, lhs1, rhs1, lhs2, rhs2, history)
        alpha *= 2.0
        m += 1


def run(model, config, y, H, u_b, truth=None):
    """Gauss-Newton from ``initial_guess(y, H, u_b)``.

    Record ``k`` describes iterate ``u_k``: its metrics, the norm of the step
    computed there and, if monitoring, both conditions.  The loop stops when a
    condition fails (``stop_on_violation``), when the noise-free step drops
    below ``max(step_tol, 64 eps ||u_k||)`` or after ``max_iter`` steps.  A
    step that triggers the tolerance is not applied.  An ill-posed solve at
    ``u_0`` raises :class:`IllPosed`; later ones end the run.
    """
    noisy = bool(isinstance(y, ObservationSet) and y.noisy)
    eta_norm = y.Ht_eta_norm if isinstance(y, ObservationSet) else 0.0
    u = initial_guess(y, H, u_b)
    if config.c is not None:
        c = float(config.c)
    elif truth is not None:
        c = float(np.linalg.norm(u - truth))
        if c == 0:
            c = np.finfo(float).tiny
    else:
        raise ValueError("c must be given when the truth is withheld")
    L = model.lipschitz_G()

    search = None
    if config.alpha == "auto":
        if noisy:
            search = find_alpha_noisy(model, u, H, L, c, eta_norm, config.alpha0,
                                      config.norm_rel_tol, config.norm_max_iter)
        else:
            search = find_alpha_noisefree(model, u, H, L, c, config.alpha0, config.alpha_max,
                                          config.norm_rel_tol, config.norm_max_iter,
                                          config.stall_rtol, config.stall_count,
                                          config.stall_alpha_min)
        alpha = search.alpha
    else:
        alpha = float(config.alpha)
    if noisy and alpha >= 1:
        raise ValueError("noisy mode needs alpha < 1")

    bound = theoretical_bound(alpha, c) if alpha < 1 else None
    max_iter = config.resolved_max_iter(model, noisy)
    norms = _NormTracker(config.norm_rel_tol, config.norm_max_iter)
    records = []
    k = 0
    while True:
        try:
            J = jacobian(model, u)
            A = assemble_normal(J, alpha, H)
            d = solve_normal(A, gradient(model, u, y, H, alpha, J))
            c1 = c2 = r1 = r2 = conv = None
            if config.monitor:
                e1 = norms.cond1(J, A)
                c1, r1, conv = e1.value, _cond1_rhs(L, c), e1.converged
                r2 = c / 2.0
                if noisy and eta_norm > 0:
                    e2 = norms.inverse(A)
                    c2, conv = eta_norm * e2.value, conv and e2.converged
                else:
                    c2 = 0.0
        except IllPosed:
            if k == 0:
                raise
            term = Termination.ILL_POSED
            break
        step = float(np.linalg.norm(d))
        cost, et, eo, eu = error_metrics(model, u, truth, y, H, alpha)
        rec = IterationRecord(k, cost, et, eo, eu, step, c1, r1, c2, r2, bound, conv)
        records.append(rec)
        if config.monitor and config.stop_on_violation and not (rec.cond1_holds and rec.cond2_holds):
            term = Termination.CONDITION_VIOLATED
            break
        if not noisy and step < max(config.step_tol, ROUNDING_FLOOR * np.linalg.norm(u)):
            term = Termination.STEP_TOL
            break
        if k >= max_iter:
            term = Termination.MAX_ITER
            break
        u = u - d
        k += 1
    return GNRunRecord(records, term, u, alpha, c, search)
