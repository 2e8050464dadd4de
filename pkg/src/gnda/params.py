"""Joint state and parameter estimation by alternating updates.

One outer iteration takes a Gauss-Newton step in the window with the
parameters frozen, then a linear least-squares correction of the estimated
parameters at the new window::

    u_{k+1}     = u_k - (J^T J + alpha H^T H)^{-1} (J^T G(u_k; th_k) + alpha H^T (H u_k - y))
    th_{k+1}    = th_k - pinv(G_th) G(u_{k+1}; th_k)

where ``G_th`` stacks ``-dF/dth`` over the window.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .blocklinalg import IllPosed, jacobian, opnorm_matrix, residual
from .gauss_newton import GNConfig, find_alpha_noisefree, find_alpha_noisy, gn_step, run
from .window import ObservationSet, initial_guess


class ParamTermination(str, enum.Enum):
    PARAM_TOL = "ParamTol"
    MAX_OUTER = "MaxOuter"
    ILL_POSED = "IllPosed"


class RankDeficient(np.linalg.LinAlgError):
    """The parameter sensitivity matrix does not have full column rank."""


@dataclass
class ParamConfig:
    """``estimate`` names (or indexes) the parameters being estimated and
    ``theta0`` gives their starting values in the same order.

    ``L0`` and ``L3`` feed the bound diagnostics; ``L0=None`` is computed only
    for models whose window residual is linear.  ``L3=None`` uses the model's
    Jacobian Lipschitz constant.
    """

    theta0: tuple
    estimate: tuple = ("sigma",)
    param_tol: float = 1e-3
    max_outer: int = 500
    gn_inner: GNConfig = field(default_factory=lambda: GNConfig(alpha=1e-3, monitor=False))
    L0: float | None = None
    L3: float | None = None

    def __post_init__(self):
        self.theta0 = tuple(float(t) for t in np.atleast_1d(self.theta0))
        if isinstance(self.estimate, (str, int)):
            self.estimate = (self.estimate,)
        self.estimate = tuple(self.estimate)
        if len(self.theta0) != len(self.estimate):
            raise ValueError("theta0 and estimate must have the same length")
        if not self.param_tol > 0:
            raise ValueError("param_tol must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class ParamRunRecord:
    theta_history: np.ndarray
    state_err_history: list
    termination: ParamTermination
    final_state: np.ndarray = field(repr=False)
    alpha_used: float
    c: float
    bound_b: float | None = None
    theta_bound: float | None = None
    state_bound: float | None = None
    gn_record: object = field(default=None, repr=False)

    @property
    def theta(self):
        return self.theta_history[-1]

    @property
    def outer_iterations(self):
        return len(self.theta_history) - 1


def _with_theta(model, which, theta):
    full = list(model.params)
    for i, t in zip(which, theta):
        full[i] = float(t)
    return model.with_params(full)


def param_jacobian(model, u, which):
    """``G_theta``: ``(N * n, q)`` matrix of ``-dF/dtheta`` stacked over blocks."""
    u = np.asarray(u, dtype=float)
    cols = [-model.step_param_derivative(u[:-1], w).ravel() for w in which]
    return np.stack(cols, axis=1) if cols else np.zeros((u[:-1].size, 0))


def state_update(model, u_k, theta_k, y, H, alpha, which=None):
    """Gauss-Newton window step with the estimated parameters set to ``theta_k``."""
    which = _indices(model, which, theta_k)
    return gn_step(_with_theta(model, which, theta_k), u_k, y, H, alpha)


def param_update(model, u_next, theta_k, which=None):
    """Least-squares parameter correction at fixed window ``u_next``."""
    which = _indices(model, which, theta_k)
    theta_k = np.asarray(theta_k, dtype=float)
    m = _with_theta(model, which, theta_k)
    Gt = param_jacobian(m, u_next, which)
    step, _, rank, _ = np.linalg.lstsq(Gt, residual(m, u_next).ravel(), rcond=None)
    if rank < Gt.shape[1]:
        names = [model.param_names[i] for i in which]
        raise RankDeficient(f"parameter sensitivities for {names} are rank deficient ({rank} < {len(names)})")
    return theta_k - step


def _indices(model, which, theta):
    if which is None:
        which = range(len(np.atleast_1d(theta)))
    return tuple(model.param_index(w) for w in which)


def affine_bounds(model, u, which, c, L0=None, L3=None):
    """``(b, state bound, theta bound)`` for a residual ``G(u) + A theta``
    with constant ``A``; entries are ``None`` when they do not apply."""
    if not all(model.param_derivative_is_constant(w) for w in which):
        return None, None, None
    A = param_jacobian(model, u, which)
    pinv = np.linalg.pinv(A)
    if L0 is None:
        if model.lipschitz_G() != 0:
            return None, None, None
        # linear residual: Lipschitz constant is the Jacobian norm
        L0 = opnorm_matrix(jacobian(model, u), rel_tol=1e-10).value
    L3 = model.lipschitz_G() if L3 is None else L3
    if not L3 > 0:
        return None, None, None
    b = np.linalg.norm(A @ pinv, 2) * L0 / L3
    if not b / c < 1:
        return float(b), None, None
    state_bound = (b / 2) / (1 - b / c)
    return float(b), float(state_bound), float(L0 * np.linalg.norm(pinv, 2) * state_bound)


def run_joint(model, config, y, H, u_b, truth=None, theta_true=None):
    """Alternate state and parameter updates until the parameter change drops
    below ``param_tol`` or ``max_outer`` outer iterations pass."""
    which = _indices(model, config.estimate, config.theta0)
    if not which:
        rec = run(model, config.gn_inner, y, H, u_b, truth)
        errs = [r.err_total for r in rec.records]
        return ParamRunRecord(np.zeros((1, 0)), errs, ParamTermination.PARAM_TOL,
                              rec.final_state, rec.alpha_used, rec.c, gn_record=rec)
    gcfg = config.gn_inner
    noisy = isinstance(y, ObservationSet) and y.noisy
    theta = np.array(config.theta0)
    m = _with_theta(model, which, theta)
    u = initial_guess(y, H, u_b)
    if gcfg.c is not None:
        c = float(gcfg.c)
    elif truth is not None:
        c = float(np.linalg.norm(u - truth)) or np.finfo(float).tiny
    else:
        raise ValueError("c must be given when the truth is withheld")
    if gcfg.alpha == "auto":
        L = model.lipschitz_G()
        if noisy:
            alpha = find_alpha_noisy(m, u, H, L, c, y.Ht_eta_norm, gcfg.alpha0,
                                     gcfg.norm_rel_tol, gcfg.norm_max_iter).alpha
        else:
            alpha = find_alpha_noisefree(m, u, H, L, c, gcfg.alpha0, gcfg.alpha_max,
                                         gcfg.norm_rel_tol, gcfg.norm_max_iter).alpha
    else:
        alpha = float(gcfg.alpha)

    thetas = [theta.copy()]
    errs = [None if truth is None else float(np.linalg.norm(u - truth))]
    term = ParamTermination.MAX_OUTER
    for _ in range(config.max_outer):
        try:
            u_next = gn_step(m, u, y, H, alpha)
        except IllPosed:
            term = ParamTermination.ILL_POSED
            break
        theta_next = param_update(m, u_next, theta, which)
        u, m = u_next, _with_theta(model, which, theta_next)
        thetas.append(theta_next)
        errs.append(None if truth is None else float(np.linalg.norm(u - truth)))
        done = np.linalg.norm(theta_next - theta) < config.param_tol
        theta = theta_next
        if done:
            term = ParamTermination.PARAM_TOL
            break
    b, sb, tb = affine_bounds(m, u, which, c, config.L0, config.L3)
    return ParamRunRecord(np.array(thetas), errs, term, u, alpha, c, b, tb, sb)

