"""Forward-Euler discretised test models: Lorenz 63, Lorenz 96 and a linear map.

Every step map works on arrays of shape ``(..., n)`` so a whole window of
states can be pushed through at once.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class ModelDivergence(FloatingPointError):
    """A model step produced a non-finite value."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"non-finite model state at flat index {index}")


class ModelKind(str, enum.Enum):
    LORENZ63 = "lorenz63"
    LORENZ96 = "lorenz96"
    LINEAR = "linear"


L63_PARAM_NAMES = ("sigma", "rho", "beta")
L96_PARAM_NAMES = ("forcing",)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelSpec:
    """Discrete autonomous model ``u_{j+1} = F(u_j; theta)``.

    Use the constructors :func:`lorenz63`, :func:`lorenz96` and
    :func:`linear_test` rather than building this directly.
    """

    kind: ModelKind
    n: int
    dt: float
    params: tuple = ()
    matrix: np.ndarray | None = field(default=None, compare=False, repr=False)
    forcing: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.kind is ModelKind.LORENZ63 and self.n != 3:
            raise ValueError("Lorenz 63 has n = 3")
        if self.kind is ModelKind.LORENZ96 and self.n < 4:
            raise ValueError("Lorenz 96 needs at least 4 variables")

    @property
    def q(self):
        return len(self.params)

    @property
    def param_names(self):
        if self.kind is ModelKind.LORENZ63:
            return L63_PARAM_NAMES
        if self.kind is ModelKind.LORENZ96:
            return L96_PARAM_NAMES
        return tuple(f"theta{i}" for i in range(self.q))

    def param_index(self, name):
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < self.q:
                raise IndexError(f"{self.kind.value} has no parameter index {name}")
            return int(name)
        try:
            return self.param_names.index(name)
        except ValueError:
            raise KeyError(f"{self.kind.value} has no parameter {name!r}") from None

    def with_params(self, params):
        params = tuple(float(p) for p in params)
        if len(params) != self.q:
            raise ValueError(f"expected {self.q} parameters, got {len(params)}")
        return replace(self, params=params)

    # -- right-hand sides -------------------------------------------------

    def tendency(self, u):
        """Continuous right-hand side f(u); the linear model has none."""
        u = np.asarray(u, dtype=float)
        if self.kind is ModelKind.LORENZ63:
            sigma, rho, beta = self.params
            x, y, z = u[..., 0], u[..., 1], u[..., 2]
            return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)
        if self.kind is ModelKind.LORENZ96:
            (F,) = self.params
            return (np.roll(u, -1, axis=-1) - np.roll(u, 2, axis=-1)) * np.roll(u, 1, axis=-1) - u + F
        raise TypeError("the linear test model is defined by its step map only")

    def step(self, u):
        """One forward-Euler step (or ``M u + forcing @ theta`` for the linear model)."""
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.n:
            raise ValueError(f"state has trailing dimension {u.shape[-1]}, expected {self.n}")
        if self.kind is ModelKind.LINEAR:
            out = u @ self.matrix.T
            if self.q:
                out = out + self.forcing @ np.asarray(self.params)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                out = u + self.dt * self.tendency(u)
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.isfinite(out))[0])
            raise ModelDivergence(bad)
        return out

    def step_jacobian(self, u):
        """dF/du at ``u``; shape ``(..., n, n)``."""
        u = np.asarray(u, dtype=float)
        n, dt = self.n, self.dt
        if self.kind is ModelKind.LINEAR:
            return np.broadcast_to(self.matrix, u.shape[:-1] + (n, n)).copy()
        jac = np.zeros(u.shape[:-1] + (n, n))
        if self.kind is ModelKind.LORENZ63:
            sigma, rho, beta = self.params
            x, y, z = u[..., 0], u[..., 1], u[..., 2]
            jac[..., 0, 0] = 1 - sigma * dt
            jac[..., 0, 1] = sigma * dt
            jac[..., 1, 0] = dt * (rho - z)
            jac[..., 1, 1] = 1 - dt
            jac[..., 1, 2] = -dt * x
            jac[..., 2, 0] = dt * y
            jac[..., 2, 1] = dt * x
            jac[..., 2, 2] = 1 - beta * dt
            return jac
        # Lorenz 96, cyclic band: row l touches l-2, l-1, l, l+1
        rows = np.arange(n)
        xm2 = np.roll(u, 2, axis=-1)
        xm1 = np.roll(u, 1, axis=-1)
        xp1 = np.roll(u, -1, axis=-1)
        jac[..., rows, rows] = 1 - dt
        jac[..., rows, (rows + 1) % n] += dt * xm1
        jac[..., rows, (rows - 2) % n] += -dt * xm1
        jac[..., rows, (rows - 1) % n] += dt * (xp1 - xm2)
        return jac

    def step_param_derivative(self, u, which):
        """dF/dtheta_which at ``u``, shape ``(..., n)``."""
        u = np.asarray(u, dtype=float)
        i = self.param_index(which)
        dt = self.dt
        if self.kind is ModelKind.LORENZ63:
            col = np.zeros_like(u)
            if i == 0:
                col[..., 0] = dt * (u[..., 1] - u[..., 0])
            elif i == 1:
                col[..., 1] = dt * u[..., 0]
            else:
                col[..., 2] = -dt * u[..., 2]
            return col
        if self.kind is ModelKind.LORENZ96:
            return np.full_like(u, dt)
        return np.broadcast_to(self.forcing[:, i], u.shape).copy()

    def param_derivative_is_constant(self, which):
        """True when dF/dtheta_which does not depend on the state."""
        self.param_index(which)
        return self.kind is not ModelKind.LORENZ63

    def lipschitz_G(self):
        """Lipschitz constant of the window Jacobian G'(u) in the spectral norm."""
        if self.kind is ModelKind.LORENZ63:
            return np.sqrt(2.0) * self.dt
        if self.kind is ModelKind.LORENZ96:
            return np.sqrt(6.0) * self.dt
        return 0.0


def lorenz63(dt=0.005, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    return ModelSpec(ModelKind.LORENZ63, 3, float(dt), (float(sigma), float(rho), float(beta)))


def lorenz96(d=40, dt=0.0025, forcing=8.0):
    return ModelSpec(ModelKind.LORENZ96, int(d), float(dt), (float(forcing),))


def linear_test(matrix=None, n=1, forcing=None, theta=None, dt=1.0):
    """Linear map ``u -> M u + forcing @ theta``; default ``M = 0.5 I``.

    ``forcing`` is an ``(n, q)`` array of constant parameter columns, which
    makes the window residual affine in theta.
    """
    if matrix is None:
        matrix = 0.5 * np.eye(n)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ValueError("matrix must be square")
    if forcing is None:
        forcing = np.zeros((n, 0))
    forcing = np.asarray(forcing, dtype=float).reshape(n, -1)
    q = forcing.shape[1]
    theta = np.zeros(q) if theta is None else np.asarray(theta, dtype=float).ravel()
    if theta.size != q:
        raise ValueError("theta must match the number of forcing columns")
    return ModelSpec(ModelKind.LINEAR, n, float(dt), tuple(float(t) for t in theta),
                     matrix=_frozen(matrix), forcing=_frozen(forcing))


def model_from_name(name, **kwargs):
    name = ModelKind(name)
    if name is ModelKind.LORENZ63:
        return lorenz63(**kwargs)
    if name is ModelKind.LORENZ96:
        return lorenz96(**kwargs)
    return linear_test(**kwargs)
