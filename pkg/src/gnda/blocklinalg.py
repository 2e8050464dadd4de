"""Window residual, its block-bidiagonal Jacobian and the regularised normal
equations ``(J^T J + alpha H^T H) x = g``.

Block arrays are used throughout: a window vector is ``(N + 1, n)`` and a
residual vector is ``(N, n)``.  The dense helpers at the bottom exist as
oracles for small problems.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

SOLVE_RTOL = 1e-8
DENSE_LIMIT = 200


class IllPosed(np.linalg.LinAlgError):
    """The regularised normal matrix could not be factorised or solved reliably."""


def residual(model, u):
    """Model mismatch ``G_j(u) = u_{j+1} - F(u_j)``, shape ``(N, n)``."""
    u = np.asarray(u, dtype=float)
    return u[1:] - model.step(u[:-1])


@dataclass
class BlockBidiagonal:
    """``nN x n(N+1)`` matrix with ``lower[j]`` at block (j, j) and
    ``identity_scale * I`` at block (j, j + 1).

    ``identity_scale`` is 1 for a window Jacobian and 0 for the difference of
    two Jacobians.
    """

    lower: np.ndarray
    identity_scale: float = 1.0

    @property
    def N(self):
        return self.lower.shape[0]

    @property
    def n(self):
        return self.lower.shape[1]

    @property
    def shape(self):
        return (self.N * self.n, (self.N + 1) * self.n)

    def matvec(self, w):
        w = np.asarray(w, dtype=float)
        return np.einsum("jab,jb->ja", self.lower, w[:-1]) + self.identity_scale * w[1:]

    def rmatvec(self, v):
        v = np.asarray(v, dtype=float)
        out = np.zeros((self.N + 1, self.n))
        out[:-1] = np.einsum("jba,jb->ja", self.lower, v)
        out[1:] += self.identity_scale * v
        return out

    def to_dense(self):
        N, n = self.N, self.n
        D = np.zeros(self.shape)
        for j in range(N):
            D[j * n:(j + 1) * n, j * n:(j + 1) * n] = self.lower[j]
            D[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = self.identity_scale * np.eye(n)
        return D

    def __sub__(self, other):
        return BlockBidiagonal(self.lower - other.lower, self.identity_scale - other.identity_scale)


def jacobian(model, u):
    """Window Jacobian G'(u): ``lower[j] = -F'(u_j)``."""
    u = np.asarray(u, dtype=float)
    return BlockBidiagonal(-model.step_jacobian(u[:-1]))


@dataclass
class BlockTridiagonal:
    """Symmetric block-tridiagonal matrix.

    ``diag`` has shape ``(N + 1, n, n)``; ``sub[j]`` is block (j + 1, j) and
    its transpose sits at (j, j + 1).
    """

    diag: np.ndarray
    sub: np.ndarray
    _factor: "BlockCholesky | None" = field(default=None, init=False, repr=False, compare=False)

    @property
    def nblocks(self):
        return self.diag.shape[0]

    @property
    def n(self):
        return self.diag.shape[1]

    @property
    def shape(self):
        m = self.nblocks * self.n
        return (m, m)

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        y = np.einsum("jab,jb...->ja...", self.diag, x)
        y[1:] += np.einsum("jab,jb...->ja...", self.sub, x[:-1])
        y[:-1] += np.einsum("jba,jb...->ja...", self.sub, x[1:])
        return y

    def to_dense(self):
        n, m = self.n, self.nblocks
        D = np.zeros(self.shape)
        for j in range(m):
            D[j * n:(j + 1) * n, j * n:(j + 1) * n] = self.diag[j]
        for j in range(m - 1):
            D[(j + 1) * n:(j + 2) * n, j * n:(j + 1) * n] = self.sub[j]
            D[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = self.sub[j].T
        return D

    def factor(self):
        """Cached block Cholesky factorisation."""
        if self._factor is None:
            self._factor = BlockCholesky(self)
        return self._factor

    def write_triplets(self, path):
        """Dump non-zero entries as ``row col value`` lines (0-based)."""
        n = self.n
        with open(path, "w") as fh:
            fh.write(f"# block-tridiagonal {self.shape[0]} x {self.shape[1]}, block size {n}\n")
            for b in range(self.nblocks):
                blocks = [(b, b, self.diag[b])]
                if b:
                    blocks += [(b, b - 1, self.sub[b - 1]), (b - 1, b, self.sub[b - 1].T)]
                for r0, c0, B in blocks:
                    for a, c in zip(*np.nonzero(B)):
                        fh.write(f"{r0 * n + a} {c0 * n + c} {float(B[a, c])!r}\n")


def assemble_normal(J, alpha, H, shift=0.0, model_weight=1.0):
    """``model_weight * J^T J + alpha * H^T H + shift * I`` in block form.

    ``H`` may be an :class:`~gnda.window.ObservationOperator` or a boolean
    ``(N + 1, n)`` mask.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    mask = getattr(H, "mask", H)
    F = -J.lower
    s = J.identity_scale
    N, n = J.N, J.n
    diag = np.zeros((N + 1, n, n))
    diag[:-1] = np.einsum("jka,jkb->jab", F, F)
    diag[1:] += s * s * np.eye(n)
    diag *= model_weight
    idx = np.arange(n)
    diag[:, idx, idx] += alpha * np.asarray(mask, dtype=float) + shift
    sub = -model_weight * s * F
    return BlockTridiagonal(diag, sub)


class BlockCholesky:
    """``A = L L^T`` with L block lower bidiagonal.

    Diagonal factor blocks are dense Cholesky factors of the Schur
    complements; a pivot block that is not positive definite raises
    :class:`IllPosed`.
    """

    def __init__(self, A):
        diag, sub = A.diag, A.sub
        m, n = diag.shape[0], diag.shape[1]
        L = np.empty_like(diag)
        C = np.empty_like(sub)
        S = diag[0]
        for j in range(m):
            if j:
                S = diag[j] - C[j - 1] @ C[j - 1].T
            try:
                L[j] = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise IllPosed(f"pivot block {j} is not positive definite") from None
            if j < m - 1:
                C[j] = solve_triangular(L[j], sub[j].T, lower=True, check_finite=False).T
        if not np.all(np.isfinite(L)):
            raise IllPosed("non-finite factor")
        Linv = np.linalg.inv(L)
        # fresh view without the cached factor, so no reference cycle keeps blocks alive
        self.A = BlockTridiagonal(diag, sub)
        self.Linv = Linv
        self.LinvT = np.swapaxes(Linv, 1, 2)
        # z_{j+1} = Linv_{j+1} b_{j+1} - M_j z_j ;  x_j = Linv_j^T z_j - K_j x_{j+1}
        self.M = Linv[1:] @ C
        self.K = self.LinvT[:-1] @ np.swapaxes(C, 1, 2)

    def solve(self, rhs, check=True):
        rhs = np.asarray(rhs, dtype=float)
        w = np.einsum("jab,jb...->ja...", self.Linv, rhs)
        M, K = self.M, self.K
        m = w.shape[0]
        for j in range(m - 1):
            w[j + 1] -= M[j] @ w[j]
        x = np.einsum("jab,jb...->ja...", self.LinvT, w)
        for j in range(m - 2, -1, -1):
            x[j] -= K[j] @ x[j + 1]
        if check:
            r = np.linalg.norm(self.A.matvec(x) - rhs)
            if not np.isfinite(r) or r > SOLVE_RTOL * (1.0 + np.linalg.norm(rhs)):
                raise IllPosed(f"solve residual {r:.3e} exceeds tolerance")
        return x


def solve_normal(A, rhs, check=True):
    """Solve ``A x = rhs`` by block Cholesky; raises :class:`IllPosed`."""
    return A.factor().solve(rhs, check=check)


# -- operator norms ---------------------------------------------------------

@dataclass
class NormEstimate:
    value: float
    iterations: int
    converged: bool
    rel_tol: float
    vector: np.ndarray | None = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)


def power_norm(apply_sym, shape, rel_tol=1e-6, max_iter=500, v0=None, seed=0):
    """sqrt(lambda_max) of a symmetric PSD operator by power iteration.

    The estimate is the square root of the Rayleigh quotient, which never
    decreases for a PSD operator.
    """
    if v0 is None:
        v = np.random.default_rng(seed).standard_normal(shape)
    else:
        v = np.array(v0, dtype=float, copy=True)
    v /= np.linalg.norm(v)
    prev = None
    history = []
    for it in range(1, max_iter + 1):
        Sv = apply_sym(v)
        lam = max(float(np.vdot(v, Sv)), 0.0)
        est = np.sqrt(lam)
        history.append(est)
        nrm = np.linalg.norm(Sv)
        if nrm == 0:
            return NormEstimate(0.0, it, True, rel_tol, v, history)
        v = Sv / nrm
        if prev is not None and abs(est - prev) <= rel_tol * est:
            return NormEstimate(est, it, True, rel_tol, v, history)
        prev = est
    return NormEstimate(est, max_iter, False, rel_tol, v, history)


def opnorm_solve_Jt(J, A, rel_tol=1e-6, max_iter=500, v0=None):
    """Estimate ``||A^{-1} J^T||_2``."""
    fac = A.factor()

    def op(v):
        x = fac.solve(v)
        return fac.solve(J.rmatvec(J.matvec(x)))

    return power_norm(op, (J.N + 1, J.n), rel_tol, max_iter, v0)


def opnorm_inverse(A, rel_tol=1e-6, max_iter=500, v0=None):
    """Estimate ``||A^{-1}||_2`` via power iteration on ``A^{-2}``."""
    fac = A.factor()
    return power_norm(lambda v: fac.solve(fac.solve(v)), (A.nblocks, A.n), rel_tol, max_iter, v0)


def opnorm_matrix(B, rel_tol=1e-6, max_iter=500, v0=None):
    """Estimate ``||B||_2`` for a :class:`BlockBidiagonal` or dense array."""
    if isinstance(B, BlockBidiagonal):
        return power_norm(lambda v: B.rmatvec(B.matvec(v)), (B.N + 1, B.n), rel_tol, max_iter, v0)
    B = np.asarray(B, dtype=float)
    return power_norm(lambda v: B.T @ (B @ v), (B.shape[1],), rel_tol, max_iter, v0)


# -- dense oracles ------------------------------------------------------------

def _check_dense_size(m):
    if m > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to dimension {DENSE_LIMIT}, got {m}")


def dense_normal(J, alpha, H):
    Jd = J.to_dense()
    _check_dense_size(Jd.shape[1])
    mask = getattr(H, "mask", H)
    return Jd.T @ Jd + alpha * np.diag(np.asarray(mask, dtype=float).ravel())


def dense_opnorm_solve_Jt(J, A):
    Ad = A.to_dense()
    _check_dense_size(Ad.shape[0])
    return np.linalg.norm(np.linalg.solve(Ad, J.to_dense().T), 2)


def dense_opnorm_inverse(A):
    Ad = A.to_dense()
    _check_dense_size(Ad.shape[0])
    return 1.0 / np.linalg.svd(Ad, compute_uv=False)[-1]
