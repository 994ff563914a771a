"""Sparse linear algebra: GMRES, ILU(0), the fluid/heat block preconditioner."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import SolverError, ZeroPivotError

#: Storage type for sparse matrices (row offsets, sorted column indices, values).
CsrMatrix = sp.csr_matrix

DENSE_CAP = 2000


def as_csr(matrix):
    """Canonical CSR copy: duplicates summed, column indices sorted."""
    a = sp.csr_matrix(matrix, dtype=float, copy=True)
    a.sum_duplicates()
    a.sort_indices()
    return a


def _operator(a):
    if isinstance(a, spla.LinearOperator):
        return a.matvec
    if sp.issparse(a) or isinstance(a, np.ndarray):
        return lambda v: a @ v
    if callable(a):
        return a
    a = np.asarray(a, dtype=float)
    return lambda v: a @ v


# --------------------------------------------------------------------------
# GMRES

class GmresResult:
    """Outcome of :func:`gmres`; unpacks as ``(x, iterations, history)``."""

    def __init__(self, x, iterations, history, converged):
        self.x = x
        self.iterations = iterations
        self.history = history
        self.converged = converged

    def __iter__(self):
        return iter((self.x, self.iterations, self.history))


def gmres(matrix, rhs, preconditioner=None, tol=1e-8, max_iter=500, restart=100, x0=None, atol=0.0):
    """Restarted right-preconditioned (flexible) GMRES.

    The preconditioner may change between iterations (e.g. an inner Krylov
    solve); the stored preconditioned directions keep the update exact.
    ``history`` holds the residual norm after every iteration, starting with
    the initial one.  Stops when ``||r|| <= tol ||r0|| + atol``.
    """
    if not 0.0 < tol < 1.0:
        raise SolverError("gmres tol must lie in (0, 1)")
    b = np.asarray(rhs, dtype=float)
    n = b.shape[0]
    if (sp.issparse(matrix) or isinstance(matrix, np.ndarray)) and matrix.shape != (n, n):
        raise SolverError(f"shape mismatch: matrix {matrix.shape}, rhs {b.shape}")
    A = _operator(matrix)
    M = _operator(preconditioner) if preconditioner is not None else (lambda v: v)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)

    def apply(op, v, what):
        w = np.asarray(op(v), dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise SolverError(f"non-finite value in {what} output")
        return w

    r = b - apply(A, x, "operator") if x.any() else b.copy()
    beta = np.linalg.norm(r)
    history = [beta]
    target = tol * beta + atol
    its = 0
    if beta <= target or beta == 0.0:
        return GmresResult(x, 0, history, True)
    m = max(1, int(restart))
    while its < max_iter:
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        done = False
        while k < m and its < max_iter:
            Z[k] = apply(M, V[k], "preconditioner")
            w = apply(A, Z[k], "operator")
            for _ in range(2):  # classical Gram-Schmidt with one reorthogonalization
                c = V[: k + 1] @ w
                w -= c @ V[: k + 1]
                H[: k + 1, k] += c
            hnext = np.linalg.norm(w)
            H[k + 1, k] = hnext
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            den = np.hypot(H[k, k], H[k + 1, k])
            breakdown = H[k + 1, k] <= 1e-14 * max(den, 1e-300)
            if den == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = H[k, k] / den, H[k + 1, k] / den
            H[k, k] = den
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            its += 1
            k += 1
            history.append(abs(g[k]))
            if abs(g[k]) <= target or breakdown:
                done = breakdown
                break
            V[k] = w / hnext
        y = scipy.linalg.solve_triangular(H[:k, :k], g[:k])
        x = x + Z[:k].T @ y
        r = b - apply(A, x, "operator")
        beta = np.linalg.norm(r)
        history[-1] = beta
        if beta <= target or done:
            # a happy breakdown means the Krylov space holds the solution
            return GmresResult(x, its, history, True)
    return GmresResult(x, its, history, beta <= target)


# --------------------------------------------------------------------------
# ILU(0)

@numba.njit(cache=True)
def _ilu0_kernel(indptr, indices, data, n):
    diag = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] == i:
                diag[i] = p
    marker = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if diag[i] < 0:
            return i
        for p in range(indptr[i], indptr[i + 1]):
            marker[indices[p]] = p
        for p in range(indptr[i], indptr[i + 1]):
            k = indices[p]
            if k >= i:
                break
            piv = data[diag[k]]
            if piv == 0.0:
                return k
            data[p] /= piv
            lik = data[p]
            for q in range(diag[k] + 1, indptr[k + 1]):
                j = indices[q]
                pos = marker[j]
                if pos >= 0:
                    data[pos] -= lik * data[q]
        for p in range(indptr[i], indptr[i + 1]):
            marker[indices[p]] = -1
        if data[diag[i]] == 0.0:
            return i
    return -1


@numba.njit(cache=True)
def _ilu0_solve(indptr, indices, data, diag, b):
    n = b.shape[0]
    y = b.copy()
    for i in range(n):
        s = y[i]
        for p in range(indptr[i], diag[i]):
            s -= data[p] * y[indices[p]]
        y[i] = s
    for i in range(n - 1, -1, -1):
        s = y[i]
        for p in range(diag[i] + 1, indptr[i + 1]):
            s -= data[p] * y[indices[p]]
        y[i] = s / data[diag[i]]
    return y


class Ilu0:
    """ILU(0) factors stored in the sparsity of the input (unit L below, U on/above the diagonal)."""

    def __init__(self, matrix):
        a = as_csr(matrix)
        n = a.shape[0]
        if a.shape[0] != a.shape[1]:
            raise SolverError("ilu0 needs a square matrix")
        self.shape = a.shape
        self.indptr = a.indptr.astype(np.int64)
        self.indices = a.indices.astype(np.int64)
        data = a.data.copy()
        bad = _ilu0_kernel(self.indptr, self.indices, data, n)
        if bad >= 0:
            raise ZeroPivotError(int(bad))
        self.data = data
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        self.diag = np.flatnonzero(self.indices == rows).astype(np.int64)

    def solve(self, b):
        return _ilu0_solve(self.indptr, self.indices, self.data, self.diag, np.asarray(b, dtype=float))

    __call__ = solve

    def factors(self):
        full = sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        L = sp.tril(full, -1, format="csr") + sp.identity(self.shape[0], format="csr")
        U = sp.triu(full, 0, format="csr")
        return L, U


def ilu0(matrix):
    return Ilu0(matrix)


class AdditiveSchwarz:
    """Two overlapping index subdomains, each solved by ILU(0), combined additively."""

    def __init__(self, matrix, overlap=0.1):
        a = as_csr(matrix)
        n = a.shape[0]
        half = n // 2
        ov = max(1, int(overlap * n))
        self.parts = [np.arange(0, min(n, half + ov)), np.arange(max(0, half - ov), n)]
        self.factors = [Ilu0(a[idx][:, idx]) for idx in self.parts]
        weight = np.zeros(n)
        for idx in self.parts:
            weight[idx] += 1.0
        self.weight = 1.0 / weight
        self.shape = a.shape

    def solve(self, b):
        out = np.zeros(self.shape[0])
        for idx, f in zip(self.parts, self.factors):
            out[idx] += f.solve(b[idx])
        return out * self.weight

    __call__ = solve


def make_subsolver(matrix, kind="ilu"):
    if kind == "ilu":
        return Ilu0(matrix)
    if kind == "asm":
        return AdditiveSchwarz(matrix)
    if kind == "exact":
        lu = spla.splu(sp.csc_matrix(matrix))
        return lu.solve
    raise SolverError(f"unknown sub-block solver {kind!r}")


# --------------------------------------------------------------------------
# block systems and the block preconditioner

@dataclass
class BlockSystem:
    """Monolithic matrix and index partition into velocity, pressure(+gauge) and temperature."""

    matrix: sp.csr_matrix
    u: np.ndarray
    p: np.ndarray
    T: np.ndarray
    gauge: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = as_csr(self.matrix)
        n = self.matrix.shape[0]
        allidx = np.concatenate([self.u, self.p, self.T, self.gauge]).astype(np.int64)
        if self.matrix.shape[1] != n or len(allidx) != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise SolverError("block partition must cover all dofs exactly once")

    def block(self, rows, cols):
        return self.matrix[rows][:, cols]

    @property
    def A_uu(self):
        return self.block(self.u, self.u)

    @property
    def B_pu(self):
        return self.block(self.p, self.u)

    @property
    def B_up(self):
        return self.block(self.u, self.p)

    @property
    def C_uT(self):
        return self.block(self.u, self.T)

    @property
    def D_Tu(self):
        return self.block(self.T, self.u)

    @property
    def K_TT(self):
        return self.block(self.T, self.T)


@dataclass
class PreconditionerOptions:
    schur: str = "pcd"  # pcd | mass | exact
    inner: str = "ilu"  # ilu | asm | exact
    inner_tol: float = 1e-2
    inner_maxiter: int = 30
    inner_restart: int = 30


def _inner_solver(matrix, opts):
    sub = make_subsolver(matrix, opts.inner)
    if opts.inner == "exact":
        return sub

    def solve(b):
        if not np.any(b):
            return np.zeros_like(b)
        res = gmres(matrix, b, sub, tol=opts.inner_tol, max_iter=opts.inner_maxiter, restart=opts.inner_restart)
        return res.x

    return solve


def _pinned_neumann_solver(Ap):
    """Solve with a singular Neumann Laplacian: project the rhs, pin dof 0."""
    n = Ap.shape[0]
    a = sp.lil_matrix(Ap)
    a[0, :] = 0.0
    a[:, 0] = 0.0
    a[0, 0] = 1.0
    lu = spla.splu(sp.csc_matrix(a))

    def solve(b):
        b = b - b.mean()
        b = b.copy()
        b[0] = 0.0
        return lu.solve(b)

    return solve


def _schur_inverse(system, mu, rho, opts):
    aux = system.aux
    if "Mp" not in aux:
        raise SolverError("block preconditioner needs the pressure mass matrix")
    mp = spla.splu(sp.csc_matrix(aux["Mp"]))
    if opts.schur == "mass":
        return lambda b: mu * mp.solve(b)
    if opts.schur != "pcd":
        raise SolverError(f"unknown Schur approximation {opts.schur!r}")
    Ap = aux["Ap"]
    Fp = mu * Ap + (rho * aux["Np"] if "Np" in aux else 0.0)
    ap = _pinned_neumann_solver(Ap)
    return lambda b: mp.solve(Fp @ ap(b))


def _pressure_solver(system, mu, rho, opts, F, G, B):
    """Solve the gauge-bordered Schur system ``[[S, m], [m^T, 0]] [p; y] = [a; b]``.

    With an enclosed flow ``S`` annihilates constants and ``1^T S = 0``, so
    ``y = sum(a) / sum(m)`` and ``p`` is ``S^-1 (a - m y)`` shifted to meet
    the gauge.
    """
    gauge = system.gauge
    if len(gauge) > 1:
        raise SolverError("at most one gauge row is supported")
    m = np.asarray(system.matrix[system.p][:, gauge].todense()).ravel() if len(gauge) else None
    if opts.schur == "exact":
        S = -(B.toarray() @ np.linalg.solve(F.toarray(), G.toarray()))
        if m is not None:
            S = np.block([[S, m[:, None]], [m[None, :], np.zeros((1, 1))]])
        lu, piv = scipy.linalg.lu_factor(S)
        if np.abs(np.diag(lu)).min() <= 1e-14 * np.abs(np.diag(lu)).max():
            raise SolverError("singular Schur approximation (pressure gauge not pinned)")
        if m is None:
            return lambda a, b: (scipy.linalg.lu_solve((lu, piv), a), 0.0)

        def exact(a, b):
            z = scipy.linalg.lu_solve((lu, piv), np.append(a, b))
            return z[:-1], z[-1]

        return exact
    s_inv = _schur_inverse(system, mu, rho, opts)
    if m is None:
        return lambda a, b: (s_inv(a), 0.0)
    msum = m.sum()
    if not abs(msum) > 0:
        raise SolverError("singular Schur approximation (pressure gauge not pinned)")

    def bordered(a, b):
        y = a.sum() / msum
        p = s_inv(a - m * y)
        p = p + (b - m @ p) / msum
        return p, y

    return bordered


def build_block_preconditioner(system, params=None, options=None):
    """Block-diagonal (fluid | heat) preconditioner action.

    Fluid: upper block-triangular ``[F, G; 0, S]`` with ``S`` a PCD (or mass)
    approximation of the Schur complement, bordered by the gauge row. Heat:
    inner GMRES on ``K_TT``. The fluid/heat coupling blocks are dropped.
    """
    opts = options or PreconditionerOptions()
    mu = getattr(params, "mu", 1.0) if params is not None else 1.0
    rho = getattr(params, "rho", 1.0) if params is not None else 1.0
    F = system.A_uu
    G = system.B_up
    B = system.B_pu
    solve_F = _inner_solver(F, opts)
    solve_T = _inner_solver(system.K_TT, opts) if len(system.T) else None
    solve_p = _pressure_solver(system, mu, rho, opts, F, G, B)
    u, p, T, gauge = system.u, system.p, system.T, system.gauge

    def apply(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        xp, y = solve_p(r[p], r[gauge[0]] if len(gauge) else 0.0)
        out[p] = xp
        if len(gauge):
            out[gauge[0]] = y
        out[u] = solve_F(r[u] - G @ xp)
        if solve_T is not None:
            out[T] = solve_T(r[T])
        return out

    return apply


# --------------------------------------------------------------------------
# dense fallback and debug output

def dense_solve(matrix, rhs, cap=DENSE_CAP):
    """Partial-pivot LU solve for small dense systems."""
    a = np.asarray(matrix.toarray() if sp.issparse(matrix) else matrix, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise SolverError("dense_solve needs a square matrix")
    if n > cap:
        raise SolverError(f"dense_solve limited to n <= {cap} (got {n})")
    with warnings.catch_warnings():
        # singularity is reported below as a SolverError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    d = np.abs(np.diag(lu))
    if d.min() <= n * np.finfo(float).eps * max(d.max(), np.abs(a).max()):
        raise SolverError("matrix is singular to working precision")
    return scipy.linalg.lu_solve((lu, piv), np.asarray(rhs, dtype=float))


def dump_matrix_market(matrix, path, comment=""):
    """Write ``matrix`` in Matrix Market coordinate format (1-based)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment, field="real")
