"""Sparse symmetric linear algebra: SPD factorization of the preconditioner
blocks and preconditioned MinRes for the indefinite step operator.

The indefinite operator is only ever applied as a matrix-vector product;
direct factorization is reserved for the SPD preconditioner blocks.  MinRes
follows the classical Lanczos/Givens formulation (Paige & Saunders 1975)
with a symmetric positive definite preconditioner; convergence is measured
in the preconditioned residual norm relative to the preconditioned norm of
the right-hand side.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


class NotPositiveDefiniteError(SolverError):
    """A pivot of an intended-SPD factorization was not positive."""

    def __init__(self, pivot_index, pivot_value, label=""):
        self.pivot_index = int(pivot_index)
        self.pivot_value = float(pivot_value)
        name = f" in {label}" if label else ""
        super().__init__(
            f"non-positive pivot {pivot_value:.6e} at index {pivot_index}{name}; "
            "matrix is not positive definite"
        )


class BreakdownError(SolverError):
    """The Lanczos recurrence broke down before reaching the tolerance."""


class NotConvergedError(SolverError):
    """Iteration limit reached; carries the best iterate and its report."""

    def __init__(self, x, report):
        self.x = x
        self.report = report
        super().__init__(
            f"no convergence in {report.iterations} iterations "
            f"(relative preconditioned residual {report.rel_residual:.3e})"
        )


@dataclass
class SolveReport:
    iterations: int
    residual: float
    rel_residual: float
    converged: bool
    wall_time: float


def _check_symmetric(a, tol=1e-12):
    d = abs(a - a.T)
    if d.nnz and d.max() > tol * max(abs(a).max(), 1e-300):
        raise ValueError("matrix is not symmetric")


class SpdFactorization:
    """Exact sparse factorization of a symmetric positive definite matrix.

    Backed by a sparse LU with a symmetric fill-reducing ordering and
    diagonal pivoting, which for an SPD matrix is an exact Cholesky-like
    factorization; any non-positive pivot is reported with its index, the
    usual symptom of a missing boundary penalty or a bad penalty constant.
    """

    def __init__(self, a, label=""):
        a = a.tocsc()
        if a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        _check_symmetric(a)
        self.n = a.shape[0]
        self.label = label
        try:
            self._lu = spla.splu(
                a,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            if "singular" in str(exc).lower():
                diag = a.diagonal()
                raise NotPositiveDefiniteError(
                    int(np.argmin(diag)), float(np.min(diag)), label
                ) from exc
            raise
        pivots = self._lu.U.diagonal()
        bad = np.flatnonzero(~(pivots > 0.0))
        if len(bad):
            # map the factor position back to the original DOF index
            row = int(self._lu.perm_c[bad[0]])
            raise NotPositiveDefiniteError(row, pivots[bad[0]], label)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        return self._lu.solve(b)


class BlockDiagPreconditioner:
    """Inverse of the block-diagonal preconditioner via per-block solves."""

    def __init__(self, pv_fact, pqc_fact, pq0_fact):
        self.blocks = (pv_fact, pqc_fact, pq0_fact)
        self.n = sum(b.n for b in self.blocks)

    def __call__(self, r):
        return apply_block_preconditioner(*self.blocks, r)


def apply_block_preconditioner(pv_fact, pqc_fact, pq0_fact, r):
    """Apply the inverse preconditioner blockwise to a stacked residual."""
    r = np.asarray(r, dtype=float)
    n0, n1, n2 = pv_fact.n, pqc_fact.n, pq0_fact.n
    if r.shape[0] != n0 + n1 + n2:
        raise ValueError(
            f"residual has length {r.shape[0]}, blocks expect {n0 + n1 + n2}"
        )
    return np.concatenate(
        [
            pv_fact.solve(r[:n0]),
            pqc_fact.solve(r[n0 : n0 + n1]),
            pq0_fact.solve(r[n0 + n1 :]),
        ]
    )


def minres(apply_a, apply_pinv, b, rtol=1e-8, maxit=1000, x0=None):
    """Preconditioned MinRes for a symmetric (possibly indefinite) operator.

    Parameters
    ----------
    apply_a : callable(v) -> A v, symmetric
    apply_pinv : callable(v) -> P^{-1} v with P symmetric positive definite
    b : right-hand side
    rtol : stop when ||b - A x||_{P^{-1}} <= rtol ||b||_{P^{-1}}
    maxit : iteration limit
    x0 : optional initial guess

    Returns ``(x, SolveReport)``.  Raises ``NotConvergedError`` at the
    iteration limit and ``BreakdownError`` on Lanczos breakdown before
    convergence.  The recurrence keeps the preconditioned residual norm
    non-increasing by construction; the report carries a directly
    recomputed final residual.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    start = time.perf_counter()

    def op_a(vec):
        out = np.asarray(apply_a(vec), dtype=float)
        return out.copy() if out is vec else out

    def op_pinv(vec):
        out = np.asarray(apply_pinv(vec), dtype=float)
        return out.copy() if out is vec else out

    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - op_a(x)

    zb = op_pinv(b)
    norm_b2 = float(b @ zb)
    if norm_b2 < 0.0:
        raise BreakdownError("preconditioner is not positive definite on b")
    norm_b = np.sqrt(norm_b2)
    if norm_b == 0.0:
        report = SolveReport(0, 0.0, 0.0, True, time.perf_counter() - start)
        return np.zeros(n), report
    tol_abs = rtol * norm_b

    def finish(x, iters):
        res = b - op_a(x)
        pres = op_pinv(res)
        rnorm2 = float(res @ pres)
        rnorm = np.sqrt(max(rnorm2, 0.0))
        rel = rnorm / norm_b
        report = SolveReport(
            iterations=iters,
            residual=rnorm,
            rel_residual=rel,
            converged=bool(rel <= rtol * 1.0000001),
            wall_time=time.perf_counter() - start,
        )
        return report

    y = op_pinv(r)
    beta1_sq = float(r @ y)
    if beta1_sq < 0.0:
        raise BreakdownError("preconditioner is not positive definite on r0")
    beta1 = np.sqrt(beta1_sq)
    if beta1 <= tol_abs:
        return x, finish(x, 0)

    # Lanczos / Givens state (Paige-Saunders recurrences)
    r1 = r.copy()
    r2 = r.copy()
    oldb = 0.0
    beta = beta1
    dbar = 0.0
    epsln = 0.0
    phibar = beta1
    cs = -1.0
    sn = 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    eps = np.finfo(float).eps

    iters = 0
    while iters < maxit:
        iters += 1
        s = 1.0 / beta
        v = s * y
        y = op_a(v)
        if iters >= 2:
            y -= (beta / oldb) * r1
        alfa = float(v @ y)
        y -= (alfa / beta) * r2
        r1 = r2
        r2 = y
        y = op_pinv(r2)
        oldb = beta
        beta_sq = float(r2 @ y)
        if beta_sq < 0.0:
            raise BreakdownError("preconditioner is not positive definite")
        beta = np.sqrt(beta_sq)

        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = np.sqrt(gbar * gbar + beta * beta)
        gamma = max(gamma, eps)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        new_phibar = sn * phibar
        # |sn| <= 1 keeps the estimated preconditioned residual monotone
        assert abs(new_phibar) <= abs(phibar) * (1.0 + 1e-14)
        phibar = new_phibar

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w

        if abs(phibar) <= tol_abs:
            report = finish(x, iters)
            if report.converged:
                return x, report
            # recurrence estimate was optimistic; keep iterating on the
            # true residual target
            tol_abs = max(tol_abs * 0.1, abs(phibar) * 0.1)

        if beta <= beta1 * 1e-15:
            report = finish(x, iters)
            if report.converged:
                return x, report
            raise BreakdownError(
                f"Lanczos breakdown at iteration {iters} with relative residual "
                f"{report.rel_residual:.3e}"
            )

    report = finish(x, iters)
    if report.converged:
        return x, report
    raise NotConvergedError(x, report)


def dense_solve_oracle(a, b):
    """Reference dense solve (LAPACK) for small verification problems."""
    a = a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)
    return np.linalg.solve(a, np.asarray(b, dtype=float))
