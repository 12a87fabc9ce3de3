"""One- and two-level restricted additive Schwarz operators and solvers.

The fine-level preconditioner is M = sum_i R̃_i^T (A_i + L_i)^{-1} R_i
with A_i the Galerkin subdomain block and L_i an optional interface
perturbation (zero gives classical RAS).  The two-level version adds the
coarse correction C = P (P^T A P)^{-1} P^T multiplicatively, so the error
propagation operator is T = (I - C A)(I - M A) and the combined
preconditioner is M_2 = C + M - C A M.  Subdomain and coarse solves use
cached dense LU factorizations.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .partition import Decomposition, classical_P, interface_sparsity, interp_sparsity
from .sparse import CsrMatrix


class FactorizationFailure(RuntimeError):
    """A subdomain or coarse matrix could not be factorized."""

    def __init__(self, message, subdomain=None):
        super().__init__(message)
        self.subdomain = subdomain


class NumericalBreakdown(RuntimeError):
    """Arnoldi breakdown before reaching the requested tolerance."""


class ModeError(ValueError):
    """Operation requires a different operator level."""


@dataclass
class SchwarzOperator:
    A: CsrMatrix
    decomposition: Decomposition
    subdomain_factors: list
    L: list
    P: CsrMatrix
    coarse_factor: tuple
    levels: str
    # cached index arrays for the scatter/gather in apply_M
    _dofs: list = None
    _own_local: list = None
    _own_global: list = None

    @property
    def n(self) -> int:
        return self.A.n_rows


def _pattern_within(m: CsrMatrix, rows: np.ndarray, cols: np.ndarray) -> bool:
    from .sparse import pattern_rows

    have = pattern_rows(m) * m.n_cols + m.col_idx
    allowed = rows * m.n_cols + cols
    return bool(np.all(np.isin(have, allowed)))


def _lu(dense: np.ndarray, what: str, subdomain=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            lu, piv = sla.lu_factor(dense)
        except Exception as exc:
            raise FactorizationFailure(
                f"{what} factorization failed", subdomain=subdomain
            ) from exc
    diag = np.abs(np.diag(lu))
    if not np.all(np.isfinite(lu)) or diag.min() <= lu.shape[0] * np.finfo(
        np.float64
    ).eps * diag.max():
        raise FactorizationFailure(f"{what} matrix is singular", subdomain=subdomain)
    return lu, piv


def build(
    A: CsrMatrix,
    d: Decomposition,
    L: list = None,
    P: CsrMatrix = None,
    levels: str = "two",
) -> SchwarzOperator:
    """Assemble and factorize a Schwarz operator.

    ``L`` is a per-subdomain list of local interface perturbations (None
    means classical RAS); ``P`` defaults to the piecewise-constant
    interpolation.  Raises :class:`FactorizationFailure` if any perturbed
    subdomain matrix or the coarse matrix is singular.
    """
    if levels not in ("one", "two"):
        raise ValueError("levels must be 'one' or 'two'")
    a_sp = A.to_scipy()
    factors, dofs_list, own_local, own_global = [], [], [], []
    iface = interface_sparsity(d) if L is not None else None
    for i in range(d.S):
        dofs = d.overlap_sets[i]
        block = a_sp[dofs][:, dofs].toarray()
        if L is not None and L[i] is not None:
            li = L[i]
            if li.shape != (dofs.shape[0], dofs.shape[0]):
                raise ValueError(f"L[{i}] has shape {li.shape}, want local square")
            if not _pattern_within(li, iface[i].rows, iface[i].cols):
                raise ValueError(f"L[{i}] has entries outside the interface pattern")
            block = block + li.toarray()
        factors.append(_lu(block, f"subdomain {i}", subdomain=i))
        dofs_list.append(dofs)
        own = d.assign[dofs] == i
        own_local.append(np.nonzero(own)[0])
        own_global.append(dofs[own])

    coarse_factor = None
    if levels == "two":
        if P is None:
            P = classical_P(d)
        else:
            pat = interp_sparsity(d, mode="neighbors")
            cp = classical_P(d)
            allowed = np.concatenate(
                [
                    pat.rows * d.S + pat.cols,
                    np.repeat(np.arange(d.n), np.diff(cp.row_ptr)) * d.S + cp.col_idx,
                ]
            )
            from .sparse import pattern_rows

            have = pattern_rows(P) * d.S + P.col_idx
            if not np.all(np.isin(have, allowed)):
                raise ValueError("P has entries outside the interpolation pattern")
        p_sp = P.to_scipy()
        coarse = (p_sp.T @ a_sp @ p_sp).toarray()
        coarse_factor = _lu(coarse, "coarse")
    else:
        P = None

    return SchwarzOperator(
        A=A,
        decomposition=d,
        subdomain_factors=factors,
        L=L,
        P=P,
        coarse_factor=coarse_factor,
        levels=levels,
        _dofs=dofs_list,
        _own_local=own_local,
        _own_global=own_global,
    )


def apply_M(op: SchwarzOperator, x: np.ndarray) -> np.ndarray:
    """Fine-level action sum_i R̃_i^T (A_i + L_i)^{-1} R_i x.

    Subdomains are reduced in index order so the result is bitwise
    reproducible.
    """
    out = np.zeros(op.n)
    for i in range(op.decomposition.S):
        yi = sla.lu_solve(op.subdomain_factors[i], x[op._dofs[i]])
        out[op._own_global[i]] += yi[op._own_local[i]]
    return out


def coarse_correct(op: SchwarzOperator, x: np.ndarray) -> np.ndarray:
    """Coarse-level action P (P^T A P)^{-1} P^T x."""
    if op.levels != "two":
        raise ModeError("coarse correction requires a two-level operator")
    p_sp = op.P.to_scipy()
    yc = sla.lu_solve(op.coarse_factor, p_sp.T @ x)
    return p_sp @ yc


def apply_M2(op: SchwarzOperator, x: np.ndarray) -> np.ndarray:
    """Combined preconditioner M_2 = C + M - C A M (M alone if one-level)."""
    y = apply_M(op, x)
    if op.levels == "two":
        y = y + coarse_correct(op, x - op.A.matvec(y))
    return y


def apply_T(op: SchwarzOperator, x: np.ndarray) -> np.ndarray:
    """Error propagation (I - C A)(I - M A) x; fine factor only if one-level."""
    y = x - apply_M(op, op.A.matvec(x))
    if op.levels == "two":
        y = y - coarse_correct(op, op.A.matvec(y))
    return y


def stationary_solve(
    op: SchwarzOperator,
    b: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 500,
    trace_path=None,
):
    """Richardson iteration x <- x + M_2 (b - A x) from x = 0.

    Returns (x, iterations); iterations is max_iter + 1 when the relative
    residual never reaches tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.zeros(op.n)
    bnorm = np.linalg.norm(b)
    trace = []
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    for k in range(1, max_iter + 1):
        x = x + apply_M2(op, r)
        r = b - op.A.matvec(x)
        rel = np.linalg.norm(r) / bnorm
        trace.append((k, rel))
        if rel <= tol:
            _write_trace(trace_path, trace)
            return x, k
    _write_trace(trace_path, trace)
    return x, max_iter + 1


def fgmres(
    op: SchwarzOperator,
    b: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 300,
    precondition: bool = True,
    trace_path=None,
):
    """Flexible GMRES with right preconditioning z_j = M_2 v_j, no restart.

    Returns (x, iterations).  Raises :class:`NumericalBreakdown` if the
    Arnoldi basis degenerates while the residual estimate is still above
    tol; returns max_iter + 1 as the iteration count when the budget is
    exhausted.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = op.n
    beta = np.linalg.norm(b)
    if beta == 0.0:
        return np.zeros(n), 0
    v = [b / beta]
    z: list = []
    h = np.zeros((max_iter + 1, max_iter))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = beta
    trace = []
    iters = max_iter + 1
    for j in range(max_iter):
        z.append(apply_M2(op, v[j]) if precondition else v[j])
        w = op.A.matvec(z[j])
        for i in range(j + 1):
            h[i, j] = v[i] @ w
            w = w - h[i, j] * v[i]
        h[j + 1, j] = np.linalg.norm(w)
        subdiag = h[j + 1, j]
        col_scale = np.linalg.norm(h[: j + 2, j])
        for i in range(j):
            hi = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
            h[i + 1, j] = -sn[i] * h[i, j] + cs[i] * h[i + 1, j]
            h[i, j] = hi
        denom = np.hypot(h[j, j], h[j + 1, j])
        rel = abs(g[j]) / beta  # residual if this step were dropped
        if denom <= 1e-14 * col_scale:
            # new direction is dependent on the basis: R would be singular
            raise NumericalBreakdown(
                f"Arnoldi breakdown at step {j + 1} with residual {rel:.3e}"
            )
        cs[j] = h[j, j] / denom
        sn[j] = h[j + 1, j] / denom
        h[j, j] = denom
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        rel = abs(g[j + 1]) / beta
        trace.append((j + 1, rel))
        if rel <= tol:
            iters = j + 1
            break
        if subdiag <= 1e-14 * col_scale:
            raise NumericalBreakdown(
                f"Arnoldi breakdown at step {j + 1} with residual {rel:.3e}"
            )
        v.append(w / subdiag)
    m = min(iters, max_iter)
    y = sla.solve_triangular(h[:m, :m], g[:m])
    x = np.zeros(n)
    for i in range(m):
        x += y[i] * z[i]
    _write_trace(trace_path, trace)
    return x, iters


def _write_trace(path, rows) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        fh.write("iteration,residual\n")
        for k, rel in rows:
            fh.write(f"{k},{float(rel)!r}\n")
