"""Stochastic spectral-radius surrogate loss and brute-force spectra.

The training objective estimates the asymptotic contraction factor of
the stationary error propagator T by pushing random unit vectors
through K applications, reading off Z_k = max_j ||T^k x_j||^(1/k), and
combining the K estimates with a softmax inner product.  A trace
penalty on the coarse operator keeps the interpolation bounded.  Dense
eigensolve oracles back the sampling-based estimates for validation.
"""

from dataclasses import dataclass

import numpy as np

from oraslearn import autodiff as ad
from oraslearn.autodiff import value_of
from oraslearn.fem import SizeLimitError
from oraslearn.mggnn import ForwardOutput
from oraslearn.partition import Decomposition, SparsityPattern
from oraslearn.sparse import CsrMatrix

VARIANTS = ("softmax_trace", "softmax_only", "max_only", "max_trace")


class NumericalOverflow(ArithmeticError):
    """A power-iteration intermediate left the finite range."""

    def __init__(self, message, k=None):
        super().__init__(message)
        self.k = k


@dataclass
class LossConfig:
    """Surrogate-loss hyperparameters."""

    K: int = 10
    m: int = 100
    gamma: float = 1e-2
    variant: str = "softmax_trace"

    def __post_init__(self):
        if self.K < 1 or self.m < 1:
            raise ValueError("K and m must be at least 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant: {self.variant}")


@dataclass
class InterpOperator:
    """Interpolation values on a fixed fine-by-coarse sparsity."""

    values: object
    pattern: SparsityPattern
    shape: tuple


def sample_unit_sphere(n: int, m: int, seed: int) -> np.ndarray:
    """m independent points uniform on the unit sphere in R^n, as columns."""
    if n < 1:
        raise ValueError("dimension must be positive")
    x = np.random.default_rng(seed).standard_normal((n, m))
    return x / np.linalg.norm(x, axis=0)


def loss_eval(t_apply, p, a: CsrMatrix, cfg: LossConfig, seed: int = 0,
              samples=None):
    """Surrogate loss for the error propagator given by ``t_apply``.

    ``t_apply`` maps an (n, m) block of vectors through one application
    of T on the tape; ``p`` is the :class:`InterpOperator` feeding the
    trace penalty (may be None when the variant has no trace term or
    gamma is zero).  Returns a scalar ``Var`` when any input is on a
    tape, else a plain scalar.
    """
    x = samples if samples is not None else sample_unit_sphere(
        a.n_rows, cfg.m, seed
    )
    z_parts = []
    y_last = None
    for k in range(1, cfg.K + 1):
        x = t_apply(x)
        if not np.isfinite(value_of(x)).all():
            raise NumericalOverflow(
                f"non-finite iterate at power k={k}", k=k
            )
        if cfg.variant in ("softmax_trace", "softmax_only"):
            norms = ad.col_norm2(x)
            z_parts.append(ad.pow_scalar(ad.max_over_set(norms), 1.0 / k))
        elif k == cfg.K:
            y_last = ad.col_norm2(x)

    if cfg.variant in ("softmax_trace", "softmax_only"):
        z = ad.stack_scalars(z_parts)
        total = ad.dot(ad.row_softmax(z), z)
    else:
        total = ad.max_over_set(y_last)

    if cfg.variant in ("softmax_trace", "max_trace") and cfg.gamma > 0.0:
        if p is None:
            raise ValueError("trace variant requires the interpolation operator")
        tr = ad.trace_quadratic(
            p.values, p.pattern.rows, p.pattern.cols, p.shape, a.to_scipy()
        )
        total = ad.add(total, ad.scale(tr, cfg.gamma))
    return total


def learned_operator(a: CsrMatrix, d: Decomposition, out: ForwardOutput,
                     levels: str = "two"):
    """Tape-ready T application from network head outputs.

    Returns ``(t_apply, p)`` where ``t_apply`` applies
    T = (I - C A)(I - M A) (or the one-level I - M A) to an (n, m)
    block, keeping the interface values and interpolation weights on
    the tape, and ``p`` is the :class:`InterpOperator` (None for one
    level).  Subdomain systems are factored densely per application.
    """
    if levels not in ("one", "two"):
        raise ValueError(f"unknown level count: {levels}")
    n = a.n_rows
    a_sp = a.to_scipy()

    blocks = []
    for i in range(d.S):
        dofs = d.overlap_sets[i]
        base = a_sp[dofs][:, dofs].toarray()
        own_local = np.flatnonzero(d.assign[dofs] == i)
        pat = out.interface_patterns[i]
        vals = out.interface_values[i]
        blocks.append((base, pat, vals, own_local, dofs[own_local], dofs))

    own_cat = np.concatenate([b[4] for b in blocks])

    def m_apply(v):
        parts = []
        for base, pat, vals, own_local, _, dofs in blocks:
            tilde = ad.dense_from_pattern(base, vals, pat.rows, pat.cols)
            z = ad.solve_dense(tilde, ad.gather_rows(v, dofs))
            parts.append(ad.gather_rows(z, own_local))
        return ad.scatter_rows(ad.concat(parts, axis=0), own_cat, n)

    if levels == "one":
        def t_apply(x):
            return ad.sub(x, m_apply(ad.spmm_const(a_sp, x)))

        return t_apply, None

    pat = out.interp_pattern
    shape = (n, d.S)
    p = InterpOperator(out.interp_values, pat, shape)
    pap = ad.pap_dense(p.values, pat.rows, pat.cols, shape, a_sp)

    def c_apply(v):
        u = ad.spmm_pattern(p.values, pat.rows, pat.cols, shape, v,
                            transpose=True)
        w = ad.solve_dense(pap, u)
        return ad.spmm_pattern(p.values, pat.rows, pat.cols, shape, w)

    def t_apply(x):
        y = ad.sub(x, m_apply(ad.spmm_const(a_sp, x)))
        return ad.sub(y, c_apply(ad.spmm_const(a_sp, y)))

    return t_apply, p


def brute_force_rho(t_dense: np.ndarray) -> float:
    """Spectral radius by dense eigensolve; guarded by a size limit."""
    t = np.asarray(t_dense, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError("expected a square matrix")
    if t.shape[0] > 2500:
        raise SizeLimitError(
            f"dense eigensolve limited to 2500 rows, got {t.shape[0]}"
        )
    return float(np.abs(np.linalg.eigvals(t)).max())


def sigma_max(t_dense: np.ndarray) -> float:
    """Largest singular value (operator 2-norm) by dense SVD."""
    t = np.asarray(t_dense, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError("expected a matrix")
    if max(t.shape) > 2500:
        raise SizeLimitError(
            f"dense SVD limited to 2500 rows, got {max(t.shape)}"
        )
    return float(np.linalg.svd(t, compute_uv=False)[0])


def lemma2_check(t_dense: np.ndarray, k: int, m: int, xi: float,
                 trials: int, seed: int = 0):
    """Per-bound trial pass rates for the sampled k-th-root estimate.

    Each trial draws m unit vectors and forms Z = max_j ||T^k x_j||^(1/k).
    Returns (upper, lower): the fraction of trials with
    Z <= ||T^k||^(1/k) and the fraction with rho(T) - xi <= Z.
    """
    t = np.asarray(t_dense, dtype=np.float64)
    tk = np.linalg.matrix_power(t, k)
    upper_bound = sigma_max(tk) ** (1.0 / k)
    rho = brute_force_rho(t)
    upper = lower = 0
    for trial in range(trials):
        x = sample_unit_sphere(t.shape[0], m, seed + trial)
        z = np.linalg.norm(tk @ x, axis=0).max() ** (1.0 / k)
        upper += z <= upper_bound
        lower += rho - xi <= z
    return upper / trials, lower / trials
