"""Tape-based reverse-mode differentiation.

A :class:`Tape` records operations in creation order (a Wengert list);
:func:`backward` walks the list in reverse and accumulates adjoints into
every reachable leaf.  Operations accept either :class:`Var` arguments or
plain numpy arrays; arrays are treated as constants, and an operation
whose inputs are all constants returns a plain array, so the same model
code runs in a gradient-free mode with no tape at all.

The op set is exactly what the spectral-surrogate loss and the network
need: dense linear algebra including LU solves (factorizations are cached
on the node and reused transposed in the backward pass), fixed-pattern
sparse products whose values are differentiable, gather/scatter, and a
few reductions.  Everything is float64.
"""

import numpy as np
import scipy.linalg as sla

from .ddm import FactorizationFailure


class Tape:
    """Append-only operation record; node inputs always precede the node."""

    def __init__(self):
        self.nodes = []

    def leaf(self, value) -> "Var":
        return Var(self, np.asarray(value, dtype=np.float64))

    def release(self) -> None:
        """Drop every recorded node, its adjoint, and its closure.

        Tape and Var reference each other, so a finished graph is only
        reclaimed by the cycle collector; with megabyte node buffers
        that lag dominates memory.  The tape is unusable afterwards.
        """
        for node in self.nodes:
            node.tape = None
            node.grad = None
            node._backward = None
        self.nodes.clear()


class Var:
    """A tape node: primal value plus an adjoint slot filled by backward."""

    __slots__ = ("tape", "value", "grad", "_backward")

    def __init__(self, tape: Tape, value: np.ndarray, backward=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self._backward = backward
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _accum(x, g):
    if not isinstance(x, Var):
        return
    if x.grad is None:
        x.grad = np.zeros_like(x.value)
    x.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> None:
    """Populate .grad on every node that the scalar ``loss`` depends on."""
    if loss.value.size != 1:
        raise ValueError("backward requires a scalar loss")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, _unbroadcast(g, av.shape))
        _accum(b, _unbroadcast(g, bv.shape))

    return Var(tape, out, bw)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, _unbroadcast(g, av.shape))
        _accum(b, _unbroadcast(-g, bv.shape))

    return Var(tape, out, bw)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, _unbroadcast(g * bv, av.shape))
        _accum(b, _unbroadcast(g * av, bv.shape))

    return Var(tape, out, bw)


def scale(a, c: float):
    av = value_of(a)
    out = c * av
    tape = _tape_of(a)
    if tape is None:
        return out
    return Var(tape, out, lambda g: _accum(a, c * g))


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    mask = av > 0  # zero subgradient at exactly zero
    return Var(tape, out, lambda g: _accum(a, g * mask))


def pow_scalar(a, p: float):
    av = value_of(a)
    out = av**p
    tape = _tape_of(a)
    if tape is None:
        return out
    return Var(tape, out, lambda g: _accum(a, g * p * av ** (p - 1.0)))


def reciprocal(a):
    """1/x elementwise; unlike pow_scalar it is safe for negative inputs."""
    av = value_of(a)
    out = 1.0 / av
    tape = _tape_of(a)
    if tape is None:
        return out
    return Var(tape, out, lambda g: _accum(a, -g * out * out))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(part, np.take(g, np.arange(lo, hi), axis=axis))

    return Var(tape, out, bw)


def stack_scalars(parts):
    vals = [value_of(p) for p in parts]
    out = np.array([float(v) for v in vals])
    tape = _tape_of(*parts)
    if tape is None:
        return out

    def bw(g):
        for i, part in enumerate(parts):
            _accum(part, np.asarray(g[i]))

    return Var(tape, out, bw)


def where_mask(mask: np.ndarray, a, b):
    """Select by a constant boolean mask; gradient flows to the taken side."""
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, _unbroadcast(g * mask, av.shape))
        _accum(b, _unbroadcast(g * ~mask, bv.shape))

    return Var(tape, out, bw)


def gather_rows(a, idx: np.ndarray):
    av = value_of(a)
    out = av[idx]
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        ga = np.zeros_like(av)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return Var(tape, out, bw)


def scatter_rows(a, idx: np.ndarray, n_rows: int):
    """Sum rows of ``a`` into a fresh (n_rows, ...) array at ``idx``."""
    av = value_of(a)
    out = np.zeros((n_rows,) + av.shape[1:])
    np.add.at(out, idx, av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return Var(tape, out, lambda g: _accum(a, g[idx]))


# ---------------------------------------------------------------------------
# dense linear algebra


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        if isinstance(a, Var):
            if av.ndim == 2 and bv.ndim == 2:
                _accum(a, g @ bv.T)
            elif av.ndim == 2 and bv.ndim == 1:
                _accum(a, np.outer(g, bv))
            elif av.ndim == 1 and bv.ndim == 2:
                _accum(a, g @ bv.T)
            else:
                _accum(a, g * bv)
        if isinstance(b, Var):
            if bv.ndim == 2 and av.ndim == 2:
                _accum(b, av.T @ g)
            elif bv.ndim == 2 and av.ndim == 1:
                _accum(b, np.outer(av, g))
            elif bv.ndim == 1 and av.ndim == 2:
                _accum(b, av.T @ g)
            else:
                _accum(b, g * av)

    return Var(tape, out, bw)


def dot(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.asarray(av.ravel() @ bv.ravel())
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return Var(tape, out, bw)


def norm2(a):
    av = value_of(a)
    out = np.asarray(np.linalg.norm(av))
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        n = float(out)
        _accum(a, (g / n) * av if n > 0 else np.zeros_like(av))

    return Var(tape, out, bw)


def col_norm2(a):
    """Euclidean norm of each column of a 2-d array."""
    av = value_of(a)
    out = np.sqrt((av * av).sum(axis=0))
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        _accum(a, av * (np.where(out > 0, g, 0.0) / safe))

    return Var(tape, out, bw)


def max_over_set(a):
    """Maximum entry; ties route the adjoint to the lowest flat index."""
    av = value_of(a)
    flat = av.ravel()
    k = int(np.argmax(flat))
    out = np.asarray(flat[k])
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        ga = np.zeros_like(av)
        ga.ravel()[k] = g
        _accum(a, ga)

    return Var(tape, out, bw)


def row_softmax(a):
    """Softmax along the last axis."""
    av = value_of(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - inner))

    return Var(tape, out, bw)


def solve_dense(a, b):
    """x = A^{-1} b via cached LU; b may be a vector or a matrix of columns.

    Backward: b_adj += A^{-T} g and A_adj -= (A^{-T} g) x^T.
    """
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ValueError("solve_dense needs a square matrix")
    if bv.shape[0] != av.shape[0]:
        raise ValueError("right-hand side rows do not match the matrix")
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = sla.lu_factor(av)
    diag = np.abs(np.diag(lu))
    if not np.all(np.isfinite(lu)) or diag.min() <= av.shape[
        0
    ] * np.finfo(np.float64).eps * diag.max():
        raise FactorizationFailure("solve_dense: singular matrix")
    x = sla.lu_solve((lu, piv), bv)
    tape = _tape_of(a, b)
    if tape is None:
        return x

    def bw(g):
        gb = sla.lu_solve((lu, piv), g, trans=1)
        _accum(b, gb)
        if isinstance(a, Var):
            if x.ndim == 1:
                _accum(a, -np.outer(gb, x))
            else:
                _accum(a, -(gb @ x.T))

    return Var(tape, x, bw)


def dense_from_pattern(base: np.ndarray, values, rows: np.ndarray, cols: np.ndarray):
    """Constant dense base plus differentiable values scattered at (rows, cols)."""
    vv = value_of(values)
    out = np.array(base, dtype=np.float64, copy=True)
    np.add.at(out, (rows, cols), vv)
    tape = _tape_of(values)
    if tape is None:
        return out
    return Var(tape, out, lambda g: _accum(values, g[rows, cols]))


# ---------------------------------------------------------------------------
# fixed-pattern sparse products


def spmm_const(a_sp, x):
    """Constant sparse matrix (scipy or CsrMatrix) times dense Var."""
    s = a_sp.to_scipy() if hasattr(a_sp, "to_scipy") else a_sp
    xv = value_of(x)
    out = s @ xv
    tape = _tape_of(x)
    if tape is None:
        return out
    return Var(tape, out, lambda g: _accum(x, s.T @ g))


def spmm_pattern(values, rows, cols, shape, x, transpose=False):
    """Sparse-times-dense where the sparse values are differentiable.

    The matrix is (rows, cols, values) with dense ``shape``; ``transpose``
    applies its transpose without re-indexing the value array.
    """
    vv, xv = value_of(values), value_of(x)
    r, c = (cols, rows) if transpose else (rows, cols)
    n_out = shape[1] if transpose else shape[0]
    if xv.ndim == 1:
        out = np.zeros(n_out)
        np.add.at(out, r, vv * xv[c])
    else:
        out = np.zeros((n_out, xv.shape[1]))
        np.add.at(out, r, vv[:, None] * xv[c])
    tape = _tape_of(values, x)
    if tape is None:
        return out

    def bw(g):
        if isinstance(values, Var):
            gv = g[r] * xv[c]
            _accum(values, gv if xv.ndim == 1 else gv.sum(axis=1))
        if isinstance(x, Var):
            gx = np.zeros_like(xv)
            if xv.ndim == 1:
                np.add.at(gx, c, vv * g[r])
            else:
                np.add.at(gx, c, vv[:, None] * g[r])
            _accum(x, gx)

    return Var(tape, out, bw)


def _pattern_dense(vv, rows, cols, shape):
    d = np.zeros(shape)
    d[rows, cols] = vv
    return d


def pap_dense(values, rows, cols, shape, a_sp):
    """Dense P^T A P for a fixed-pattern P with differentiable values."""
    s = a_sp.to_scipy() if hasattr(a_sp, "to_scipy") else a_sp
    vv = value_of(values)
    pd = _pattern_dense(vv, rows, cols, shape)
    ap = s @ pd
    out = pd.T @ ap
    tape = _tape_of(values)
    if tape is None:
        return out

    def bw(g):
        w = s @ (pd @ g.T) + s.T @ (pd @ g)
        _accum(values, w[rows, cols])

    return Var(tape, out, bw)


def trace_quadratic(values, rows, cols, shape, a_sp):
    """tr(P^T A P) for a fixed-pattern P with differentiable values."""
    s = a_sp.to_scipy() if hasattr(a_sp, "to_scipy") else a_sp
    vv = value_of(values)
    pd = _pattern_dense(vv, rows, cols, shape)
    ap = s @ pd
    out = np.asarray((vv * ap[rows, cols]).sum())
    tape = _tape_of(values)
    if tape is None:
        return out

    def bw(g):
        w = ap + s.T @ pd
        _accum(values, g * w[rows, cols])

    return Var(tape, out, bw)


# ---------------------------------------------------------------------------
# finite-difference harness


def gradcheck(build, arrays, step=1e-5, floor=1e-8) -> np.ndarray:
    """Relative error of tape adjoints against central differences.

    ``build(tape, vars) -> Var`` constructs a scalar loss from leaf
    variables created from ``arrays``.  Returns one relative error per
    input coordinate, comparing the backward-pass gradient to the central
    finite difference with the given step.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    leaves = [tape.leaf(a.copy()) for a in arrays]
    loss = build(tape, leaves)
    backward(tape, loss)
    grads = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        for leaf in leaves
    ]

    def eval_at(mod_arrays):
        t = Tape()
        return float(build(t, [t.leaf(a) for a in mod_arrays]).value)

    errors = []
    for k, base in enumerate(arrays):
        flat = base.ravel()
        for j in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[k].ravel()[j] = flat[j] + step
            up = eval_at(bumped)
            bumped[k].ravel()[j] = flat[j] - step
            down = eval_at(bumped)
            fd = (up - down) / (2.0 * step)
            an = grads[k].ravel()[j]
            denom = max(abs(an), abs(fd), floor)
            errors.append(abs(an - fd) / denom)
    return np.array(errors)
