import numpy as np
import pytest

from oraslearn.ddm import (
    FactorizationFailure,
    ModeError,
    NumericalBreakdown,
    SchwarzOperator,
    apply_M,
    apply_M2,
    apply_T,
    build,
    coarse_correct,
    fgmres,
    stationary_solve,
)
from oraslearn.fem import assemble_poisson
from oraslearn.meshgen import random_convex_polygon, triangulate
from oraslearn.partition import (
    classical_P,
    extend_overlap,
    interface_sparsity,
    lloyd_aggregate,
)
from oraslearn.sparse import CsrMatrix
from tests.test_partition import path_matrix


def mesh_decomposition(n_target, seed, S=None, delta=1):
    poly = random_convex_polygon(6, seed=seed)
    mesh = triangulate(poly, target_nodes=n_target, seed=seed)
    system = assemble_poisson(mesh)
    n = system.A.n_rows
    S = S or max(2, round(n / 25))
    assign = lloyd_aggregate(system.A, S, seed=seed)
    return system.A, extend_overlap(assign, system.A, delta=delta)


def dense_fine_preconditioner(a, d, L=None):
    """Explicit dense sum_i R̃_i^T (A_i + L_i)^{-1} R_i."""
    dense = a.toarray()
    n = d.n
    m = np.zeros((n, n))
    for i in range(d.S):
        dofs = d.overlap_sets[i]
        k = dofs.shape[0]
        r = np.zeros((k, n))
        r[np.arange(k), dofs] = 1.0
        rt = r.copy()
        rt[d.assign[dofs] != i] = 0.0
        block = r @ dense @ r.T
        if L is not None and L[i] is not None:
            block = block + L[i].toarray()
        m += rt.T @ np.linalg.inv(block) @ r
    return m


def dense_coarse(a, p):
    dense = a.toarray()
    pd = p.toarray()
    return pd @ np.linalg.inv(pd.T @ dense @ pd) @ pd.T


def dense_T(a, d, L=None, P=None, levels="two"):
    dense = a.toarray()
    n = d.n
    t = np.eye(n) - dense_fine_preconditioner(a, d, L) @ dense
    if levels == "two":
        p = P if P is not None else classical_P(d)
        t = (np.eye(n) - dense_coarse(a, p) @ dense) @ t
    return t


def single_block_operator(n=9):
    a = path_matrix(n)
    d = extend_overlap(np.zeros(n, dtype=np.int64), a, delta=0)
    return a, d


def test_exact_subdomain_solve():
    a, d = single_block_operator()
    op = build(a, d, levels="one")
    rng = np.random.default_rng(0)
    x = rng.normal(size=a.n_rows)
    assert np.allclose(apply_M(op, x), np.linalg.solve(a.toarray(), x), atol=1e-12)
    t = apply_T(op, x)
    assert np.linalg.norm(t) <= 1e-10 * np.linalg.norm(x)


def test_apply_m_matches_dense_oracle():
    a, d = mesh_decomposition(50, seed=0)
    op = build(a, d)
    m = dense_fine_preconditioner(a, d)
    rng = np.random.default_rng(1)
    for _ in range(3):
        x = rng.normal(size=d.n)
        assert np.allclose(apply_M(op, x), m @ x, rtol=1e-12, atol=1e-12)


def test_apply_m_linear():
    a, d = mesh_decomposition(60, seed=1)
    op = build(a, d)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(2, d.n))
    lhs = apply_M(op, 2.5 * x - 1.25 * y)
    rhs = 2.5 * apply_M(op, x) - 1.25 * apply_M(op, y)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_coarse_correct_orthogonal_input():
    a, d = mesh_decomposition(50, seed=2)
    op = build(a, d)
    p = op.P.toarray()
    rng = np.random.default_rng(3)
    x = rng.normal(size=d.n)
    x = x - p @ np.linalg.lstsq(p, x, rcond=None)[0]
    assert np.abs(p.T @ x).max() < 1e-10
    assert np.abs(coarse_correct(op, x)).max() < 1e-9


def test_coarse_correct_single_column():
    a, d = single_block_operator(7)
    op = build(a, d, levels="two")
    rng = np.random.default_rng(4)
    x = rng.normal(size=7)
    ones = np.ones(7)
    expected = (ones @ x) / (ones @ a.toarray() @ ones) * ones
    assert np.allclose(coarse_correct(op, x), expected, atol=1e-13)


def test_coarse_projection_idempotent():
    a, d = mesh_decomposition(50, seed=3)
    op = build(a, d)
    c = dense_coarse(a, op.P)
    dense = a.toarray()
    assert np.abs(c @ dense @ c - c).max() < 1e-10


def test_coarse_correct_mode_error():
    a, d = single_block_operator()
    op = build(a, d, levels="one")
    with pytest.raises(ModeError):
        coarse_correct(op, np.ones(a.n_rows))


def test_apply_t_matches_dense_oracle():
    a, d = mesh_decomposition(50, seed=4)
    for levels in ("one", "two"):
        op = build(a, d, levels=levels)
        t = dense_T(a, d, levels=levels)
        rng = np.random.default_rng(5)
        for _ in range(3):
            x = rng.normal(size=d.n)
            got = apply_T(op, x)
            want = t @ x
            assert np.linalg.norm(got - want) <= 1e-10 * np.linalg.norm(x)


def test_apply_t_with_interface_values_matches_dense_oracle():
    a, d = mesh_decomposition(50, seed=5)
    rng = np.random.default_rng(6)
    patterns = interface_sparsity(d)
    L = []
    for i, pat in enumerate(patterns):
        k = d.overlap_sets[i].shape[0]
        vals = 0.3 * rng.normal(size=pat.size)
        L.append(CsrMatrix.from_coo(pat.rows, pat.cols, vals, (k, k)))
    op = build(a, d, L=L)
    t = dense_T(a, d, L=L)
    x = rng.normal(size=d.n)
    assert np.linalg.norm(apply_T(op, x) - t @ x) <= 1e-10 * np.linalg.norm(x)


def test_m2_equivalence_with_error_propagation():
    a, d = mesh_decomposition(60, seed=6)
    op = build(a, d)
    rng = np.random.default_rng(7)
    x = rng.normal(size=d.n)
    lhs = x - apply_M2(op, a.matvec(x))
    assert np.linalg.norm(lhs - apply_T(op, x)) <= 1e-12 * np.linalg.norm(x)


def test_interface_values_change_subdomain_matrix():
    a = path_matrix(4)
    d = extend_overlap(np.array([0, 0, 1, 1]), a, delta=1)
    patterns = interface_sparsity(d)
    L = []
    for i, pat in enumerate(patterns):
        k = d.overlap_sets[i].shape[0]
        diag = pat.rows == pat.cols
        L.append(
            CsrMatrix.from_coo(
                pat.rows[diag], pat.cols[diag], np.ones(diag.sum()), (k, k)
            )
        )
    plain = build(a, d)
    shifted = build(a, d, L=L)
    x = np.ones(4)
    assert not np.allclose(apply_M(plain, x), apply_M(shifted, x))
    want = dense_fine_preconditioner(a, d, L=L) @ x
    assert np.allclose(apply_M(shifted, x), want, atol=1e-12)


def test_build_rejects_out_of_pattern_values():
    a = path_matrix(6)
    d = extend_overlap(np.array([0, 0, 0, 1, 1, 1]), a, delta=1)
    k = d.overlap_sets[0].shape[0]
    bad = CsrMatrix.from_coo(np.array([0]), np.array([0]), np.ones(1), (k, k))
    with pytest.raises(ValueError):
        build(a, d, L=[bad, None])


def test_build_singular_subdomain_raises():
    a = path_matrix(4)
    d = extend_overlap(np.array([0, 0, 1, 1]), a, delta=1)
    # subdomain 0 covers {0,1,2} with interface {2}; A_0 + c*e22 is
    # singular at c = -4/3 (det = 4 + 3c by cofactor expansion)
    k = d.overlap_sets[0].shape[0]
    l0 = CsrMatrix.from_coo(
        np.array([2]), np.array([2]), np.array([-4.0 / 3.0]), (k, k)
    )
    with pytest.raises(FactorizationFailure) as info:
        build(a, d, L=[l0, None])
    assert info.value.subdomain == 0


def test_build_singular_coarse_raises():
    a, d = mesh_decomposition(50, seed=7)
    p = classical_P(d)
    zero_p = p.with_values(np.zeros(p.nnz))
    with pytest.raises(FactorizationFailure):
        build(a, d, P=zero_p)


def test_two_level_spectral_radius_below_one():
    a, d = mesh_decomposition(900, seed=8, S=9)
    t = dense_T(a, d)
    rho = np.abs(np.linalg.eigvals(t)).max()
    assert rho < 1.0


def test_stationary_exact_preconditioner_one_iteration():
    a, d = single_block_operator()
    op = build(a, d, levels="one")
    rng = np.random.default_rng(8)
    b = a.matvec(rng.normal(size=a.n_rows))
    x, iters = stationary_solve(op, b)
    assert iters == 1
    assert np.linalg.norm(b - a.matvec(x)) <= 1e-8 * np.linalg.norm(b)


def test_stationary_iterations_monotone_in_tol():
    a, d = mesh_decomposition(150, seed=9)
    op = build(a, d)
    rng = np.random.default_rng(9)
    b = a.matvec(rng.normal(size=d.n))
    _, tight = stationary_solve(op, b, tol=1e-8)
    _, loose = stationary_solve(op, b, tol=1e-4)
    assert tight <= 500
    assert loose <= tight


def test_stationary_zero_rhs():
    a, d = single_block_operator()
    op = build(a, d)
    x, iters = stationary_solve(op, np.zeros(a.n_rows))
    assert iters == 0
    assert np.all(x == 0)


def test_fgmres_exact_preconditioner_one_iteration():
    a, d = single_block_operator()
    op = build(a, d, levels="one")
    rng = np.random.default_rng(10)
    b = rng.normal(size=a.n_rows)
    x, iters = fgmres(op, b)
    assert iters == 1
    assert np.linalg.norm(b - a.matvec(x)) <= 1e-8 * np.linalg.norm(b)


def dense_arnoldi_iterations(dense, b, tol):
    """Smallest Krylov dimension whose least-squares residual meets tol."""
    bnorm = np.linalg.norm(b)
    basis = [b / bnorm]
    for m in range(1, dense.shape[0] + 1):
        k = np.column_stack(basis)
        y, *_ = np.linalg.lstsq(dense @ k, b, rcond=None)
        if np.linalg.norm(b - dense @ (k @ y)) <= tol * bnorm:
            return m
        nxt = dense @ basis[-1]
        basis.append(nxt / np.linalg.norm(nxt))
    return dense.shape[0] + 1


def test_fgmres_unpreconditioned_matches_dense_arnoldi():
    a, d = mesh_decomposition(30, seed=10)
    op = build(a, d)
    rng = np.random.default_rng(11)
    b = rng.normal(size=d.n)
    x, iters = fgmres(op, b, tol=1e-8, precondition=False)
    assert iters == dense_arnoldi_iterations(a.toarray(), b, tol=1e-8)
    assert np.linalg.norm(b - a.matvec(x)) <= 1e-8 * np.linalg.norm(b)


def test_fgmres_preconditioning_helps():
    rng = np.random.default_rng(12)
    for seed in range(3):
        a, d = mesh_decomposition(120, seed=13 + seed)
        op = build(a, d)
        b = rng.normal(size=d.n)
        _, plain = fgmres(op, b, tol=1e-8, precondition=False)
        _, prec = fgmres(op, b, tol=1e-8)
        assert prec <= plain


def test_fgmres_breakdown_on_inconsistent_system():
    singular = CsrMatrix.from_coo(
        np.array([0, 1, 2]), np.array([0, 1, 2]), np.array([1.0, 1.0, 0.0]), (3, 3)
    )
    op = SchwarzOperator(
        A=singular,
        decomposition=None,
        subdomain_factors=None,
        L=None,
        P=None,
        coarse_factor=None,
        levels="one",
    )
    with pytest.raises(NumericalBreakdown):
        fgmres(op, np.array([1.0, 1.0, 1.0]), tol=1e-8, precondition=False)


def test_classical_and_perturbed_paths_agree_for_zero_values():
    a, d = mesh_decomposition(60, seed=16)
    patterns = interface_sparsity(d)
    zeros = []
    for i, pat in enumerate(patterns):
        k = d.overlap_sets[i].shape[0]
        zeros.append(
            CsrMatrix.from_coo(pat.rows, pat.cols, np.zeros(pat.size), (k, k))
        )
    p = classical_P(d)
    plain = build(a, d)
    valued = build(a, d, L=zeros, P=p)
    x = np.random.default_rng(17).normal(size=d.n)
    assert np.array_equal(apply_T(plain, x), apply_T(valued, x))


def test_solver_trace_csv(tmp_path):
    a, d = mesh_decomposition(80, seed=18)
    op = build(a, d)
    b = a.matvec(np.random.default_rng(19).normal(size=d.n))
    path = tmp_path / "trace.csv"
    _, iters = stationary_solve(op, b, trace_path=path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iteration,residual"
    assert len(lines) == iters + 1
    last = float(lines[-1].split(",")[1])
    assert last <= 1e-8
