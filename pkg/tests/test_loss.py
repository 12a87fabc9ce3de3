"""Tests for the spectral-radius surrogate loss and its oracles."""

import numpy as np
import pytest

from oraslearn import autodiff as ad
from oraslearn import mggnn
from oraslearn.autodiff import value_of
from oraslearn.ddm import build, apply_T
from oraslearn.fem import SizeLimitError, assemble_poisson
from oraslearn.loss import (
    InterpOperator,
    LossConfig,
    NumericalOverflow,
    brute_force_rho,
    learned_operator,
    lemma2_check,
    loss_eval,
    sample_unit_sphere,
    sigma_max,
)
from oraslearn.meshgen import random_convex_polygon, triangulate
from oraslearn.partition import SparsityPattern, extend_overlap, lloyd_aggregate
from oraslearn.sparse import CsrMatrix


def eye_csr(n):
    return CsrMatrix.eye(n)


def dense_apply(t):
    return lambda x: ad.matmul(t, x) if isinstance(t, ad.Var) else t @ x


def small_problem(seed=3, nodes=250, S=4, delta=1):
    poly = random_convex_polygon(6, seed=seed)
    mesh = triangulate(poly, nodes, seed=seed)
    a = assemble_poisson(mesh).A
    assign = lloyd_aggregate(a, S, seed=0)
    return a, extend_overlap(assign, a, delta)


# ---------------------------------------------------------------------------
# config and sampling


def test_config_validation():
    LossConfig()
    with pytest.raises(ValueError):
        LossConfig(K=0)
    with pytest.raises(ValueError):
        LossConfig(m=0)
    with pytest.raises(ValueError):
        LossConfig(gamma=-0.1)
    with pytest.raises(ValueError):
        LossConfig(variant="mean_only")


def test_sample_unit_sphere_columns_have_unit_norm():
    x = sample_unit_sphere(7, 40, seed=0)
    assert x.shape == (7, 40)
    assert np.abs(np.linalg.norm(x, axis=0) - 1.0).max() < 1e-14


def test_sample_unit_sphere_dimension_one():
    x = sample_unit_sphere(1, 50, seed=1)
    assert np.all(np.abs(np.abs(x) - 1.0) < 1e-15)
    assert np.any(x > 0) and np.any(x < 0)


def test_sample_unit_sphere_mean_shrinks():
    m = 10000
    x = sample_unit_sphere(5, m, seed=2)
    assert np.linalg.norm(x.mean(axis=1)) <= 4.0 / np.sqrt(m)


def test_sample_unit_sphere_deterministic():
    assert np.array_equal(
        sample_unit_sphere(4, 9, seed=5), sample_unit_sphere(4, 9, seed=5)
    )


# ---------------------------------------------------------------------------
# loss_eval on dense propagators


def test_loss_zero_operator_is_zero():
    n = 6
    t = np.zeros((n, n))
    cfg = LossConfig(K=4, m=8, gamma=0.0, variant="softmax_only")
    val = loss_eval(dense_apply(t), None, eye_csr(n), cfg, seed=0)
    assert float(value_of(val)) == 0.0


def test_loss_scaled_identity_recovers_factor():
    n = 5
    c = 0.37
    t = c * np.eye(n)
    cfg = LossConfig(K=6, m=10, gamma=0.0, variant="softmax_only")
    val = float(value_of(loss_eval(dense_apply(t), None, eye_csr(n), cfg)))
    assert abs(val - c) < 1e-12


def test_loss_estimates_spectral_radius():
    # symmetric instances: orthogonal eigenvectors keep ||T^k||^(1/k)
    # close to rho at K=30, the regime the estimate is designed for
    cfg = LossConfig(K=30, m=300, gamma=0.0, variant="softmax_only")
    for seed in (0, 2, 3):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(20, 20))
        t = (g + g.T) / 2
        t *= 0.8 / brute_force_rho(t)
        val = float(value_of(loss_eval(dense_apply(t), None, eye_csr(20), cfg,
                                       seed=100 + seed)))
        assert abs(val - 0.8) <= 0.05


def test_loss_is_convex_combination_of_z():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(8, 8)) * 0.3
    cfg = LossConfig(K=5, m=12, gamma=0.0, variant="softmax_only")
    x = sample_unit_sphere(8, cfg.m, seed=7)
    val = float(value_of(loss_eval(dense_apply(t), None, eye_csr(8), cfg,
                                   samples=x.copy())))
    xs = x.copy()
    zs = []
    for k in range(1, cfg.K + 1):
        xs = t @ xs
        zs.append(np.linalg.norm(xs, axis=0).max() ** (1.0 / k))
    assert min(zs) - 1e-12 <= val <= max(zs) + 1e-12


def test_loss_invariant_to_sample_order():
    rng = np.random.default_rng(4)
    t = rng.normal(size=(7, 7)) * 0.4
    x = sample_unit_sphere(7, 15, seed=8)
    cfg = LossConfig(K=6, m=15, gamma=0.0, variant="softmax_only")
    v1 = float(value_of(loss_eval(dense_apply(t), None, eye_csr(7), cfg,
                                  samples=x)))
    perm = rng.permutation(15)
    v2 = float(value_of(loss_eval(dense_apply(t), None, eye_csr(7), cfg,
                                  samples=x[:, perm])))
    assert v1 == v2


def test_loss_max_only_uses_final_norms():
    rng = np.random.default_rng(5)
    t = rng.normal(size=(6, 6)) * 0.5
    x = sample_unit_sphere(6, 9, seed=9)
    cfg = LossConfig(K=4, m=9, gamma=0.0, variant="max_only")
    val = float(value_of(loss_eval(dense_apply(t), None, eye_csr(6), cfg,
                                   samples=x.copy())))
    expect = np.linalg.norm(np.linalg.matrix_power(t, 4) @ x, axis=0).max()
    assert abs(val - expect) < 1e-12


def test_loss_trace_term_added():
    rng = np.random.default_rng(6)
    n, S = 8, 3
    t = rng.normal(size=(n, n)) * 0.3
    rows = np.repeat(np.arange(n), S)
    cols = np.tile(np.arange(S), n)
    vals = rng.normal(size=n * S)
    a = CsrMatrix.eye(n)
    p = InterpOperator(vals, SparsityPattern(rows, cols), (n, S))
    x = sample_unit_sphere(n, 10, seed=10)
    base = LossConfig(K=3, m=10, gamma=0.0, variant="softmax_only")
    with_tr = LossConfig(K=3, m=10, gamma=0.05, variant="softmax_trace")
    v0 = float(value_of(loss_eval(dense_apply(t), None, a, base, samples=x)))
    v1 = float(value_of(loss_eval(dense_apply(t), p, a, with_tr, samples=x)))
    pd = np.zeros((n, S))
    pd[rows, cols] = vals
    expect = 0.05 * np.trace(pd.T @ a.toarray() @ pd)
    assert abs((v1 - v0) - expect) < 1e-12


def test_loss_trace_variant_requires_p():
    cfg = LossConfig(K=2, m=3, gamma=0.01, variant="max_trace")
    t = 0.5 * np.eye(4)
    with pytest.raises(ValueError):
        loss_eval(dense_apply(t), None, eye_csr(4), cfg)


def test_loss_overflow_reports_offending_power():
    n = 4
    t = 1e40 * np.eye(n)
    cfg = LossConfig(K=10, m=5, gamma=0.0, variant="softmax_only")
    with np.errstate(over="ignore"), pytest.raises(NumericalOverflow) as exc:
        loss_eval(dense_apply(t), None, eye_csr(n), cfg, seed=0)
    assert exc.value.k == 8
    assert "k=8" in str(exc.value)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    t0 = rng.normal(size=(10, 10)) * 0.25
    cfg = LossConfig(K=5, m=6, gamma=0.0, variant="softmax_only")
    x = sample_unit_sphere(10, cfg.m, seed=11)

    def build_loss(tape, leaves):
        (tv,) = leaves
        return loss_eval(dense_apply(tv), None, eye_csr(10), cfg,
                         samples=x.copy())

    errs = ad.gradcheck(build_loss, [t0], step=1e-6)
    assert float(np.max(errs)) < 1e-3


def test_max_only_gradients_vanish_with_k():
    rng = np.random.default_rng(14)
    t0 = rng.normal(size=(10, 10))
    t0 *= 0.7 / brute_force_rho(t0)
    x = sample_unit_sphere(10, 8, seed=12)
    norms = []
    for k in (5, 20, 80):
        cfg = LossConfig(K=k, m=8, gamma=0.0, variant="max_only")
        tape = ad.Tape()
        tv = tape.leaf(t0)
        val = loss_eval(dense_apply(tv), None, eye_csr(10), cfg,
                        samples=x.copy())
        ad.backward(tape, val)
        norms.append(float(np.linalg.norm(tv.grad)))
    assert norms[0] > norms[1] > norms[2]


# ---------------------------------------------------------------------------
# brute-force spectra


def test_rho_diagonal():
    assert brute_force_rho(np.diag([0.5, -0.9])) == pytest.approx(0.9)


def test_rho_vs_sigma_on_nilpotent():
    t = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert brute_force_rho(t) == pytest.approx(0.0, abs=1e-15)
    assert sigma_max(t) == pytest.approx(1.0)


def test_norm_roots_decrease_toward_rho():
    t = np.array([[0.5, 10.0], [0.0, 0.5]])
    rho = brute_force_rho(t)
    seq = [sigma_max(np.linalg.matrix_power(t, k)) ** (1.0 / k)
           for k in range(1, 41)]
    assert np.all(np.diff(seq) < 1e-12)
    assert seq[0] > rho
    assert seq[-1] - rho < 0.2 * (seq[0] - rho)


def test_rho_size_limit():
    with pytest.raises(SizeLimitError):
        brute_force_rho(np.eye(2501))
    with pytest.raises(ValueError):
        brute_force_rho(np.zeros((3, 4)))


# ---------------------------------------------------------------------------
# lemma-2 sampling bounds


def test_lemma2_upper_bound_always_holds():
    rng = np.random.default_rng(15)
    for trial in range(3):
        t = rng.normal(size=(12, 12))
        upper, lower = lemma2_check(t, k=6, m=20, xi=np.inf, trials=50,
                                    seed=trial)
        assert upper == 1.0
        # an infinite slack makes the lower bound vacuous
        assert lower == 1.0


def test_lemma2_concentration():
    rng = np.random.default_rng(16)
    t = rng.normal(size=(30, 30))
    t *= 0.9 / brute_force_rho(t)
    upper, lower = lemma2_check(t, k=25, m=100, xi=0.1, trials=200, seed=0)
    assert upper == 1.0
    assert lower >= 0.99


def test_lemma2_rate_nondecreasing_in_m():
    rng = np.random.default_rng(17)
    t = rng.normal(size=(20, 20))
    t *= 0.85 / brute_force_rho(t)
    _, r1 = lemma2_check(t, k=12, m=1, xi=0.05, trials=300, seed=1)
    _, r2 = lemma2_check(t, k=12, m=100, xi=0.05, trials=300, seed=1)
    assert r2 >= r1


# ---------------------------------------------------------------------------
# learned operator bridge


def forward_output(a, d, config, params):
    return mggnn.forward(a, d, params, config)


def test_learned_operator_matches_solver_path():
    a, d = small_problem()
    config = mggnn.ModelConfig(hidden=8, layers=1)
    rng = np.random.default_rng(18)
    params = {k: rng.normal(scale=0.3, size=v.shape)
              for k, v in mggnn.init_params(config, 0).items()}
    out = forward_output(a, d, config, params)

    l_mats = []
    for pat, vals, dofs in zip(out.interface_patterns, out.interface_values,
                               d.overlap_sets):
        ni = dofs.shape[0]
        l_mats.append(CsrMatrix.from_coo(pat.rows, pat.cols,
                                         value_of(vals), (ni, ni)))
    p_mat = CsrMatrix.from_coo(out.interp_pattern.rows, out.interp_pattern.cols,
                               value_of(out.interp_values), (d.n, d.S))
    op = build(a, d, L=l_mats, P=p_mat, levels="two")

    t_apply, p = learned_operator(a, d, out, levels="two")
    x = np.random.default_rng(19).normal(size=(d.n, 4))
    got = t_apply(x)
    expect = np.stack([apply_T(op, x[:, j]) for j in range(4)], axis=1)
    assert np.abs(got - expect).max() < 1e-11

    op1 = build(a, d, L=l_mats, levels="one")
    t1, p1 = learned_operator(a, d, out, levels="one")
    assert p1 is None
    got1 = t1(x)
    expect1 = np.stack([apply_T(op1, x[:, j]) for j in range(4)], axis=1)
    assert np.abs(got1 - expect1).max() < 1e-11


def test_learned_operator_zero_init_equals_classical():
    a, d = small_problem()
    config = mggnn.ModelConfig(hidden=8, layers=1)
    params = mggnn.init_params(config, seed=0)
    out = forward_output(a, d, config, params)
    t_apply, _ = learned_operator(a, d, out, levels="two")
    op = build(a, d, levels="two")
    x = np.random.default_rng(20).normal(size=(d.n, 3))
    got = t_apply(x)
    expect = np.stack([apply_T(op, x[:, j]) for j in range(3)], axis=1)
    assert np.abs(got - expect).max() < 1e-11


def test_loss_backward_through_learned_operator():
    a, d = small_problem(nodes=150, S=3)
    config = mggnn.ModelConfig(hidden=4, layers=1, hops=2)
    base = mggnn.init_params(config, seed=1)
    rng = np.random.default_rng(21)
    base = {k: rng.normal(scale=0.3, size=v.shape) for k, v in base.items()}
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in base.items()}
    out = mggnn.forward(a, d, leaves, config)
    t_apply, p = learned_operator(a, d, out, levels="two")
    cfg = LossConfig(K=3, m=5, gamma=1e-2, variant="softmax_trace")
    val = loss_eval(t_apply, p, a, cfg, seed=0)
    assert np.isfinite(float(value_of(val)))
    ad.backward(tape, val)
    gnorm = sum(float(np.abs(l.grad).sum()) for l in leaves.values())
    assert np.isfinite(gnorm) and gnorm > 0.0


def test_learned_operator_rejects_unknown_levels():
    a, d = small_problem(nodes=120, S=2)
    config = mggnn.ModelConfig(hidden=4, layers=1)
    params = mggnn.init_params(config, 0)
    out = forward_output(a, d, config, params)
    with pytest.raises(ValueError):
        learned_operator(a, d, out, levels="three")
