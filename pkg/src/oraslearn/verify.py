"""Self-check suites: surrogate accuracy, sampling bounds, gradients.

Each suite returns a :class:`CheckResult` so the command line can print
one pass/fail row per property and persist them as CSV.  The checks are
statistical, so every one is seeded and deterministic.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import ortho_group

from oraslearn import autodiff as ad
from oraslearn import mggnn
from oraslearn.autodiff import value_of
from oraslearn.fem import assemble_poisson
from oraslearn.loss import LossConfig, brute_force_rho, lemma2_check, \
    learned_operator, loss_eval, sample_unit_sphere
from oraslearn.meshgen import random_convex_polygon, triangulate
from oraslearn.partition import extend_overlap, lloyd_aggregate


@dataclass
class CheckResult:
    """One named check with its verdict and a human-readable detail."""

    name: str
    passed: bool
    detail: str
    seconds: float


def spread_spectrum_matrix(n: int, rho: float, seed) -> np.ndarray:
    """Random dense matrix with spectral radius exactly ``rho``.

    Orthogonal conjugation of a real spectrum drawn from
    +-[rho/2, rho]: dense and rotation-invariant, while the dominant
    subspace stays well excited by finite sampling.  (A Ginibre draw
    rescaled to rho concentrates transient growth that the k-th-root
    norms inherit, which pushes the estimate outside tight tolerances.)
    """
    rng = np.random.default_rng(seed)
    q = ortho_group.rvs(n, random_state=rng)
    lam = rng.uniform(0.5 * rho, rho, size=n)
    lam *= rng.choice([-1.0, 1.0], size=n)
    lam[0] = rho
    return (q * lam) @ q.T


def surrogate_accuracy_suite(seed: int = 2000, count: int = 20,
                             tol: float = 0.06) -> CheckResult:
    """Spectral-radius estimates on dense matrices with known rho.

    ``count`` matrices alternate between rho 0.5 and 0.9; the softmax
    combination of k-th-root norms (K=30, m=500) must match rho within
    ``tol`` on every one.
    """
    t0 = time.perf_counter()
    cfg = LossConfig(K=30, m=500, gamma=0.0, variant="softmax_only")
    worst = 0.0
    for i in range(count):
        rho = 0.5 if i % 2 == 0 else 0.9
        t = spread_spectrum_matrix(30, rho, (seed, i))
        samples = sample_unit_sphere(30, cfg.m, (seed, i, 1))
        est = float(loss_eval(lambda x: t @ x, None, None, cfg,
                              samples=samples))
        worst = max(worst, abs(est - rho))
    return CheckResult(
        "surrogate-accuracy",
        worst <= tol,
        f"max |estimate - rho| = {worst:.4f} over {count} matrices "
        f"(tolerance {tol})",
        time.perf_counter() - t0,
    )


def sampling_bounds_suite(seed: int = 0, k: int = 25, m: int = 100,
                          xi: float = 0.1, trials: int = 200) -> CheckResult:
    """Upper/lower bracketing rates of the sampled k-th-root estimate.

    On a fixed dense matrix with rho = 0.9 the estimate must never
    exceed ||T^k||^(1/k) and must reach rho - xi in >= 99% of trials.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(30, 30))
    t *= 0.9 / brute_force_rho(t)
    upper, lower = lemma2_check(t, k=k, m=m, xi=xi, trials=trials,
                                seed=seed + 1)
    return CheckResult(
        "sampling-bounds",
        upper == 1.0 and lower >= 0.99,
        f"upper bound held in {upper:.1%}, lower bound within xi={xi} "
        f"in {lower:.1%} of {trials} trials",
        time.perf_counter() - t0,
    )


def _probe_problem(seed: int):
    poly = random_convex_polygon(5, seed=(seed, 0))
    mesh = triangulate(poly, 60, seed=(seed, 1))
    system = assemble_poisson(mesh)
    assign = lloyd_aggregate(system.A, 3, seed=(seed, 2))
    return system.A, extend_overlap(assign, system.A, 1)


def _surrogate_value(a, d, params, mcfg, lcfg, sample_seed) -> float:
    out = mggnn.forward(a, d, params, mcfg)
    t_apply, p = learned_operator(a, d, out, levels="two")
    return float(value_of(loss_eval(t_apply, p, a, lcfg, seed=sample_seed)))


def gradient_suite(seed: int = 0, coords: int = 200, tol: float = 1e-3,
                   step: float = 1e-5) -> CheckResult:
    """End-to-end loss gradient against central finite differences.

    The full model runs on a 60-node, 3-subdomain problem; ``coords``
    randomly sampled parameter coordinates must agree within ``tol``
    relative error for at least 99% of the sample.
    """
    t0 = time.perf_counter()
    a, d = _probe_problem(seed)
    mcfg = mggnn.ModelConfig()
    lcfg = LossConfig()
    rng = np.random.default_rng((seed, 3))
    params = {
        k: 0.1 * rng.standard_normal(v.shape)
        for k, v in mggnn.init_params(mcfg, seed=seed).items()
    }
    sample_seed = (seed, 4)

    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = mggnn.forward(a, d, leaves, mcfg)
    t_apply, p = learned_operator(a, d, out, levels="two")
    val = loss_eval(t_apply, p, a, lcfg, seed=sample_seed)
    ad.backward(tape, val)
    grads = {
        k: leaf.grad if leaf.grad is not None else np.zeros_like(params[k])
        for k, leaf in leaves.items()
    }
    tape.release()

    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=coords, replace=False)
    ok = 0
    worst = 0.0
    for flat in picks:
        which = np.searchsorted(offsets, flat, side="right") - 1
        name, pos = names[which], int(flat - offsets[which])
        base = params[name].ravel()[pos]
        vals = []
        for delta in (step, -step):
            params[name].ravel()[pos] = base + delta
            vals.append(_surrogate_value(a, d, params, mcfg, lcfg,
                                         sample_seed))
        params[name].ravel()[pos] = base
        fd = (vals[0] - vals[1]) / (2 * step)
        g = grads[name].ravel()[pos]
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
        worst = max(worst, rel)
        ok += rel <= tol
    return CheckResult(
        "gradient-check",
        ok >= 0.99 * coords,
        f"{ok}/{coords} coordinates within {tol} relative "
        f"(worst {worst:.2e})",
        time.perf_counter() - t0,
    )


def run_all(seed: int = 0) -> list:
    """Every suite in a fixed order."""
    return [
        surrogate_accuracy_suite(seed=seed + 2000),
        sampling_bounds_suite(seed=seed),
        gradient_suite(seed=seed),
    ]
