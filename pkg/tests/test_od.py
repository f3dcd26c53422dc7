import math

import numpy as np
import pytest
from scipy.optimize import minimize

from staircase_ldp.geo import EncodedLocation
from staircase_ldp.domain import LocationDomain
from staircase_ldp.mechanism import precompute, table_from_betas
from staircase_ldp.od import (
    OdModel,
    OdPair,
    build_joint_model,
    build_od_model,
    composed_epsilon,
    composed_epsilon_bruteforce,
    estimate_od,
    expected_joint_model,
    lasso_fit,
    od_perturb,
    od_perturb_many,
    pair_table,
    select_lambda,
    sparse_od_truth,
)
from staircase_ldp.seeding import make_rng
from staircase_ldp.synthetic import random_domain, synthetic_domain


@pytest.fixture(scope="module")
def dom32():
    return synthetic_domain(32, 3)


def test_uniform_halves_give_uniform_pairs():
    dom = LocationDomain([EncodedLocation(3, v) for v in range(8)])
    t = table_from_betas(dom, np.array([[3, 0]] * 8), 1.0, 0.0)
    n = 80_000
    o, d = od_perturb_many(t, np.zeros(n, dtype=int), np.full(n, 7), make_rng(0))
    counts = np.bincount(o * 8 + d, minlength=64)
    assert abs(counts.mean() - n / 64) < 1e-9
    assert np.all(np.abs(counts - n / 64) < 5 * math.sqrt(n / 64))


def test_endpoint_keep_rates(dom32):
    t = precompute(dom32, 1.5)
    n = 100_000
    o, d = od_perturb_many(t, np.full(n, 4), np.full(n, 9), make_rng(1))
    for x, y in ((4, o), (9, d)):
        a = t.alphas[x, 0]
        assert abs(np.mean(y == x) - a) <= 3.5 * math.sqrt(a * (1 - a) / n)


def test_single_pair_perturb(dom32):
    t = precompute(dom32, 1.0)
    p = OdPair(dom32.locations[0], dom32.locations[1])
    assert od_perturb(t, p, 5) == od_perturb(t, p, 5)


@pytest.mark.parametrize("d,eps", [(8, 1.0), (16, 3.0), (32, 6.0)])
def test_composed_certificate(d, eps):
    dom = random_domain(d, 10, np.random.default_rng(d))
    half = precompute(dom, eps / 2)
    brute = composed_epsilon_bruteforce(half)
    assert brute <= eps + 1e-9
    assert composed_epsilon(half) == pytest.approx(brute, abs=1e-9)


def test_stacked_design_shape():
    po = np.zeros(5)
    pd = np.zeros(5)
    po[1] = pd[3] = 1.0
    m = build_od_model(5, po, pd)
    assert np.count_nonzero(m.y_vec) == 2 and m.y_vec.sum() == 2
    assert np.all(m.M.sum(axis=0) == 2)
    w = np.zeros(25)
    w[[3, 7, 18]] = [0.5, 0.3, 0.2]
    table = pair_table(m, w)
    assert np.allclose((m.M @ w)[:5], table.sum(axis=1))
    assert np.allclose((m.M @ w)[5:], table.sum(axis=0))


def test_exactly_identified_tiny_instance():
    m = build_od_model(2, [1.0, 0.0], [0.0, 1.0])
    fit = lasso_fit(m, 0.0, relative=False)
    assert np.allclose(pair_table(m, fit.w), [[0, 1], [0, 0]], atol=1e-9)


def test_zero_response_zero_weights():
    m = build_od_model(3, np.zeros(3), np.zeros(3))
    assert not lasso_fit(m, 0.1).w.any()


def test_lasso_matches_bound_constrained_oracle():
    rng = np.random.default_rng(7)
    M = rng.random((30, 12))
    y = M @ np.where(rng.random(12) < 0.4, rng.random(12), 0) + 0.01 * rng.standard_normal(30)
    lam = 0.05
    model = OdModel(M, y, np.stack([np.arange(12) // 4, np.arange(12) % 4], axis=1), 4)
    fit = lasso_fit(model, lam, tol=1e-12, relative=False)

    def f(w):
        r = y - M @ w
        return 0.5 * r @ r + lam * w.sum(), -(M.T @ r) + lam

    ref = minimize(f, np.zeros(12), jac=True, method="L-BFGS-B", bounds=[(0, None)] * 12, options={"ftol": 1e-15, "gtol": 1e-12})
    assert np.allclose(fit.raw, ref.x, atol=1e-6)


def test_objective_non_increasing_and_shrinkage(dom32):
    half = precompute(dom32, 1.5)
    truth = sparse_od_truth(32, 20, make_rng(0, 5))
    flat = make_rng(2).choice(32 * 32, size=20_000, p=truth.ravel())
    no, nd = od_perturb_many(half, flat // 32, flat % 32, make_rng(3))
    model = build_joint_model(half, no, nd)
    norms = []
    for lam in (1e-4, 1e-3, 1e-2, 1e-1):
        fit = lasso_fit(model, lam)
        assert np.all(np.diff(fit.objective) <= 1e-12 * np.maximum(1.0, np.abs(fit.objective[:-1])))
        norms.append(fit.raw.sum())
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("lam", [1e-4, 1e-3, 1e-2])
def test_noiseless_support_recovery(dom32, lam):
    half = precompute(dom32, 3.0)
    truth = sparse_od_truth(32, 20, make_rng(0, 5))
    model = expected_joint_model(half, truth, lam)
    est = pair_table(model, lasso_fit(model).w)
    assert np.array_equal(est > 0, truth > 0)


def test_estimate_and_lambda_grid(dom32):
    half = precompute(dom32, 3.0)
    truth = sparse_od_truth(32, 20, make_rng(0, 5))
    flat = make_rng(4).choice(32 * 32, size=50_000, p=truth.ravel())
    no, nd = od_perturb_many(half, flat // 32, flat % 32, make_rng(5))
    est = estimate_od(half, no, nd)
    assert abs(est.table.sum() - 1) < 1e-12 and np.all(est.table >= 0)
    assert np.abs(est.table - truth).sum() < 1.0
    assert select_lambda(half, no, nd) in (1e-4, 3.16e-4, 1e-3, 3.16e-3, 1e-2)
    with pytest.raises(ValueError):
        estimate_od(half, no, nd, design="other")
