import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from staircase_ldp.estimation import (
    Estimator,
    Observation,
    build_hadamard_plan,
    l1_bound,
    l2_bound,
    observe,
    sylvester,
)
from staircase_ldp.mechanism import precompute, table_from_betas
from staircase_ldp.seeding import make_rng
from staircase_ldp.synthetic import random_domain, zipf_truth


def test_sylvester_small_and_against_scipy():
    assert sylvester(2).tolist() == [[1, 1], [1, -1]]
    for k in (1, 2, 4, 64, 256):
        assert np.array_equal(sylvester(k), scipy.linalg.hadamard(k))


@pytest.mark.parametrize("k", [2, 8, 128, 1024])
def test_rows_orthogonal(k):
    h = sylvester(k).astype(np.int64)
    assert np.array_equal(h @ h.T, k * np.eye(k, dtype=np.int64))


def test_plan_sizes():
    assert build_hadamard_plan(374).K == 512
    plan = build_hadamard_plan(15)
    assert plan.K == 16
    h = scipy.linalg.hadamard(16)
    for i in range(15):
        full = [c for c in range(16) if h[i + 1, c] == 1]
        assert len(full) == 8
        mapped = [c - 1 for c in full if 1 <= c <= 15]
        assert plan.candidate_set(i).tolist() == mapped


def test_observe_trivial():
    plan = build_hadamard_plan(16)
    y = int(plan.candidate_set(3)[0])
    obs = observe(16, [y])
    assert obs.candidate_frequencies(plan)[3] == 1.0
    obs = observe(16, [y] * 50)
    assert np.array_equal(obs.candidate_frequencies(plan), plan.membership[:, y].astype(float))


def test_observe_matches_recount():
    plan = build_hadamard_plan(16)
    ys = make_rng(0).integers(0, 16, 500)
    naive = np.array([sum(1 for y in ys if y in set(plan.candidate_set(x).tolist())) for x in range(16)]) / 500
    assert np.allclose(observe(16, ys).candidate_frequencies(plan), naive, atol=1e-15)


def test_observe_rejects_out_of_range():
    obs = observe(4, [0, 1, 5, -1])
    assert obs.n == 2 and obs.rejected == 2
    merged = obs.merge(Observation(4, np.array([1, 0, 0, 0])))
    assert merged.n == 3 and merged.rejected == 2


@pytest.mark.parametrize("d,eps", [(16, 1.0), (32, 3.0), (64, 2.0), (64, 5.0)])
def test_exact_observations_recover_truth(d, eps):
    dom = random_domain(d, 10, np.random.default_rng(d))
    est = Estimator(precompute(dom, eps))
    p = make_rng(d).dirichlet(np.ones(d))
    assert np.max(np.abs(est.solve(est.A @ p) - p)) <= 1e-8


@pytest.mark.parametrize("d", [4, 8, 16])
def test_lu_equals_explicit_inverse(d):
    dom = random_domain(d, 8, np.random.default_rng(d + 1))
    est = Estimator(precompute(dom, 2.0))
    b = make_rng(d).random(d)
    assert np.max(np.abs(est.solve(b) - np.linalg.inv(est.A) @ b)) <= 1e-8


def test_uniform_scheme_gives_uniform_estimate():
    dom = random_domain(16, 8, np.random.default_rng(2))
    t = table_from_betas(dom, np.array([[8, 0]] * 16), 1.0, 0.0)
    est = Estimator(t)
    ys = make_rng(1).integers(0, 16, 100_000)
    p = est.estimate(observe(16, ys)).p_hat
    assert np.max(np.abs(p - 1 / 16)) < 0.02


def test_gamma_mu_by_exhaustive_scan():
    dom = random_domain(16, 8, np.random.default_rng(5))
    t = precompute(dom, 2.0)
    est = Estimator(t)
    q = t.probability_matrix()
    gamma = min(sum(q[x, y] for y in est.plan.candidate_set(x)) for x in range(16))
    mu = min(q[x].min() for x in range(16))
    assert est.gamma == pytest.approx(gamma, abs=1e-14)
    assert est.mu == pytest.approx(mu, abs=1e-15)


def test_bound_shapes():
    dom = random_domain(64, 12, np.random.default_rng(64))
    t = precompute(dom, 1.0)
    plan = build_hadamard_plan(64)
    b = l1_bound(t, plan, 10_000)
    assert math.isfinite(b)
    assert l1_bound(t, plan, 40_000) == pytest.approx(b / 2, rel=1e-12)
    assert l2_bound(t, plan, 10_000) == pytest.approx(b / 8, rel=1e-12)


def test_degenerate_flag_on_two_level_tables():
    dom = random_domain(64, 12, np.random.default_rng(64))
    est = Estimator(precompute(dom, 4.0))
    assert est.table.m == 2
    assert est.bound_degenerate
    assert math.isnan(est.l1_bound(10**5)) and math.isnan(est.l2_bound(10**5))


def test_empty_epoch_uniform():
    dom = random_domain(16, 8, np.random.default_rng(2))
    res = Estimator(precompute(dom, 2.0)).estimate(observe(16, []))
    assert res.low_confidence and np.allclose(res.p_hat, 1 / 16)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_estimate_is_distribution(seed):
    dom = random_domain(32, 10, np.random.default_rng(32))
    t = precompute(dom, 2.0)
    rng = make_rng(seed)
    ys = rng.integers(0, 32, int(rng.integers(1, 2000)))
    p = Estimator(t).estimate(observe(32, ys)).p_hat
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


def test_zipf_estimate_converges():
    dom = random_domain(64, 12, np.random.default_rng(64))
    t = precompute(dom, 3.0)
    est = Estimator(t)
    from staircase_ldp.mechanism import perturb_indices
    from staircase_ldp.synthetic import sample_users

    p = zipf_truth(64)
    errs = []
    for n in (10_000, 160_000):
        x = sample_users(p, n, make_rng(0, n))
        errs.append(np.abs(est.estimate(observe(64, perturb_indices(t, x, make_rng(1, n)))).p_hat - p).sum())
    assert errs[1] < errs[0]
