"""Experiment drivers shared by the command line and the acceptance checks."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import GrrScheme, grr_estimate, grr_perturb, hr_perturb, hr_scheme, mle_estimate
from .domain import LocationDomain
from .estimation import Estimator, observe
from .mechanism import SchemeTable, precompute, perturb_indices, table_mi_bound
from .metrics import MetricReport, cell_coordinates, knn_scores, score
from .seeding import STREAM_PERTURB, STREAM_TRUTH, make_rng
from .synthetic import sample_users, synthetic_domain, uniform_truth, zipf_truth

MECHANISMS = ("srr", "grr", "hr", "srr+mle")
MECHANISM_IDS = {name: k for k, name in enumerate(MECHANISMS)}


@dataclass
class ExperimentConfig:
    mechanisms: tuple[str, ...] = ("srr", "grr")
    epsilons: tuple[float, ...] = (1.0, 3.0, 5.0)
    n: int = 100_000
    seeds: tuple[int, ...] = (0,)
    d: int = 374
    domain_seed: int = 1
    dist: str = "zipf"
    zipf_s: float = 1.1
    knn_k: int = 0
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        bad = [m for m in self.mechanisms if m not in MECHANISMS]
        if bad:
            raise ValueError(f"unknown mechanisms {bad}; choose from {MECHANISMS}")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("every epsilon must be positive")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.dist not in ("zipf", "uniform"):
            raise ValueError("dist must be zipf or uniform")


def truth_for(config: ExperimentConfig, d: int) -> np.ndarray:
    if config.truth is not None:
        return np.asarray(config.truth, dtype=np.float64)
    return zipf_truth(d, config.zipf_s) if config.dist == "zipf" else uniform_truth(d)


@dataclass
class RunResult:
    reports: list[MetricReport]
    tables: dict[float, SchemeTable]
    seconds_per_user: dict[str, float]


def run_distribution(config: ExperimentConfig, domain: LocationDomain | None = None) -> RunResult:
    """Sample users, perturb, estimate and score every (mechanism, epsilon, seed)."""
    domain = domain or synthetic_domain(config.d, config.domain_seed)
    d = domain.d
    p = truth_for(config, d)
    coords = cell_coordinates(domain) if config.knn_k else None
    reports, tables, timing = [], {}, {}
    for eps in config.epsilons:
        srr = srr_est = None
        if any(m.startswith("srr") for m in config.mechanisms):
            srr = tables[eps] = precompute(domain, eps)
            srr_est = Estimator(srr)
        grr = GrrScheme(d, eps) if "grr" in config.mechanisms else None
        hr = hr_scheme(d, eps) if "hr" in config.mechanisms else None
        hr_est = Estimator(hr, hr.plan) if hr is not None else None
        for seed in config.seeds:
            x = sample_users(p, config.n, make_rng(seed, STREAM_TRUTH))
            for mech in config.mechanisms:
                rng = make_rng(seed, STREAM_PERTURB, MECHANISM_IDS[mech])
                t0 = time.perf_counter()
                if mech == "srr":
                    est = srr_est.estimate(observe(d, perturb_indices(srr, x, rng))).p_hat
                elif mech == "srr+mle":
                    est = mle_estimate(perturb_indices(srr, x, rng), srr).p_hat
                elif mech == "grr":
                    est = grr_estimate(grr_perturb(grr, x, rng), grr).p_hat
                else:
                    est = hr_est.estimate(observe(d, hr_perturb(hr, x, rng))).p_hat
                timing.setdefault(mech, []).append((time.perf_counter() - t0) / config.n)
                rep = score(p, est, mech, eps, config.n, seed)
                if config.knn_k:
                    rep.knn_k = config.knn_k
                    rep.precision, rep.recall, rep.mse = knn_scores(coords, p, est, config.knn_k, config.n)
                reports.append(rep)
    return RunResult(reports, tables, {k: float(np.mean(v)) for k, v in timing.items()})


def mean_l1(reports, mechanism: str, epsilon: float) -> float:
    vals = [r.l1 for r in reports if r.mechanism == mechanism and r.epsilon == epsilon]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class BenchRow:
    epsilon: float
    mechanism: str
    c: float
    m: int
    epsilon_achieved: float
    mi_bound: float
    l1_bound: float

    FIELDS = ("epsilon", "mechanism", "c", "m", "epsilon_achieved", "mi_bound", "l1_bound")


def bench(domain: LocationDomain, epsilons, n: int = 100_000) -> list[BenchRow]:
    """Closed-form comparison of SRR against GRR: ratio, groups, budget, MI and L1 bounds."""
    rows = []
    d = domain.d
    for eps in epsilons:
        t = precompute(domain, eps)
        est = Estimator(t)
        rows.append(BenchRow(eps, "srr", t.c, t.m, t.epsilon_achieved, table_mi_bound(t), est.l1_bound(n)))
        g = GrrScheme(d, eps)
        gamma = float(np.min(np.diag(est.plan.membership @ g.probability_matrix().T)))
        mu = g.p_flip
        deg = 2 * gamma <= d * mu
        l1b = math.nan if deg else 2 * d / (math.sqrt(n) * (2 * gamma - d * mu))
        mi = math.log(d) + d * g.p_flip * math.log(g.p_keep)
        rows.append(BenchRow(eps, "grr", math.exp(eps), 2, eps, mi, l1b))
    return rows
