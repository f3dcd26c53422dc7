"""Origin-destination pair frequencies from two independently perturbed endpoints.

Each user perturbs the origin and the destination with half the budget.  The
server recovers sparse non-negative pair weights ``w`` from a linear model
``y ~ M w`` with a Lasso penalty.  Two designs are available:

* ``marginal``: ``y`` stacks the two estimated endpoint marginals and each pair
  column has a one at its origin row and at its destination row;
* ``joint``: ``y`` is the observed frequency of every noisy (origin,
  destination) report and the pair column is the pair's expected noisy-report
  distribution ``q(.|a) x q(.|b)``.

Marginals alone do not determine the joint table, so the pipeline defaults to
the joint design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .estimation import Estimator, observe
from .geo import EncodedLocation
from .mechanism import SchemeTable, exact_epsilon, perturb_indices
from .seeding import STREAM_HOLDOUT, make_rng

ZERO_BELOW = 1e-6
LAMBDA_GRID = (1e-4, 3.16e-4, 1e-3, 3.16e-3, 1e-2)
DEFAULT_LAMBDA = 1e-3


@dataclass(frozen=True)
class OdPair:
    origin: EncodedLocation
    destination: EncodedLocation


def od_perturb(table_half: SchemeTable, pair: OdPair, seed: int | np.random.Generator) -> tuple[EncodedLocation, EncodedLocation]:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    dom = table_half.domain
    xs = np.array([dom.rank(pair.origin), dom.rank(pair.destination)])
    y = perturb_indices(table_half, xs, rng)
    return dom.locations[int(y[0])], dom.locations[int(y[1])]


def od_perturb_many(table_half: SchemeTable, origins, dests, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return perturb_indices(table_half, origins, rng), perturb_indices(table_half, dests, rng)


def composed_epsilon(table_half: SchemeTable) -> float:
    """Worst log ratio over pair inputs and pair outputs; it factorises per endpoint."""
    return 2.0 * exact_epsilon(table_half)


def composed_epsilon_bruteforce(table_half: SchemeTable) -> float:
    q = table_half.probability_matrix()
    joint = np.einsum("ay,bz->abyz", q, q).reshape(q.shape[0] ** 2, -1)
    return float(np.max(np.log(joint.max(axis=0)) - np.log(joint.min(axis=0))))


# --- regression model ----------------------------------------------------------------


@dataclass
class OdModel:
    M: np.ndarray = field(repr=False)
    y_vec: np.ndarray = field(repr=False)
    pairs: np.ndarray  # (p, 2) origin / destination ranks of the candidate columns
    d: int
    lam: float = DEFAULT_LAMBDA
    design: str = "marginal"


def _candidate_pairs(d: int, p_o=None, p_d=None, n: int | None = None) -> np.ndarray:
    a, b = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    pairs = np.stack([a.ravel(), b.ravel()], axis=1)
    if p_o is None or n is None:
        return pairs
    thr = 1.0 / (10 * n)
    drop = (p_o[pairs[:, 0]] < thr) & (p_d[pairs[:, 1]] < thr)
    return pairs[~drop]


def build_od_model(d: int, marginal_o, marginal_d, n: int | None = None, lam: float = DEFAULT_LAMBDA) -> OdModel:
    """Stacked-marginal design: ``y = [p_o; p_d]``, pair ``(a, b)`` hits rows ``a`` and ``d + b``."""
    p_o = np.asarray(getattr(marginal_o, "p_hat", marginal_o), dtype=np.float64)
    p_d = np.asarray(getattr(marginal_d, "p_hat", marginal_d), dtype=np.float64)
    if len(p_o) != d or len(p_d) != d:
        raise ValueError("marginals must cover the same domain")
    pairs = _candidate_pairs(d, p_o, p_d, n)
    M = np.zeros((2 * d, len(pairs)))
    cols = np.arange(len(pairs))
    M[pairs[:, 0], cols] = 1.0
    M[d + pairs[:, 1], cols] = 1.0
    return OdModel(M, np.concatenate([p_o, p_d]), pairs, d, lam, "marginal")


def build_joint_model(table_half: SchemeTable, noisy_o, noisy_d, lam: float = DEFAULT_LAMBDA, prune: bool = True) -> OdModel:
    """Joint design on the observed noisy pair frequencies."""
    d = table_half.d
    noisy_o = np.asarray(noisy_o, dtype=np.int64)
    noisy_d = np.asarray(noisy_d, dtype=np.int64)
    n = len(noisy_o)
    y = np.bincount(noisy_o * d + noisy_d, minlength=d * d) / max(n, 1)
    if prune:
        est = Estimator(table_half)
        p_o = est.estimate(observe(d, noisy_o)).p_hat
        p_d = est.estimate(observe(d, noisy_d)).p_hat
        pairs = _candidate_pairs(d, p_o, p_d, n)
    else:
        pairs = _candidate_pairs(d)
    q = table_half.probability_matrix()
    M = np.einsum("py,pz->yzp", q[pairs[:, 0]], q[pairs[:, 1]]).reshape(d * d, len(pairs))
    return OdModel(M, y, pairs, d, lam, "joint")


def expected_joint_model(table_half: SchemeTable, truth: np.ndarray, lam: float = DEFAULT_LAMBDA) -> OdModel:
    """Joint design whose response is the exact expected report-pair law of ``truth`` (no sampling noise)."""
    d = table_half.d
    q = table_half.probability_matrix()
    pairs = _candidate_pairs(d)
    M = np.einsum("py,pz->yzp", q[pairs[:, 0]], q[pairs[:, 1]]).reshape(d * d, len(pairs))
    y = (q.T @ np.asarray(truth, dtype=np.float64) @ q).ravel()
    return OdModel(M, y, pairs, d, lam, "joint")


# --- non-negative Lasso ---------------------------------------------------------------


@numba.njit(cache=True)
def _cd_kernel(G, c, w, lam, tol, max_sweeps, obj_trace, yy):
    """Cyclic coordinate descent on ``0.5 w'Gw - c'w + lam * sum(w)``, ``w >= 0``."""
    p = len(c)
    g = c - G @ w  # negative gradient of the smooth part
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        biggest = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            new = w[j] + (g[j] - lam) / gjj
            if new < 0.0:
                new = 0.0
            step = new - w[j]
            if step != 0.0:
                w[j] = new
                for k in range(p):
                    g[k] -= G[k, j] * step
                if abs(step) > biggest:
                    biggest = abs(step)
        obj = 0.5 * yy
        for k in range(p):
            obj += -c[k] * w[k] + 0.5 * w[k] * (c[k] - g[k]) + lam * w[k]
        obj_trace[sweeps] = obj
        sweeps += 1
        if biggest < tol:
            converged = True
            break
    return sweeps, converged


@dataclass
class LassoResult:
    w: np.ndarray
    raw: np.ndarray
    lam_abs: float
    sweeps: int
    converged: bool
    objective: np.ndarray = field(repr=False)


def lambda_max(model: OdModel) -> float:
    return float(max(np.max(model.M.T @ model.y_vec), 0.0))


def lasso_fit(model: OdModel, lam: float | None = None, tol: float = 1e-8, max_sweeps: int = 10_000, relative: bool = True) -> LassoResult:
    """Non-negative Lasso; ``lam`` is a fraction of :func:`lambda_max` unless ``relative`` is False.

    Coefficients under ``ZERO_BELOW`` are dropped and the rest rescaled to sum to one.
    """
    lam = model.lam if lam is None else lam
    lam_abs = lam * lambda_max(model) if relative else lam
    G = np.ascontiguousarray(model.M.T @ model.M)
    c = model.M.T @ model.y_vec
    w = np.zeros(len(c))
    trace = np.empty(max_sweeps)
    sweeps, converged = _cd_kernel(G, c, w, lam_abs, tol, max_sweeps, trace, float(model.y_vec @ model.y_vec))
    raw = w.copy()
    w = np.where(w < ZERO_BELOW, 0.0, w)
    s = w.sum()
    if s > 0:
        w /= s
    return LassoResult(w, raw, lam_abs, sweeps, converged, trace[:sweeps].copy())


def pair_table(model: OdModel, w: np.ndarray) -> np.ndarray:
    """Scatter column weights back to a ``d x d`` origin-destination table."""
    out = np.zeros((model.d, model.d))
    out[model.pairs[:, 0], model.pairs[:, 1]] = w
    return out


def select_lambda(
    table_half: SchemeTable, noisy_o, noisy_d, grid=LAMBDA_GRID, holdout: float = 0.1, seed: int = 0
) -> float:
    """Pick the grid value whose fit best predicts a held-out share of the reports."""
    noisy_o = np.asarray(noisy_o)
    noisy_d = np.asarray(noisy_d)
    n = len(noisy_o)
    mask = make_rng(seed, STREAM_HOLDOUT).random(n) < holdout
    train = build_joint_model(table_half, noisy_o[~mask], noisy_d[~mask])
    d = table_half.d
    y_hold = np.bincount(noisy_o[mask] * d + noisy_d[mask], minlength=d * d) / max(int(mask.sum()), 1)
    best, best_err = DEFAULT_LAMBDA, math.inf
    for lam in grid:
        fit = lasso_fit(train, lam)
        err = float(np.sum((train.M @ fit.w - y_hold) ** 2))
        if err < best_err - 1e-15:
            best, best_err = lam, err
    return best


@dataclass
class OdEstimate:
    table: np.ndarray
    lam: float
    converged: bool


def estimate_od(table_half: SchemeTable, noisy_o, noisy_d, design: str = "joint", lam: float = DEFAULT_LAMBDA) -> OdEstimate:
    if design == "joint":
        model = build_joint_model(table_half, noisy_o, noisy_d, lam)
    elif design == "marginal":
        est = Estimator(table_half)
        d = table_half.d
        model = build_od_model(
            d, est.estimate(observe(d, noisy_o)), est.estimate(observe(d, noisy_d)), n=len(noisy_o), lam=lam
        )
    else:
        raise ValueError(f"unknown design {design!r}")
    fit = lasso_fit(model)
    return OdEstimate(pair_table(model, fit.w), lam, fit.converged)


def sparse_od_truth(d: int, support: int, rng: np.random.Generator, equal: bool = True) -> np.ndarray:
    """Random ``d x d`` pair distribution on ``support`` distinct pairs, equal or Dirichlet weights."""
    cells = rng.choice(d * d, size=support, replace=False)
    w = np.full(support, 1.0 / support) if equal else rng.dirichlet(np.ones(support))
    out = np.zeros(d * d)
    out[cells] = w
    return out.reshape(d, d)
