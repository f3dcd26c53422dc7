"""Reference mechanisms: generalized randomized response, Hadamard response, MLE decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .estimation import (
    DistributionEstimate,
    Estimator,
    HadamardPlan,
    build_hadamard_plan,
    clip_normalize,
    observe,
)
from .mechanism import MechanismError


@dataclass(frozen=True)
class GrrScheme:
    d: int
    epsilon: float

    def __post_init__(self):
        if self.d < 2:
            raise MechanismError("need d >= 2")
        if self.epsilon < 0:
            raise MechanismError("epsilon must be non-negative")

    @property
    def p_keep(self) -> float:
        e = math.exp(self.epsilon)
        return e / (self.d + e - 1)

    @property
    def p_flip(self) -> float:
        return 1.0 / (self.d + math.exp(self.epsilon) - 1)

    @property
    def alphas(self) -> np.ndarray:
        return np.tile([self.p_keep, self.p_flip], (self.d, 1))

    def probability_matrix(self) -> np.ndarray:
        q = np.full((self.d, self.d), self.p_flip)
        np.fill_diagonal(q, self.p_keep)
        return q


def grr_perturb(scheme: GrrScheme, xs, rng: np.random.Generator) -> np.ndarray:
    """Keep each input with ``p_keep``, otherwise report a uniform other location."""
    xs = np.asarray(xs, dtype=np.int64)
    if math.isinf(scheme.epsilon):
        return xs.copy()
    keep = rng.random(xs.shape) < scheme.p_keep
    other = rng.integers(0, scheme.d - 1, size=xs.shape)
    other += other >= xs
    return np.where(keep, xs, other)


def grr_estimate(submissions, scheme: GrrScheme) -> DistributionEstimate:
    y = np.asarray(submissions, dtype=np.int64)
    n = len(y)
    f = np.bincount(y, minlength=scheme.d) / max(n, 1)
    raw = (f - scheme.p_flip) / (scheme.p_keep - scheme.p_flip)
    return DistributionEstimate(clip_normalize(raw), raw, n)


# --- Hadamard response ----------------------------------------------------------


@dataclass
class HrScheme:
    """Two probability levels: high on the candidate set ``C_x``, low elsewhere.

    One ratio ``c`` is shared by all inputs and chosen as large as the budget
    allows, so the worst-case ratio across inputs is exactly ``e^epsilon``
    whenever candidate sets have equal sizes.
    """

    plan: HadamardPlan
    epsilon: float
    c: float = field(init=False)

    def __post_init__(self):
        if self.epsilon < 0:
            raise MechanismError("epsilon must be non-negative")
        s = self.set_sizes.astype(np.float64)
        d = self.d
        # ln c + ln(max D / min D) with D = d + (c - 1) s is increasing in c
        lo, hi = 0.0, self.epsilon

        def eps_at(log_c):
            c = math.exp(log_c)
            dd = d + (c - 1) * s
            return log_c + math.log(dd.max() / dd.min())

        if eps_at(hi) <= self.epsilon + 1e-12:
            lo = hi
        else:
            while hi - lo > 1e-12 * max(1.0, self.epsilon):
                mid = 0.5 * (lo + hi)
                if eps_at(mid) <= self.epsilon + 1e-12:
                    lo = mid
                else:
                    hi = mid
        self.c = math.exp(lo)

    @property
    def d(self) -> int:
        return self.plan.d

    @cached_property
    def set_sizes(self) -> np.ndarray:
        return self.plan.membership.sum(axis=1)

    @cached_property
    def alphas(self) -> np.ndarray:
        low = 1.0 / (self.d + (self.c - 1.0) * self.set_sizes)
        return np.stack([self.c * low, low], axis=1)

    def probability_matrix(self) -> np.ndarray:
        a = self.alphas
        return np.where(self.plan.membership, a[:, :1], a[:, 1:])

    @cached_property
    def _members(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-input index lists: candidate set first, complement after."""
        mem = self.plan.membership
        order = np.argsort(~mem, axis=1, kind="stable")
        return order, self.set_sizes


def hr_scheme(d: int, epsilon: float) -> HrScheme:
    return HrScheme(build_hadamard_plan(d), epsilon)


def hr_perturb(scheme: HrScheme, xs, rng: np.random.Generator) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.int64)
    order, sizes = scheme._members
    s = sizes[xs]
    inside = rng.random(xs.shape) < s * scheme.alphas[xs, 0]
    k_in = rng.integers(0, np.maximum(s, 1))
    k_out = s + rng.integers(0, np.maximum(scheme.d - s, 1))
    k = np.where(inside & (s > 0), k_in, np.where(s < scheme.d, k_out, k_in))
    return order[xs, k]


def hr_estimate(submissions, scheme: HrScheme) -> DistributionEstimate:
    return Estimator(scheme, scheme.plan).estimate(observe(scheme.d, submissions))


# --- maximum likelihood -----------------------------------------------------------


@dataclass
class EmTrace:
    loglik: list[float]
    converged: bool


def mle_estimate(
    submissions,
    table,
    max_iter: int = 500,
    rel_tol: float = 1e-9,
    trace: EmTrace | None = None,
) -> DistributionEstimate:
    """Maximise ``sum_j log sum_x p(x) q(y_j|x)`` over the simplex by EM.

    ``table`` is anything with ``probability_matrix()``.
    """
    q = table.probability_matrix()
    d = q.shape[0]
    y = np.asarray(submissions, dtype=np.int64)
    n = len(y)
    if n == 0:
        u = np.full(d, 1.0 / d)
        return DistributionEstimate(u, u.copy(), 0, low_confidence=True)
    counts = np.bincount(y, minlength=d).astype(np.float64)
    seen = counts > 0
    cq = q[:, seen]  # (d, seen)
    w = counts[seen]
    p = np.full(d, 1.0 / d)
    mix = p @ cq
    ll = float(w @ np.log(mix))
    history = [ll]
    converged = False
    for _ in range(max_iter):
        p = p * (cq @ (w / mix)) / n
        p /= p.sum()
        mix = p @ cq
        new = float(w @ np.log(mix))
        history.append(new)
        if abs(new - ll) <= rel_tol * abs(ll):
            converged = True
            break
        ll = new
    if trace is not None:
        trace.loglik[:] = history
        trace.converged = converged
    return DistributionEstimate(p, p.copy(), n, notes={"iterations": len(history) - 1, "converged": converged})
