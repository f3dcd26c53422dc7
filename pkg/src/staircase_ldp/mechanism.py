"""Staircase randomized response: probability levels, budget accounting, sampling.

For an input ``x`` with groups ``G_1(x) .. G_m(x)`` (closest first) every
output in ``G_j(x)`` is drawn with probability ``alpha_j(x)``.  The levels
descend in equal steps, ``alpha_1 = c * alpha_m``, and ``c`` is shared by all
inputs.  The server fixes ``c`` and ``m`` offline for a target budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .domain import (
    GroupPartition,
    InfeasiblePartition,
    LocationDomain,
    max_feasible_m,
    optimize_all,
    partition,
    staircase_alphas,
)
from .geo import EncodedLocation
from .seeding import make_rng

log = logging.getLogger(__name__)

EPS_SLACK = 1e-9


class MechanismError(ValueError):
    pass


@dataclass(frozen=True)
class AlphaLevels:
    alpha_min: float
    alpha_max: float
    delta: float
    alphas: tuple[float, ...]


def alphas_from_sizes(sizes: Sequence[int], c: float, d: int) -> AlphaLevels:
    """Probability level of each group from its size and the ratio ``c``."""
    m = len(sizes)
    if m < 2:
        raise MechanismError("need at least two groups")
    if c < 1:
        raise MechanismError(f"c must be >= 1, got {c}")
    if any(s <= 0 for s in sizes) or sum(sizes) != d:
        raise MechanismError(f"group sizes {tuple(sizes)} must be positive and sum to d={d}")
    weighted = sum(j * s for j, s in enumerate(sizes[1:], start=1))
    denom = (m - 1) * d * c - (c - 1) * weighted
    if denom <= 0:
        raise MechanismError(f"non-positive normaliser {denom} for c={c}, sizes={tuple(sizes)}")
    a_min = (m - 1) / denom
    a_max = c * a_min
    delta = a_min * (c - 1) / (m - 1)
    alphas = tuple(a_max - j * delta for j in range(m))
    return AlphaLevels(a_min, a_max, delta, alphas)


@dataclass(frozen=True)
class StaircaseScheme:
    partition: GroupPartition
    alphas: tuple[float, ...]
    delta: float
    c: float

    @property
    def m(self) -> int:
        return len(self.alphas)

    @property
    def alpha_max(self) -> float:
        return self.alphas[0]

    @property
    def alpha_min(self) -> float:
        return self.alphas[-1]

    def q(self, y: int) -> float:
        return self.alphas[self.partition.group_of(y)]


@dataclass
class SchemeTable:
    """Staircase parameters of every input in a domain.

    Arrays are indexed ``[x, j]`` with ``x`` the domain rank and ``j`` the group.
    """

    domain: LocationDomain
    epsilon_target: float
    c: float
    betas: np.ndarray
    sizes: np.ndarray
    alphas: np.ndarray
    lo: np.ndarray = field(repr=False)
    hi: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return self.betas.shape[1]

    @property
    def d(self) -> int:
        return self.domain.d

    @cached_property
    def epsilon_achieved(self) -> float:
        return epsilon_of(self)

    @cached_property
    def group_cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.sizes * self.alphas, axis=1)
        cdf[:, -1] = 1.0
        return cdf

    def scheme(self, x: EncodedLocation | int) -> StaircaseScheme:
        i = int(x) if isinstance(x, (int, np.integer)) else self.domain.rank(x)
        part = GroupPartition(
            i,
            tuple(int(b) for b in self.betas[i]),
            tuple(int(s) for s in self.sizes[i]),
            tuple((int(a), int(b)) for a, b in zip(self.lo[i], self.hi[i])),
        )
        a = tuple(float(v) for v in self.alphas[i])
        delta = a[0] - a[1]
        return StaircaseScheme(part, a, delta, self.c)

    def probability_row(self, i: int) -> np.ndarray:
        row = np.empty(self.d)
        # outermost group covers the whole domain; paint inner groups over it
        for j in range(self.m - 1, -1, -1):
            row[self.lo[i, j] : self.hi[i, j]] = self.alphas[i, j]
        return row

    def probability_matrix(self) -> np.ndarray:
        """Dense ``Q[x, y] = q(y | x)``."""
        q = np.empty((self.d, self.d))
        for i in range(self.d):
            for j in range(self.m - 1, -1, -1):
                q[i, self.lo[i, j] : self.hi[i, j]] = self.alphas[i, j]
        return q

    @property
    def config(self) -> dict:
        return {"epsilon_target": self.epsilon_target, "m": self.m, "c": self.c, "domain_hash": self.domain.hash}


def table_from_partitions(
    domain: LocationDomain, parts: Sequence[GroupPartition], c: float, epsilon_target: float
) -> SchemeTable:
    if len(parts) != domain.d:
        raise MechanismError("need one partition per domain location")
    m = parts[0].m
    if any(p.m != m for p in parts):
        raise MechanismError("all partitions must have the same group count")
    betas = np.array([p.beta for p in parts], dtype=np.int64)
    sizes = np.array([p.sizes for p in parts], dtype=np.int64)
    lo_all, hi_all = domain.prefix_ranges
    rows = np.arange(domain.d)[:, None]
    lo = lo_all[rows, betas]
    hi = hi_all[rows, betas]
    alphas = _alphas_checked(sizes, c, domain.d)
    return SchemeTable(domain, float(epsilon_target), float(c), betas, sizes, alphas, lo, hi)


def table_from_betas(domain: LocationDomain, betas: np.ndarray, c: float, epsilon_target: float) -> SchemeTable:
    parts = [partition(domain, i, tuple(b)) for i, b in enumerate(np.asarray(betas))]
    return table_from_partitions(domain, parts, c, epsilon_target)


def _alphas_checked(sizes: np.ndarray, c: float, d: int) -> np.ndarray:
    if c < 1:
        raise MechanismError(f"c must be >= 1, got {c}")
    alphas = staircase_alphas(sizes.astype(np.float64), float(c), d)
    if not np.all(alphas[:, -1] > 0):
        raise MechanismError(f"c={c} is infeasible for these partitions")
    return alphas


# --- privacy accounting -------------------------------------------------------


def _epsilon_from_alphas(alphas: np.ndarray) -> float:
    return float(math.log(alphas[:, 0].max()) - math.log(alphas[:, -1].min()))


def epsilon_of(table: SchemeTable) -> float:
    """Budget guaranteed by the table: ``max_{x,x'} ln(alpha_max(x) / alpha_min(x'))``."""
    return _epsilon_from_alphas(table.alphas)


def exact_epsilon(table: SchemeTable) -> float:
    """``max_{x, x', y} ln(q(y|x) / q(y|x'))`` over the dense probability matrix."""
    q = table.probability_matrix()
    return float(np.max(np.log(q.max(axis=0)) - np.log(q.min(axis=0))))


def closed_form_epsilon(table: SchemeTable, upper: str = "m-1") -> float:
    """Closed-form budget with the normaliser sum running to ``m - 1`` or ``m``.

    Kept as a diagnostic next to :func:`epsilon_of`.
    """
    m, d, c = table.m, table.d, table.c
    stop = m - 1 if upper == "m-1" else m
    j = np.arange(1, stop)  # group offsets j-1 for j = 2 .. stop
    w = (table.sizes[:, 1:stop] * j).sum(axis=1)
    denom = (m - 1) * d * c - (c - 1) * w
    return float(math.log(c) + math.log(denom.max()) - math.log(denom.min()))


# --- choosing m ------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalM:
    m_star: float
    m: int
    clamped: bool


def worst_case_mi_bound(m: float, c: float, d: int) -> float:
    """Mutual-information bound with every group relaxed to size ``d``.

    Infinite where the relaxed normaliser is not positive.
    """
    u = 2.0 * c - (c - 1.0) * m
    if u <= 0:
        return math.inf
    return math.log(d) + (2.0 / u) * math.log(2.0 * c / (d * u))


def optimal_m(c: float, d: int) -> OptimalM:
    """Stationary point of the relaxed bound, rounded to the better neighbour."""
    if c <= 1:
        raise MechanismError("optimal m needs c > 1")
    if d <= math.e:
        raise MechanismError("optimal m needs d > e")
    m_star = 2.0 * (c * d - math.exp(1.0 + math.log(c))) / ((c - 1.0) * d)
    lo, hi = max(2, math.floor(m_star)), max(2, math.ceil(m_star))
    clamped = m_star < 2
    if lo == hi:
        return OptimalM(m_star, lo, clamped)
    b_lo, b_hi = worst_case_mi_bound(lo, c, d), worst_case_mi_bound(hi, c, d)
    return OptimalM(m_star, hi if b_hi < b_lo else lo, clamped)


def mi_bound(scheme: StaircaseScheme | AlphaLevels, d: int) -> float:
    """``ln d + d * alpha_min * ln alpha_max`` (natural logarithms)."""
    return math.log(d) + d * scheme.alpha_min * math.log(scheme.alpha_max)


def table_mi_bound(table: SchemeTable) -> float:
    """Largest per-input bound in a table."""
    a_min, a_max = table.alphas[:, -1], table.alphas[:, 0]
    return float(np.max(math.log(table.d) + table.d * a_min * np.log(a_max)))


# --- choosing c ------------------------------------------------------------------

LOG_C_TOL = 1e-6


def solve_c(
    epsilon: float,
    m: int,
    domain: LocationDomain,
    partitions: Sequence[GroupPartition] | None = None,
    isolate_input: bool = False,
) -> float:
    """Largest ``c`` whose table meets ``epsilon`` with the partitions held fixed.

    Without explicit partitions the thresholds are optimised once at
    ``c = e^epsilon``.
    """
    if epsilon <= 0:
        raise MechanismError("epsilon must be positive")
    if partitions is None:
        partitions = optimize_all(domain, m, math.exp(epsilon), isolate_input=isolate_input)
    sizes = np.array([p.sizes for p in partitions], dtype=np.float64)
    d = domain.d
    trail: list[tuple[float, float]] = []

    def eps_at(log_c: float) -> float:
        a = staircase_alphas(sizes, math.exp(log_c), d)
        if not np.all(a[:, -1] > 0):
            return math.inf
        e = _epsilon_from_alphas(a)
        trail.append((log_c, e))
        return e

    target = epsilon + 1e-12
    if eps_at(epsilon) <= target:
        return math.exp(epsilon)
    lo, hi = 0.0, epsilon
    while hi - lo > LOG_C_TOL:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target:
            lo = mid
        else:
            hi = mid
    trail.sort()
    es = [e for _, e in trail]
    if any(b < a - 1e-12 for a, b in zip(es, es[1:])):
        raise MechanismError("privacy loss is not monotone in c for these partitions")
    if lo <= 0.0:
        raise MechanismError(f"no c > 1 satisfies epsilon={epsilon} for this partition structure")
    return math.exp(lo)


def precompute(
    domain: LocationDomain,
    epsilon: float,
    m: int | None = None,
    isolate_input: bool = True,
    max_rounds: int = 10,
) -> SchemeTable:
    """Fix ``m``, the thresholds of every input and the largest admissible ``c``.

    Alternates between choosing ``m`` for the current ``c``, optimising the
    thresholds, and searching ``c`` with the thresholds fixed, until the
    thresholds stop changing.

    ``isolate_input`` pins ``G_1(x) = {x}``.  Without it, inputs that share
    their first group and thresholds have identical output laws and cannot be
    told apart by any estimator.
    """
    if epsilon <= 0:
        raise MechanismError("epsilon must be positive")
    m_cap = max_feasible_m(domain)
    if isolate_input:
        m_cap = max(2, m_cap)
    if m is not None and m > m_cap:
        raise InfeasiblePartition(f"m={m} exceeds the {m_cap} prefix strata available to every input")
    c = math.exp(epsilon)
    prev = None
    table = None
    for rnd in range(max_rounds):
        m_round = m if m is not None else min(optimal_m(c, domain.d).m, m_cap)
        parts = optimize_all(domain, m_round, c, isolate_input=isolate_input)
        c_new = solve_c(epsilon, m_round, domain, partitions=parts)
        table = table_from_partitions(domain, parts, c_new, epsilon)
        log.debug("round %d: m=%d c=%.6g eps=%.6g", rnd, m_round, c_new, table.epsilon_achieved)
        key = (m_round, table.betas.tobytes())
        if key == prev:
            break
        prev = key
        c = c_new
    assert table is not None
    if table.epsilon_achieved > epsilon + EPS_SLACK:
        raise MechanismError("precomputed table exceeds the privacy budget")
    return table


# --- client sampling ----------------------------------------------------------------


def perturb_indices(table: SchemeTable, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Perturb many domain ranks at once: pick a group, then a uniform member."""
    xs = np.asarray(xs, dtype=np.int64)
    if xs.size and (xs.min() < 0 or xs.max() >= table.d):
        raise MechanismError("input index outside the domain")
    u = rng.random(xs.shape)
    cdf = table.group_cdf[xs]
    j = np.minimum((u[..., None] >= cdf).sum(axis=-1), table.m - 1)
    size = table.sizes[xs, j]
    k = rng.integers(0, size)
    lo = table.lo[xs, j]
    inner_lo = np.where(j > 0, table.lo[xs, np.maximum(j - 1, 0)], table.hi[xs, j])
    inner_hi = np.where(j > 0, table.hi[xs, np.maximum(j - 1, 0)], table.hi[xs, j])
    left = inner_lo - lo
    return np.where(k < left, lo + k, inner_hi + (k - left))


def perturb(table: SchemeTable, x: EncodedLocation, seed: int | np.random.Generator) -> EncodedLocation:
    i = table.domain.rank(x)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    y = int(perturb_indices(table, np.array([i]), rng)[0])
    return table.domain.locations[y]
