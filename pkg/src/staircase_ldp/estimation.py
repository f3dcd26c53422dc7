"""Server-side frequency estimation through Hadamard candidate sets.

Each domain rank ``i`` owns row ``i + 1`` of a Sylvester Hadamard matrix of
order ``K = 2^ceil(log2(d + 1))``; its candidate set ``C_i`` holds the ranks
``k`` whose column ``k + 1`` carries ``+1``.  The server counts how often the
perturbed reports fall in each candidate set and inverts the linear map

    p(C_x) = sum_x' p(x') * sum_{y in C_x} q(y | x')

with an LU factorisation.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .mechanism import SchemeTable

log = logging.getLogger(__name__)

PIVOT_FLOOR = 1e-12
TIKHONOV = 1e-8


class EstimationError(RuntimeError):
    pass


def sylvester(k: int) -> np.ndarray:
    """Hadamard matrix of order ``k`` (a power of two) by Sylvester doubling."""
    if k < 1 or k & (k - 1):
        raise ValueError(f"order must be a power of two, got {k}")
    h = np.ones((1, 1), dtype=np.int8)
    while h.shape[0] < k:
        h = np.block([[h, h], [h, -h]])
    return h


@dataclass(frozen=True)
class HadamardPlan:
    d: int
    K: int
    H: np.ndarray = field(repr=False)

    @cached_property
    def membership(self) -> np.ndarray:
        """``membership[x, y]`` is True when rank ``y`` lies in ``C_x``."""
        return self.H[1 : self.d + 1, 1 : self.d + 1] == 1

    def row_of(self, i: int) -> int:
        return i + 1

    def candidate_set(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.membership[i])

    @property
    def mapped_columns(self) -> range:
        return range(1, self.d + 1)


def build_hadamard_plan(d: int) -> HadamardPlan:
    if d < 2:
        raise ValueError("need d >= 2")
    k = 1 << math.ceil(math.log2(d + 1))
    return HadamardPlan(d, k, sylvester(k))


@dataclass
class Observation:
    """Per-rank report counts; candidate-set frequencies are derived from them."""

    d: int
    counts: np.ndarray
    rejected: int = 0

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def candidate_frequencies(self, plan: HadamardPlan) -> np.ndarray:
        n = self.n
        if n == 0:
            return np.zeros(self.d)
        return plan.membership @ self.counts / n

    def merge(self, other: "Observation") -> "Observation":
        if other.d != self.d:
            raise ValueError("cannot merge observations of different domains")
        return Observation(self.d, self.counts + other.counts, self.rejected + other.rejected)


def observe(d: int, submissions) -> Observation:
    """Count reports in one pass; indices outside ``[0, d)`` are rejected and tallied."""
    y = np.asarray(submissions, dtype=np.int64).ravel()
    ok = (y >= 0) & (y < d)
    counts = np.bincount(y[ok], minlength=d).astype(np.int64)
    return Observation(d, counts, int((~ok).sum()))


@dataclass
class DistributionEstimate:
    p_hat: np.ndarray
    raw: np.ndarray
    n: int
    residual: float = 0.0
    condition: float = math.nan
    low_confidence: bool = False
    notes: dict = field(default_factory=dict)


def clip_normalize(raw: np.ndarray) -> np.ndarray:
    p = np.clip(raw, 0.0, None)
    s = p.sum()
    if s <= 0:
        return np.full(len(raw), 1.0 / len(raw))
    return p / s


def _lu(a: np.ndarray):
    # singular systems are detected from the pivots, so LAPACK's warning is noise here
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        return sla.lu_factor(a, check_finite=False)


class Estimator:
    """Coefficient matrix ``A = M Q^T`` and its LU factors for one scheme table."""

    def __init__(self, table: SchemeTable, plan: HadamardPlan | None = None):
        self.table = table
        self.plan = plan or build_hadamard_plan(table.d)
        if self.plan.d != table.d:
            raise ValueError("plan and table disagree on the domain size")
        q = table.probability_matrix()
        self.A = self.plan.membership.astype(np.float64) @ q.T
        self._lu = None
        self._normal = None
        lu, piv = _lu(self.A)
        pivot = float(np.min(np.abs(np.diag(lu))))
        if pivot < PIVOT_FLOOR:
            log.warning("smallest LU pivot %.3g below %.0e, using regularised normal equations", pivot, PIVOT_FLOOR)
            ata = self.A.T @ self.A + TIKHONOV * np.eye(table.d)
            try:
                self._normal = sla.cho_factor(ata)
            except np.linalg.LinAlgError as exc:
                raise EstimationError(f"singular system, condition {self.condition:.3g}") from exc
        else:
            self._lu = (lu, piv)

    @cached_property
    def condition(self) -> float:
        """Reciprocal of LAPACK's 1-norm reciprocal-condition estimate."""
        lu, piv = _lu(self.A)
        anorm = np.linalg.norm(self.A, 1)
        rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
        return math.inf if rcond == 0 else 1.0 / rcond

    def solve(self, observed: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return sla.lu_solve(self._lu, observed, check_finite=False)
        return sla.cho_solve(self._normal, self.A.T @ observed)

    def estimate(self, obs: Observation, low_confidence_below: int = 100) -> DistributionEstimate:
        n = obs.n
        if n == 0:
            u = np.full(self.table.d, 1.0 / self.table.d)
            return DistributionEstimate(u, u.copy(), 0, 0.0, self.condition, True, {"empty": True})
        pc = obs.candidate_frequencies(self.plan)
        raw = self.solve(pc)
        resid = float(np.linalg.norm(self.A @ raw - pc))
        return DistributionEstimate(
            clip_normalize(raw), raw, n, resid, math.nan, n < low_confidence_below, {"rejected": obs.rejected}
        )

    # error bounds -------------------------------------------------------------

    @property
    def gamma(self) -> float:
        return float(np.min(np.diag(self.A)))

    @property
    def mu(self) -> float:
        return float(np.min(self.table.alphas[:, -1]))

    @property
    def bound_degenerate(self) -> bool:
        # two-level tables with x outside C_x land exactly on the boundary, give or take rounding
        dm = self.table.d * self.mu
        return 2 * self.gamma - dm <= 1e-9 * max(dm, 1.0)

    def l1_bound(self, n: int) -> float:
        if self.bound_degenerate:
            return math.nan
        return 2 * self.table.d / (math.sqrt(n) * (2 * self.gamma - self.table.d * self.mu))

    def l2_bound(self, n: int) -> float:
        return self.l1_bound(n) / math.sqrt(self.table.d)


def estimate(plan: HadamardPlan, table: SchemeTable, obs: Observation) -> DistributionEstimate:
    return Estimator(table, plan).estimate(obs)


def l1_bound(table: SchemeTable, plan: HadamardPlan, n: int) -> float:
    return Estimator(table, plan).l1_bound(n)


def l2_bound(table: SchemeTable, plan: HadamardPlan, n: int) -> float:
    return Estimator(table, plan).l2_bound(n)
