"""Discrete location domain, prefix trie and per-input group partitions."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

import numpy as np

from .geo import EncodedLocation, GeoPoint, centroid


class DomainError(ValueError):
    pass


class InfeasiblePartition(DomainError):
    """No strictly decreasing threshold vector yields non-empty groups."""


class LocationDomain:
    """Ordered set of equal-length codes with an implicit binary trie.

    Codes are sorted lexicographically, so every trie node (all codes sharing
    a given prefix) is a contiguous run ``[lo, hi)`` of the sorted array.  The
    node of code ``i`` at depth ``l`` is found with two binary searches, which
    is all the partition and sampling code needs.
    """

    def __init__(self, locations: Iterable[EncodedLocation], prefix: EncodedLocation | None = None):
        codes = list(locations)
        if len(codes) < 2:
            raise DomainError(f"a domain needs at least 2 locations, got {len(codes)}")
        nbits = codes[0].nbits
        if any(c.nbits != nbits for c in codes):
            raise DomainError("mixed code lengths in domain")
        if nbits > 62:
            raise DomainError("codes longer than 62 bits are not supported")
        codes.sort()
        for a, b in zip(codes, codes[1:]):
            if a == b:
                raise DomainError(f"duplicate location {a.hex()}")
        self.locations: tuple[EncodedLocation, ...] = tuple(codes)
        self.nbits = nbits
        self.prefix = prefix if prefix is not None else EncodedLocation(0, 0)
        self.values = np.fromiter((c.value for c in codes), dtype=np.int64, count=len(codes))
        self.index = {c: i for i, c in enumerate(codes)}

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def d(self) -> int:
        return len(self.locations)

    def __contains__(self, code: object) -> bool:
        return code in self.index

    def __repr__(self) -> str:
        return f"LocationDomain(d={self.d}, nbits={self.nbits}, prefix={self.prefix.bits!r})"

    def rank(self, code: EncodedLocation) -> int:
        try:
            return self.index[code]
        except KeyError:
            raise DomainError(f"location {code.hex()} ({code.nbits} bits) is not in the domain") from None

    @cached_property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"bits={self.nbits};prefix={self.prefix.bits};".encode())
        h.update(self.values.tobytes())
        return h.hexdigest()

    # trie -----------------------------------------------------------------

    def node_range(self, code: EncodedLocation, depth: int) -> tuple[int, int]:
        """Index range of the trie node ``code[:depth]``."""
        shift = self.nbits - depth
        lo_val = (code.value >> shift) << shift
        lo = int(np.searchsorted(self.values, lo_val, side="left"))
        hi = int(np.searchsorted(self.values, lo_val + (1 << shift), side="left"))
        return lo, hi

    @cached_property
    def prefix_ranges(self) -> tuple[np.ndarray, np.ndarray]:
        """``lo, hi`` of shape ``(d, nbits + 1)``: node of each code at each depth."""
        depths = np.arange(self.nbits + 1, dtype=np.int64)
        shifts = self.nbits - depths
        lo_vals = (self.values[:, None] >> shifts) << shifts
        lo = np.searchsorted(self.values, lo_vals, side="left")
        hi = np.searchsorted(self.values, lo_vals + (np.int64(1) << shifts), side="left")
        return lo, hi

    @cached_property
    def count_ge(self) -> np.ndarray:
        """``count_ge[i, l]`` = number of codes sharing at least ``l`` bits with code ``i``."""
        lo, hi = self.prefix_ranges
        out = np.zeros((self.d, self.nbits + 2), dtype=np.int64)
        out[:, : self.nbits + 1] = hi - lo
        return out

    @cached_property
    def shared_prefix_len(self) -> int:
        return self.nbits - int(self.values[0] ^ self.values[-1]).bit_length()

    def lcp_row(self, i: int) -> np.ndarray:
        return lcp_array(self.values[i], self.values, self.nbits)

    def lcp_matrix(self) -> np.ndarray:
        return lcp_array(self.values[:, None], self.values[None, :], self.nbits)

    # geography ------------------------------------------------------------

    def full_code(self, i: int) -> EncodedLocation:
        return self.prefix.concat(self.locations[i])

    @cached_property
    def centroids(self) -> list[GeoPoint] | None:
        """Cell midpoints, or ``None`` when the codes are not whole quadkeys."""
        total = self.prefix.nbits + self.nbits
        if total % 2 or total == 0:
            return None
        return [centroid(self.full_code(i)) for i in range(self.d)]


def lcp_array(a, b, nbits: int) -> np.ndarray:
    """Vectorised prefix length of int64 codes (exact for ``nbits <= 52``)."""
    x = np.bitwise_xor(a, b).astype(np.float64)
    _, exp = np.frexp(x)  # exp == bit_length for positive integers
    return nbits - exp.astype(np.int64)


def snap_to_domain(domain: LocationDomain, code: EncodedLocation) -> int:
    """Rank of the domain cell sharing the longest prefix with ``code``.

    ``code`` is either a full code (prefix included) or a domain-length code.
    Ties go to the geographically closest cell when cells are quadkeys, then to
    the lower rank.
    """
    if code.nbits == domain.nbits:
        value, nbits, values = code.value, domain.nbits, [int(v) for v in domain.values]
    elif code.nbits == domain.prefix.nbits + domain.nbits:
        nbits = code.nbits
        value = code.value
        head = domain.prefix.value << domain.nbits
        values = [head | int(v) for v in domain.values]
    else:
        raise DomainError(f"cannot snap a {code.nbits}-bit code onto a {domain.nbits}-bit domain")
    lcp = np.array([nbits - (value ^ v).bit_length() for v in values])
    best = np.flatnonzero(lcp == lcp.max())
    if len(best) == 1 or domain.centroids is None or nbits % 2:
        return int(best[0])
    target = centroid(code if nbits == domain.prefix.nbits + domain.nbits else domain.prefix.concat(code))
    cells = domain.centroids
    dist = [(cells[i].lat - target.lat) ** 2 + (cells[i].lon - target.lon) ** 2 for i in best]
    return int(best[int(np.argmin(dist))])


def build_domain(locations: Sequence[EncodedLocation], prefix: EncodedLocation | None = None) -> LocationDomain:
    return LocationDomain(locations, prefix)


def lcp_histogram(domain: LocationDomain, x: EncodedLocation) -> np.ndarray:
    """Counts ``n[l]`` of domain codes whose prefix shared with ``x`` is exactly ``l`` bits."""
    i = domain.rank(x)
    ge = domain.count_ge[i]
    return ge[:-1] - ge[1:]


@dataclass(frozen=True)
class GroupPartition:
    """Groups ``G_1(x) .. G_m(x)`` defined by prefix-length thresholds ``beta``.

    ``y`` belongs to group ``j`` when ``beta[j] <= lcp(x, y) < beta[j-1]``.
    Group ``j`` is the trie node ``ranges[j]`` minus the node ``ranges[j-1]``,
    so membership is never materialised.
    """

    x: int
    beta: tuple[int, ...]
    sizes: tuple[int, ...]
    ranges: tuple[tuple[int, int], ...] = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.beta)

    def members(self, j: int) -> np.ndarray:
        lo, hi = self.ranges[j]
        if j == 0:
            return np.arange(lo, hi)
        ilo, ihi = self.ranges[j - 1]
        return np.concatenate([np.arange(lo, ilo), np.arange(ihi, hi)])

    def group_of(self, y: int) -> int:
        for j, (lo, hi) in enumerate(self.ranges):
            if lo <= y < hi:
                return j
        raise DomainError(f"index {y} is not covered by the partition")


def partition(domain: LocationDomain, x: EncodedLocation | int, beta: Sequence[int]) -> GroupPartition:
    i = x if isinstance(x, (int, np.integer)) else domain.rank(x)
    i = int(i)
    beta = tuple(int(b) for b in beta)
    if len(beta) < 2:
        raise DomainError("a partition needs at least two groups")
    if any(b1 <= b2 for b1, b2 in zip(beta, beta[1:])):
        raise DomainError(f"beta must be strictly decreasing, got {beta}")
    if beta[-1] < 0 or beta[0] > domain.nbits:
        raise DomainError(f"beta values must lie in [0, {domain.nbits}]")
    ge = domain.count_ge[i]
    lo, hi = domain.prefix_ranges
    if ge[beta[-1]] != domain.d:
        raise DomainError(f"beta_m={beta[-1]} leaves {domain.d - ge[beta[-1]]} locations uncovered")
    sizes = []
    prev = 0
    for b in beta:
        s = int(ge[b]) - prev
        if s <= 0:
            raise DomainError(f"group with threshold {b} is empty for beta={beta}")
        sizes.append(s)
        prev = int(ge[b])
    ranges = tuple((int(lo[i, b]), int(hi[i, b])) for b in beta)
    return GroupPartition(i, beta, tuple(sizes), ranges)


# --- threshold optimisation --------------------------------------------------

EXHAUSTIVE_LIMIT = 10**6


def candidate_thresholds(domain: LocationDomain) -> tuple[int, list[int]]:
    """Floor threshold (covers everything) and even candidates above it, descending."""
    floor = domain.shared_prefix_len
    floor -= floor % 2
    cands = [t for t in range(domain.nbits, floor, -1) if t % 2 == 0]
    return floor, cands


def staircase_alphas(sizes: np.ndarray, c: float, d: int) -> np.ndarray:
    """Vectorised probability levels for group sizes of shape ``(..., m)``."""
    m = sizes.shape[-1]
    j = np.arange(m)
    w = (sizes[..., 1:] * j[1:]).sum(axis=-1)
    denom = (m - 1) * d * c - (c - 1.0) * w
    a_min = (m - 1) / denom
    delta = a_min * (c - 1.0) / (m - 1)
    return (c * a_min)[..., None] - j * delta[..., None]


def weighted_prefix_objective(sizes: np.ndarray, lcp_sums: np.ndarray, c: float, d: int) -> np.ndarray:
    """Expected shared-prefix length of the output, ``sum_j alpha_j * sum_{y in G_j} lcp``."""
    return (staircase_alphas(sizes, c, d) * lcp_sums).sum(axis=-1)


@lru_cache(maxsize=64)
def _combos(n: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.combinations(range(n), k)), dtype=np.int64).reshape(-1, k)


def _stats(domain: LocationDomain, rows: np.ndarray, cands: list[int]):
    """Cumulative counts and prefix-length sums at each candidate threshold."""
    ge = domain.count_ge[rows]  # (r, nbits + 2)
    hist = ge[:, :-1] - ge[:, 1:]
    lsum_ge = np.cumsum((hist * np.arange(domain.nbits + 1))[:, ::-1], axis=1)[:, ::-1]
    idx = np.asarray(cands, dtype=np.int64)
    return ge[:, idx].astype(np.float64), lsum_ge[:, idx].astype(np.float64)


def _groups_from_cum(cum: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Per-group amounts from cumulative amounts at thresholds t_1 > ... > t_{m-1}."""
    inner = np.diff(cum, axis=-1, prepend=0.0)
    last = total[..., None] - cum[..., -1:]
    return np.concatenate([inner, last], axis=-1)


def _check_m(m: int) -> None:
    if m < 2:
        raise DomainError("m must be at least 2")


def count_candidates(domain: LocationDomain, m: int, isolate_input: bool = False) -> int:
    _, cands = candidate_thresholds(domain)
    if isolate_input:
        return math.comb(len(cands) - 1, m - 2) if cands and cands[0] == domain.nbits else 0
    return math.comb(len(cands), m - 1)


def max_feasible_m(domain: LocationDomain) -> int:
    """Largest m for which every input has a feasible threshold vector."""
    _, cands = candidate_thresholds(domain)
    cum, _ = _stats(domain, np.arange(domain.d), cands)
    # distinct non-empty strata per input, plus the floor group
    strata = (np.diff(np.concatenate([np.zeros((domain.d, 1)), cum], axis=1), axis=1) > 0).sum(axis=1)
    has_rest = cum[:, -1] < domain.d
    return int((strata + has_rest).min())


def optimize_beta(
    domain: LocationDomain,
    x: EncodedLocation | int,
    m: int,
    c: float,
    method: str = "auto",
    isolate_input: bool = False,
    seed: int = 0,
) -> GroupPartition:
    """Feasible thresholds maximising the expected shared-prefix length of the output."""
    i = int(x) if isinstance(x, (int, np.integer)) else domain.rank(x)
    if method == "auto":
        method = "exhaustive" if count_candidates(domain, m, isolate_input) <= EXHAUSTIVE_LIMIT else "anneal"
    if method == "exhaustive":
        return optimize_all(domain, m, c, isolate_input=isolate_input, rows=np.array([i]))[0]
    if method == "anneal":
        beta, _ = anneal_beta(domain, i, m, c, isolate_input=isolate_input, seed=seed)
        return partition(domain, i, beta)
    raise ValueError(f"unknown method {method!r}")


def optimize_all(
    domain: LocationDomain,
    m: int,
    c: float,
    isolate_input: bool = False,
    rows: np.ndarray | None = None,
    chunk_cells: int = 4_000_000,
) -> list[GroupPartition]:
    """Exhaustive threshold search for every input (or the given rows)."""
    _check_m(m)
    floor, cands = candidate_thresholds(domain)
    if isolate_input:
        if not cands or cands[0] != domain.nbits:
            raise InfeasiblePartition("isolating the input needs an even code length")
        fixed, free = [0], list(range(1, len(cands)))
    else:
        fixed, free = [], list(range(len(cands)))
    k = m - 1 - len(fixed)
    if k < 0 or k > len(free):
        raise InfeasiblePartition(
            f"m={m} needs {m - 1} thresholds above {floor} but only {len(cands)} exist; lower m"
        )
    picks = _combos(len(free), k)
    combos = np.concatenate(
        [np.tile(np.asarray(fixed, dtype=np.int64), (len(picks), 1)), np.asarray(free, dtype=np.int64)[picks]],
        axis=1,
    )
    rows = np.arange(domain.d) if rows is None else np.asarray(rows)
    d = domain.d
    out: list[GroupPartition] = []
    step = max(1, chunk_cells // max(1, len(combos) * m))
    for start in range(0, len(rows), step):
        sel = rows[start : start + step]
        cum, lsum = _stats(domain, sel, cands)
        total_n = np.full(len(sel), float(d))
        hist_sum = (domain.count_ge[sel, :-1] - domain.count_ge[sel, 1:]) * np.arange(domain.nbits + 1)
        total_l = hist_sum.sum(axis=1).astype(np.float64)
        sizes = _groups_from_cum(cum[:, combos], total_n[:, None])
        sums = _groups_from_cum(lsum[:, combos], total_l[:, None])
        feasible = (sizes >= 1).all(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            obj = weighted_prefix_objective(sizes, sums, c, d)
        obj = np.where(feasible, obj, -np.inf)
        best = obj.argmax(axis=1)
        for pos, (r, b) in enumerate(zip(sel, best)):
            if not np.isfinite(obj[pos, b]):
                raise InfeasiblePartition(
                    f"input {int(r)} has fewer than {m} non-empty prefix strata; lower m"
                )
            beta = tuple(cands[t] for t in combos[b]) + (floor,)
            out.append(partition(domain, int(r), beta))
    return out


def anneal_beta(
    domain: LocationDomain,
    x: int,
    m: int,
    c: float,
    isolate_input: bool = False,
    seed: int = 0,
    t0: float = 1.0,
    ratio: float = 0.95,
    iters_per_temp: int = 200,
    t_min: float = 1e-4,
    trace: bool = False,
):
    """Simulated annealing over threshold vectors.

    A move shifts one threshold by one tile level (two bits); a move that breaks
    strict ordering pushes the neighbouring thresholds along when possible.
    Returns ``(beta, objective)`` or, with ``trace``, also the objective of
    every accepted state.
    """
    _check_m(m)
    floor, cands = candidate_thresholds(domain)
    n = len(cands)
    if m - 1 > n:
        raise InfeasiblePartition(f"m={m} exceeds the available prefix strata; lower m")
    cum, lsum = _stats(domain, np.array([x]), cands)
    cum, lsum = cum[0], lsum[0]
    hist = domain.count_ge[x, :-1] - domain.count_ge[x, 1:]
    total_l = float((hist * np.arange(domain.nbits + 1)).sum())
    d = domain.d
    lo_pos = 1 if isolate_input else 0

    def score(state: tuple[int, ...]) -> float:
        idx = np.asarray(state)
        sizes = _groups_from_cum(cum[idx][None], np.array([float(d)]))
        if (sizes < 1).any():
            return -math.inf
        sums = _groups_from_cum(lsum[idx][None], np.array([total_l]))
        return float(weighted_prefix_objective(sizes, sums, c, d)[0])

    rng = np.random.default_rng(seed)
    # start from the feasible vector that takes the deepest non-empty strata
    nonempty = [t for t in range(n) if cum[t] > (cum[t - 1] if t else 0)]
    state = None
    if isolate_input:
        rest = [t for t in nonempty if t > 0]
        if len(rest) >= m - 2:
            state = (0,) + tuple(rest[: m - 2])
    elif len(nonempty) >= m - 1:
        state = tuple(nonempty[: m - 1])
    if state is None or not math.isfinite(score(state)):
        raise InfeasiblePartition(f"input {x} has fewer than {m} non-empty prefix strata; lower m")
    cur = score(state)
    best_state, best = state, cur
    accepted = [cur]
    temp = t0
    while temp > t_min:
        for _ in range(iters_per_temp):
            k = int(rng.integers(lo_pos, m - 1)) if m - 1 > lo_pos else None
            if k is None:
                break
            step = 1 if rng.random() < 0.5 else -1
            cand = list(state)
            cand[k] += step
            # repair ordering by pushing neighbours in the same direction
            for j in range(k + 1, m - 1):
                if cand[j] <= cand[j - 1]:
                    cand[j] = cand[j - 1] + 1
            for j in range(k - 1, lo_pos - 1, -1):
                if cand[j] >= cand[j + 1]:
                    cand[j] = cand[j + 1] - 1
            if cand[lo_pos] < lo_pos or cand[-1] >= n:
                continue
            new_state = tuple(cand)
            val = score(new_state)
            if not math.isfinite(val):
                continue
            if val >= cur or rng.random() < math.exp((val - cur) / temp):
                state, cur = new_state, val
                accepted.append(cur)
                if cur > best:
                    best_state, best = state, cur
        temp *= ratio
    beta = tuple(cands[t] for t in best_state) + (floor,)
    if trace:
        return beta, best, accepted
    return beta, best
