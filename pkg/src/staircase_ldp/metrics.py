"""Distances between distributions and k-nearest-neighbour list comparisons."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geo import local_xy_m

KL_SMOOTHING = 1e-10


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def l1(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.abs(p - q).sum())


def l2(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.sqrt(((p - q) ** 2).sum()))


def kl(p, q) -> float:
    """``sum p ln(p / q)`` after adding ``KL_SMOOTHING`` to both and renormalising."""
    p, q = _pair(p, q)
    p = (p + KL_SMOOTHING) / (p + KL_SMOOTHING).sum()
    q = (q + KL_SMOOTHING) / (q + KL_SMOOTHING).sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


# --- k nearest neighbours ------------------------------------------------------------


def populations(p, n: int) -> np.ndarray:
    """Integer user counts summing to ``n`` (largest-remainder rounding of ``p * n``)."""
    p = np.asarray(p, dtype=np.float64)
    p = np.clip(p, 0, None)
    p = p / p.sum()
    exact = p * n
    base = np.floor(exact).astype(np.int64)
    short = n - int(base.sum())
    if short > 0:
        frac = exact - base
        order = np.lexsort((np.arange(len(p)), -frac))
        base[order[:short]] += 1
    return base


@dataclass
class KnnLists:
    queries: np.ndarray
    sets: list[frozenset]
    centroids: np.ndarray = field(repr=False)


def cell_coordinates(domain) -> np.ndarray:
    """Cell midpoints in local metres."""
    pts = domain.centroids
    if pts is None:
        raise ValueError("domain codes are not whole quadkeys; pass coordinates explicitly")
    return np.asarray(local_xy_m(pts, origin=pts[0]))


def knn_lists(coords, distribution, k: int, n: int, queries=None) -> KnnLists:
    """Neighbour lists for a user standing in each query cell.

    Users sit at cell coordinates with counts from :func:`populations`.  The
    ``k`` nearest other users are taken in distance order (ties by cell
    index), spilling into farther cells as needed.  A list is the set of cells
    other than the query cell that contribute to those ``k`` users; its
    centroid is the mean of the ``k`` users' coordinates.
    """
    coords = np.asarray(coords, dtype=np.float64)
    pop = populations(distribution, n)
    if queries is None:
        queries = np.flatnonzero(pop > 0)
    queries = np.asarray(queries, dtype=np.int64)
    if k < 1 or k >= n:
        raise ValueError("need 1 <= k < population")
    dist = np.linalg.norm(coords[queries, None, :] - coords[None, :, :], axis=-1)
    order = np.argsort(dist, axis=1, kind="stable")
    counts = pop[order].copy()
    # the querying user occupies one slot of its own cell
    own = order == queries[:, None]
    counts[own] = np.maximum(counts[own] - 1, 0)
    cum = np.cumsum(counts, axis=1)
    last = np.argmax(cum >= k, axis=1)
    sets, cents = [], np.empty((len(queries), 2))
    for r, q in enumerate(queries):
        cells = order[r, : last[r] + 1]
        take = counts[r, : last[r] + 1].astype(np.float64)
        take[-1] -= cum[r, last[r]] - k
        sets.append(frozenset(int(c) for c, t in zip(cells, take) if t > 0 and c != q))
        cents[r] = (take[:, None] * coords[cells]).sum(axis=0) / k
    return KnnLists(queries, sets, cents)


def knn_compare(true_lists: KnnLists, est_lists: KnnLists, weights=None, diagonal: float = 1.0) -> tuple[float, float, float]:
    """Weighted set precision, recall and centroid MSE normalised by ``diagonal**2``."""
    if not np.array_equal(true_lists.queries, est_lists.queries):
        raise ValueError("lists must be built for the same query cells")
    w = np.ones(len(true_lists.queries)) if weights is None else np.asarray(weights, dtype=np.float64)
    prec = np.empty(len(w))
    rec = np.empty(len(w))
    for r, (t, e) in enumerate(zip(true_lists.sets, est_lists.sets)):
        hit = len(t & e)
        prec[r] = hit / len(e) if e else float(not t)
        rec[r] = hit / len(t) if t else float(not e)
    err = ((true_lists.centroids - est_lists.centroids) ** 2).sum(axis=1) / diagonal**2
    ws = w.sum()
    return float(w @ prec / ws), float(w @ rec / ws), float(w @ err / ws)


def knn_scores(coords, p_true, p_est, k: int, n: int) -> tuple[float, float, float]:
    coords = np.asarray(coords, dtype=np.float64)
    pop = populations(p_true, n)
    queries = np.flatnonzero(pop > 0)
    t = knn_lists(coords, p_true, k, n, queries)
    e = knn_lists(coords, p_est, k, n, queries)
    span = coords.max(axis=0) - coords.min(axis=0)
    diag = float(np.hypot(*span)) or 1.0
    return knn_compare(t, e, pop[queries], diag)


# --- reports ---------------------------------------------------------------------------

REPORT_FIELDS = ["mechanism", "epsilon", "n", "seed", "l1", "l2", "kl", "knn_k", "precision", "recall", "mse"]


@dataclass
class MetricReport:
    mechanism: str
    epsilon: float
    n: int
    seed: int
    l1: float
    l2: float
    kl: float
    knn_k: int = 0
    precision: float = math.nan
    recall: float = math.nan
    mse: float = math.nan


def score(p_true, p_est, mechanism: str, epsilon: float, n: int, seed: int) -> MetricReport:
    return MetricReport(mechanism, epsilon, n, seed, l1(p_true, p_est), l2(p_true, p_est), kl(p_true, p_est))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = asdict(r)
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
