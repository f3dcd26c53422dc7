"""Synthetic location domains, truths and trajectories for desk-scale experiments."""

from __future__ import annotations

import math

import numpy as np

from .domain import LocationDomain
from .geo import EncodedLocation, GeoPoint, encode, strip_common_prefix
from .seeding import STREAM_TRUTH, make_rng

PORTO = GeoPoint(41.15, -8.61)
WINDOW_KM = (40.0, 30.0)
LEVEL = 23
KM_PER_DEG_LAT = 111.32


def clustered_points(
    n: int,
    seed: int,
    center: GeoPoint = PORTO,
    window_km: tuple[float, float] = WINDOW_KM,
    clusters: int = 12,
    background: float = 0.15,
) -> list[GeoPoint]:
    """Points inside a ``width x height`` km window, mostly in Gaussian hot spots."""
    rng = make_rng(seed, 7)
    w, h = window_km
    cx = rng.uniform(-w / 2, w / 2, clusters)
    cy = rng.uniform(-h / 2, h / 2, clusters)
    spread = rng.uniform(0.3, 2.0, clusters)
    weight = rng.dirichlet(np.ones(clusters))
    is_bg = rng.random(n) < background
    which = rng.choice(clusters, size=n, p=weight)
    x = np.where(is_bg, rng.uniform(-w / 2, w / 2, n), cx[which] + rng.normal(0, 1, n) * spread[which])
    y = np.where(is_bg, rng.uniform(-h / 2, h / 2, n), cy[which] + rng.normal(0, 1, n) * spread[which])
    x = np.clip(x, -w / 2, w / 2)
    y = np.clip(y, -h / 2, h / 2)
    k_lon = KM_PER_DEG_LAT * math.cos(math.radians(center.lat))
    return [GeoPoint(center.lat + yi / KM_PER_DEG_LAT, center.lon + xi / k_lon) for xi, yi in zip(x, y)]


def synthetic_domain(d: int, seed: int = 0, level: int = LEVEL, **kw) -> LocationDomain:
    """Exactly ``d`` distinct clustered cells at ``level``, common prefix removed."""
    codes: set[EncodedLocation] = set()
    batch = 0
    while len(codes) < d:
        pts = clustered_points(d, seed * 1000 + batch, **kw)
        for p in pts:
            codes.add(encode(p, level))
            if len(codes) == d:
                break
        batch += 1
    ordered = sorted(codes)
    shared, short = strip_common_prefix(ordered, align=2)
    prefix = ordered[0].prefix(shared)
    return LocationDomain(short, prefix=prefix)


def random_domain(d: int, nbits: int, rng: np.random.Generator) -> LocationDomain:
    """``d`` distinct uniformly random codes of ``nbits`` bits."""
    if d > 2**nbits:
        raise ValueError("domain larger than the code space")
    values = rng.choice(2**nbits, size=d, replace=False)
    return LocationDomain(EncodedLocation(nbits, int(v)) for v in values)


def zipf_truth(d: int, s: float = 1.1, seed: int | None = None) -> np.ndarray:
    """Zipf(s) frequencies over domain ranks; with ``seed`` the ranks are shuffled."""
    p = 1.0 / np.arange(1, d + 1) ** s
    p /= p.sum()
    if seed is None:
        return p
    perm = make_rng(seed, STREAM_TRUTH).permutation(d)
    return p[perm]


def uniform_truth(d: int) -> np.ndarray:
    return np.full(d, 1.0 / d)


def sample_users(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` users' true locations, returned as domain indices."""
    return rng.choice(len(p), size=n, p=p)
