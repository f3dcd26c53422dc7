"""Staircase randomized response for location data under local differential privacy."""

from .domain import LocationDomain, build_domain, lcp_histogram, optimize_beta, partition
from .geo import EncodedLocation, GeoPoint, encode, lcp_len, strip_common_prefix
from .mechanism import (
    SchemeTable,
    alphas_from_sizes,
    epsilon_of,
    optimal_m,
    perturb,
    perturb_indices,
    precompute,
    solve_c,
)

__version__ = "0.1.0"

__all__ = [
    "EncodedLocation",
    "GeoPoint",
    "LocationDomain",
    "SchemeTable",
    "alphas_from_sizes",
    "build_domain",
    "encode",
    "epsilon_of",
    "lcp_histogram",
    "lcp_len",
    "optimal_m",
    "optimize_beta",
    "partition",
    "perturb",
    "perturb_indices",
    "precompute",
    "solve_c",
    "strip_common_prefix",
]
