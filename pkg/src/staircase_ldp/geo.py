"""Hierarchical quadkey encoding of geographic coordinates.

Locations are encoded with the Bing Maps tile system: the Web-Mercator plane
is split recursively into four children per level, and each level contributes
a 2-bit digit ``row * 2 + col``.  The resulting bit string is stored most
significant level first, so the length of the common prefix of two codes
measures how deep in the hierarchy the two cells still share a tile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

MAX_LEVEL = 23
MAX_LATITUDE = 85.05112878
MIN_LATITUDE = -85.05112878
EARTH_RADIUS_M = 6378137.0


class EncodingError(ValueError):
    """Raised for invalid coordinates, levels or bit strings."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise EncodingError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise EncodingError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise EncodingError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True, order=True)
class EncodedLocation:
    """A fixed-length bit string, held as an integer plus its bit count.

    Ordering is lexicographic on the bits, which for equal lengths is the
    integer ordering.  Codes produced by :func:`encode` have ``nbits == 2 * level``;
    shortened codes (after :func:`strip_common_prefix`) may have any length.
    """

    nbits: int
    value: int

    def __post_init__(self) -> None:
        if self.nbits < 0:
            raise EncodingError("negative bit length")
        if self.value < 0 or self.value >> self.nbits:
            raise EncodingError(f"value {self.value} does not fit in {self.nbits} bits")

    @property
    def level(self) -> int:
        return self.nbits // 2

    @property
    def bits(self) -> str:
        return format(self.value, f"0{self.nbits}b") if self.nbits else ""

    def hex(self) -> str:
        """Big-endian hex, left-padded with zero bits to whole nibbles."""
        if self.nbits == 0:
            return ""
        width = (self.nbits + 3) // 4
        return format(self.value, f"0{width}x")

    def prefix(self, length: int) -> "EncodedLocation":
        if not 0 <= length <= self.nbits:
            raise EncodingError(f"prefix length {length} outside [0, {self.nbits}]")
        return EncodedLocation(length, self.value >> (self.nbits - length))

    def concat(self, other: "EncodedLocation") -> "EncodedLocation":
        return EncodedLocation(self.nbits + other.nbits, (self.value << other.nbits) | other.value)

    @classmethod
    def from_bits(cls, bits: str) -> "EncodedLocation":
        if any(ch not in "01" for ch in bits):
            raise EncodingError(f"not a bit string: {bits!r}")
        return cls(len(bits), int(bits, 2) if bits else 0)

    @classmethod
    def from_hex(cls, text: str, nbits: int) -> "EncodedLocation":
        text = text.strip()
        try:
            value = int(text, 16)
        except ValueError:
            raise EncodingError(f"not a hex string: {text!r}") from None
        return cls(nbits, value)

    def __str__(self) -> str:
        return self.bits


def tile_xy(point: GeoPoint, level: int) -> tuple[int, int]:
    """Tile column/row of ``point`` at ``level`` in the Web-Mercator tile grid."""
    _check_level(level)
    if not MIN_LATITUDE <= point.lat <= MAX_LATITUDE:
        raise EncodingError(
            f"latitude {point.lat} outside the Web-Mercator range +/-{MAX_LATITUDE}"
        )
    x = (point.lon + 180.0) / 360.0
    sin_lat = math.sin(math.radians(point.lat))
    y = 0.5 - math.log((1.0 + sin_lat) / (1.0 - sin_lat)) / (4.0 * math.pi)
    n = 1 << level
    # pixel-space rounding of the reference implementation (256 px tiles)
    map_size = 256 * n
    px = min(max(x * map_size + 0.5, 0.0), map_size - 1.0)
    py = min(max(y * map_size + 0.5, 0.0), map_size - 1.0)
    return int(px) // 256, int(py) // 256


def encode_tile(tx: int, ty: int, level: int) -> EncodedLocation:
    _check_level(level, upper=62)
    value = 0
    for i in range(level - 1, -1, -1):
        digit = ((ty >> i) & 1) << 1 | ((tx >> i) & 1)
        value = (value << 2) | digit
    return EncodedLocation(2 * level, value)


def encode(point: GeoPoint, level: int) -> EncodedLocation:
    """Quadkey of ``point`` at ``level`` as a ``2 * level`` bit string."""
    tx, ty = tile_xy(point, level)
    return encode_tile(tx, ty, level)


def decode_tile(code: EncodedLocation) -> tuple[int, int, int]:
    """Inverse of :func:`encode_tile`; returns ``(tx, ty, level)``."""
    if code.nbits % 2:
        raise EncodingError("only whole-level codes can be decoded")
    tx = ty = 0
    for i in range(code.level - 1, -1, -1):
        digit = (code.value >> (2 * i)) & 3
        tx = (tx << 1) | (digit & 1)
        ty = (ty << 1) | (digit >> 1)
    return tx, ty, code.level


def centroid(code: EncodedLocation) -> GeoPoint:
    """Geographic midpoint of the tile addressed by a whole-level code."""
    tx, ty, level = decode_tile(code)
    n = float(1 << level)
    lon = (tx + 0.5) / n * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * (ty + 0.5) / n))))
    return GeoPoint(lat, lon)


def lcp_len(a: EncodedLocation, b: EncodedLocation) -> int:
    """Length in bits of the longest common prefix of two equal-length codes."""
    if a.nbits != b.nbits:
        raise EncodingError(f"cannot compare codes of {a.nbits} and {b.nbits} bits")
    return a.nbits - (a.value ^ b.value).bit_length()


def strip_common_prefix(
    codes: Sequence[EncodedLocation], align: int = 1
) -> tuple[int, list[EncodedLocation]]:
    """Remove the prefix shared by every code.

    ``align`` rounds the removed length down to a multiple (use 2 to keep whole
    tile levels).  Pairwise prefix lengths all drop by the returned amount.
    """
    if not codes:
        raise EncodingError("empty location list")
    nbits = codes[0].nbits
    if any(c.nbits != nbits for c in codes):
        raise EncodingError("mixed code lengths")
    shared = nbits
    first = codes[0]
    for c in codes[1:]:
        shared = min(shared, lcp_len(first, c))
    shared -= shared % align
    rest = nbits - shared
    mask = (1 << rest) - 1
    return shared, [EncodedLocation(rest, c.value & mask) for c in codes]


def local_xy_m(points: Iterable[GeoPoint], origin: GeoPoint | None = None) -> list[tuple[float, float]]:
    """Equirectangular projection to metres around ``origin`` (default: first point)."""
    pts = list(points)
    if not pts:
        return []
    ref = origin or pts[0]
    k = math.cos(math.radians(ref.lat))
    out = []
    for p in pts:
        x = math.radians(p.lon - ref.lon) * k * EARTH_RADIUS_M
        y = math.radians(p.lat - ref.lat) * EARTH_RADIUS_M
        out.append((x, y))
    return out


def _check_level(level: int, upper: int = MAX_LEVEL) -> None:
    if not isinstance(level, int) or not 1 <= level <= upper:
        raise EncodingError(f"level must be an integer in [1, {upper}], got {level!r}")
