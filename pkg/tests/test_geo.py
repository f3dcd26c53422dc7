import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staircase_ldp.geo import (
    EncodedLocation,
    EncodingError,
    GeoPoint,
    centroid,
    decode_tile,
    encode,
    encode_tile,
    lcp_len,
    strip_common_prefix,
)


def reference_quadkey(lat, lon, level):
    """Textbook tile-system quadkey as a base-4 digit string."""
    lat = min(max(lat, -85.05112878), 85.05112878)
    lon = min(max(lon, -180.0), 180.0)
    x = (lon + 180) / 360
    s = math.sin(lat * math.pi / 180)
    y = 0.5 - math.log((1 + s) / (1 - s)) / (4 * math.pi)
    size = 256 << level
    px = int(min(max(x * size + 0.5, 0), size - 1))
    py = int(min(max(y * size + 0.5, 0), size - 1))
    tx, ty = px // 256, py // 256
    digits = []
    for i in range(level, 0, -1):
        mask = 1 << (i - 1)
        digits.append(str((1 if tx & mask else 0) + (2 if ty & mask else 0)))
    return "".join(digits)


def quadkey_to_bits(qk):
    return "".join(format(int(c), "02b") for c in qk)


def test_new_york_example_hex():
    code = encode(GeoPoint(40.730610, -73.935242), 23)
    assert code.nbits == 46
    # the published string drops the leading zero nibble of the 46-bit value
    assert code.value == 0xE1147B6AFFF
    assert code.hex().lstrip("0") == "e1147b6afff"


def test_new_york_matches_reference_quadkey():
    code = encode(GeoPoint(40.730610, -73.935242), 23)
    assert code.bits == quadkey_to_bits(reference_quadkey(40.730610, -73.935242, 23))


@settings(max_examples=200, deadline=None)
@given(st.floats(-85, 85), st.floats(-180, 179.999), st.integers(1, 23))
def test_encode_agrees_with_reference(lat, lon, level):
    assert encode(GeoPoint(lat, lon), level).bits == quadkey_to_bits(reference_quadkey(lat, lon, level))


def test_root_split_is_stable():
    a = encode(GeoPoint(0.0, 0.0), 1)
    assert a.nbits == 2 and a == encode(GeoPoint(0.0, 0.0), 1)


def test_nearby_points_share_long_prefix():
    p = GeoPoint(41.15, -8.61)
    q = GeoPoint(41.15 + 1.0 / 111_320, -8.61)
    assert lcp_len(encode(p, 23), encode(q, 23)) >= 40


def test_bad_inputs():
    with pytest.raises(EncodingError):
        GeoPoint(91, 0)
    with pytest.raises(EncodingError):
        encode(GeoPoint(0, 0), 0)
    with pytest.raises(EncodingError):
        encode(GeoPoint(0, 0), 24)


def test_lcp_trivial_cases():
    a = EncodedLocation.from_bits("0110")
    b = EncodedLocation.from_bits("0101")
    assert lcp_len(a, b) == 2
    assert lcp_len(a, a) == 4


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, 2**n - 1), st.integers(0, 2**n - 1))))
def test_lcp_matches_naive_scan(args):
    n, u, v = args
    a, b = EncodedLocation(n, u), EncodedLocation(n, v)
    naive = 0
    for x, y in zip(a.bits, b.bits):
        if x != y:
            break
        naive += 1
    assert lcp_len(a, b) == naive


def test_strip_common_prefix_trivial():
    shared, rest = strip_common_prefix([EncodedLocation.from_bits("0011"), EncodedLocation.from_bits("0010")])
    assert shared == 3 and [r.bits for r in rest] == ["1", "0"]
    shared, rest = strip_common_prefix([EncodedLocation.from_bits("0110")])
    assert shared == 4 and rest[0].nbits == 0


@given(st.integers(1, 23), st.data())
def test_tile_round_trip(level, data):
    tx = data.draw(st.integers(0, 2**level - 1))
    ty = data.draw(st.integers(0, 2**level - 1))
    code = encode_tile(tx, ty, level)
    assert decode_tile(code) == (tx, ty, level)
    c = centroid(code)
    assert encode(c, level) == code


def test_hex_and_bits_round_trip():
    rng = np.random.default_rng(3)
    for n in (1, 7, 26, 46):
        v = int(rng.integers(0, 2**n))
        e = EncodedLocation(n, v)
        assert EncodedLocation.from_bits(e.bits) == e
        assert EncodedLocation.from_hex(e.hex(), n) == e
