import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalegraph.ident import IdSpace


def test_distance_identity():
    space = IdSpace(32)
    rng = random.Random(1)
    for _ in range(50):
        x = space.random_identifier(rng)
        assert space.distance(x, x) == 0


def test_distance_direct_xor():
    space = IdSpace(4)
    assert space.distance(0b0101, 0b0011) == 6


@given(a=st.integers(0, 2**32 - 1), b=st.integers(0, 2**32 - 1))
def test_distance_symmetry(a, b):
    space = IdSpace(32)
    assert space.distance(a, b) == space.distance(b, a)


@given(a=st.integers(0, 2**32 - 1), b=st.integers(0, 2**32 - 1))
def test_distance_zero_iff_equal(a, b):
    space = IdSpace(32)
    assert (space.distance(a, b) == 0) == (a == b)


def test_distance_rejects_out_of_range():
    space = IdSpace(8)
    with pytest.raises(ValueError):
        space.distance(256, 0)


def test_sort_by_distance_hand_case():
    # B=3: distances to 5 are 4^5=1, 1^5=4, 7^5=2
    space = IdSpace(4)
    assert space.sort_by_distance([4, 1, 7], 5) == [4, 7, 1]


def test_sort_by_distance_singleton():
    space = IdSpace(8)
    assert space.sort_by_distance([9], 9) == [9]


def test_sort_by_distance_target_first_when_present():
    space = IdSpace(8)
    rng = random.Random(3)
    ids = space.distinct_identifiers(rng, 40)
    target = ids[17]
    assert space.sort_by_distance(ids, target)[0] == target


@given(st.lists(st.integers(0, 255), min_size=1, max_size=40, unique=True),
       st.integers(0, 255))
@settings(max_examples=200)
def test_sort_by_distance_is_permutation(ids, target):
    space = IdSpace(8)
    out = space.sort_by_distance(ids, target)
    assert sorted(out) == sorted(ids)
    dists = [space.distance(i, target) for i in out]
    assert dists == sorted(dists)


def test_distinct_distances_exhaustive_b8():
    # for a fixed target every id maps to a unique distance
    space = IdSpace(8)
    for target in (0, 1, 127, 255):
        dists = {space.distance(i, target) for i in range(256)}
        assert len(dists) == 256


def test_random_identifier_deterministic():
    space = IdSpace(32)
    a = [space.random_identifier(random.Random(99)) for _ in range(10)]
    b = [space.random_identifier(random.Random(99)) for _ in range(10)]
    assert a == b


def test_random_identifier_seeds_differ():
    space = IdSpace(32)
    a = [space.random_identifier(random.Random(1)) for _ in range(10)]
    b = [space.random_identifier(random.Random(2)) for _ in range(10)]
    assert a != b


def test_random_identifier_uniformity_chi_squared():
    # 2^16 draws into 256 buckets; reject at the 0.001 level
    from scipy.stats import chi2

    space = IdSpace(32)
    rng = random.Random(2024)
    draws = 1 << 16
    buckets = [0] * 256
    for _ in range(draws):
        buckets[space.random_identifier(rng) >> 24] += 1
    expected = draws / 256
    stat = sum((o - expected) ** 2 / expected for o in buckets)
    assert stat < chi2.ppf(0.999, 255)


def test_distinct_identifiers_no_collisions():
    space = IdSpace(8)
    rng = random.Random(5)
    ids = space.distinct_identifiers(rng, 200)
    assert len(set(ids)) == 200
    more = space.distinct_identifiers(rng, 56, exclude=ids)
    assert not (set(more) & set(ids))
    assert len(set(more)) == 56


def test_hex_roundtrip_and_padding():
    space = IdSpace(32)
    assert space.to_hex(0x1A2B) == "00001a2b"
    assert space.from_hex("00001a2b") == 0x1A2B
    space256 = IdSpace(256)
    assert len(space256.to_hex(7)) == 64


def test_bits_must_be_multiple_of_four():
    with pytest.raises(ValueError):
        IdSpace(10)
