import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adcount.errors import (
    IncompatibleSketchError,
    InvalidParameterError,
    MalformedHeaderError,
    TruncatedPayloadError,
)
from adcount.sketch import (
    HEADER_SIZE,
    CountMinSketch,
    SketchParams,
    deserialize,
    merge,
    new_sketch,
    serialize,
    sketch_dimensions,
)

ids64 = st.integers(min_value=0, max_value=2**64 - 1)


@pytest.mark.parametrize(
    "capacity, depth, payload",
    [(10_000, 17, 184_892), (50_000, 18, 195_768), (100_000, 19, 206_644)],
)
def test_dimensions_reproduce_reported_sizes(capacity, depth, payload):
    params = SketchParams(0.001, 0.001, capacity)
    assert (params.depth, params.width) == (depth, 2719)
    assert params.payload_bytes == payload
    assert round(payload / 1000) in (185, 196, 207)


def test_dimensions_use_natural_log():
    # ln(1e7) = 16.1 -> 17 rows; log2 would give 24
    assert sketch_dimensions(0.001, 0.001, 10_000) == (17, 2719)


def test_tiny_sketch_is_empty():
    s = new_sketch(0.9, 0.9, 1)
    assert (s.params.depth, s.params.width) == (1, 4)
    assert all(s.query(i) == 0 for i in range(100))


@pytest.mark.parametrize(
    "eps, delta, cap",
    [(0.0, 0.1, 10), (1.0, 0.1, 10), (0.1, 0.0, 10), (0.1, 1.5, 10), (0.1, 0.1, 0), (0.1, 0.1, -3)],
)
def test_invalid_parameters(eps, delta, cap):
    with pytest.raises(InvalidParameterError):
        new_sketch(eps, delta, cap)


def test_single_and_repeated_updates():
    s = new_sketch(0.001, 0.001)
    s.update(42)
    assert s.query(42) == 1
    for _ in range(6):
        s.update(42)
    assert s.query(42) == 7
    assert s.total == 7


def test_scalar_and_vector_paths_agree():
    s = new_sketch(0.01, 0.01, 1000, seed=99)
    items = [0, 1, 2**64 - 1, 12345678901234567890, 7]
    cols = s.columns_many(items)
    for k, item in enumerate(items):
        assert list(cols[:, k]) == s._columns(item)
    a, b = s.copy(), s.copy()
    for item in items * 3:
        a.update(item)
    b.update_many(items * 3)
    assert a == b
    assert list(a.query_many(items)) == [a.query(i) for i in items]


def test_bounds_against_exact_counter():
    rng = random.Random(1)
    stream = [rng.randrange(1, 10_001) for _ in range(1000)]
    exact = Counter(stream)
    s = new_sketch(0.001, 0.001)
    s.update_many(stream)
    space = np.arange(1, 10_001)
    est = s.query_many(space)
    truth = np.array([exact[i] for i in space])
    assert (est >= truth).all()
    slack = math.ceil(0.001 * len(stream))
    assert np.mean(est <= truth + slack) >= 0.999


def test_lower_bound_is_deterministic_over_10k_stream():
    rng = np.random.default_rng(3)
    stream = rng.zipf(1.3, 10_000) % 5000
    s = new_sketch(0.001, 0.001)
    s.update_many(stream.astype(np.uint64))
    exact = Counter(stream.tolist())
    ids = np.array(sorted(exact), dtype=np.uint64)
    est = s.query_many(ids)
    assert all(int(e) >= exact[int(i)] for e, i in zip(est, ids))


def test_unseen_ids_bounded_by_epsilon_total():
    rng = random.Random(5)
    s = new_sketch(0.001, 0.001)
    inserted = rng.sample(range(1, 10**6), 3000)
    s.update_many(inserted)
    unseen = [i for i in range(10**6 + 1, 10**6 + 5001)]
    est = s.query_many(unseen)
    assert np.mean(est == 0) > 0.99
    assert np.mean(est <= 0.001 * s.total) >= 1 - 0.001


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 200), max_size=300), ids64)
def test_never_underestimates(stream, seed):
    # a narrow sketch forces collisions
    s = CountMinSketch(SketchParams(0.3, 0.2, 10, seed=seed))
    s.update_many(stream)
    exact = Counter(stream)
    for item in set(stream) | {999}:
        assert s.query(item) >= exact[item]
    assert s.total == len(stream)


def test_cells_never_exceed_update_count():
    s = new_sketch(0.05, 0.01, 100)
    s.update_many(range(500))
    assert s.cells.max() <= 500
    assert all(int(row.sum()) == 500 for row in s.cells)


def test_merge_identity_and_mismatch():
    s = new_sketch(0.01, 0.01, 100, seed=1)
    s.update_many([1, 2, 3, 3])
    assert merge(s, new_sketch(0.01, 0.01, 100, seed=1)) == s
    with pytest.raises(IncompatibleSketchError):
        merge(s, new_sketch(0.01, 0.01, 100, seed=2))
    with pytest.raises(IncompatibleSketchError):
        merge(s, new_sketch(0.02, 0.01, 100, seed=1))


def test_merge_equals_concatenated_stream():
    rng = random.Random(11)
    params = SketchParams(0.01, 0.01, 1000, seed=4)
    for _ in range(100):
        s1 = [rng.randrange(2**64) for _ in range(rng.randrange(50))]
        s2 = [rng.randrange(200) for _ in range(rng.randrange(50))]
        a, b, both = CountMinSketch(params), CountMinSketch(params), CountMinSketch(params)
        a.update_many(s1)
        b.update_many(s2)
        both.update_many(s1 + s2)
        assert np.array_equal(merge(a, b).cells, both.cells)


def test_merge_wraps_mod_2_32():
    params = SketchParams(0.5, 0.5, 1)
    a = CountMinSketch(params, np.full(params.cell_count, 2**32 - 1, dtype=np.uint32))
    b = CountMinSketch(params, np.full(params.cell_count, 2, dtype=np.uint32))
    assert (merge(a, b).cells == 1).all()


def test_serialization_round_trip():
    rng = np.random.default_rng(0)
    params = SketchParams(0.001, 0.001, 50_000, seed=2**63 + 5)
    s = CountMinSketch(params, rng.integers(0, 2**32, params.cell_count, dtype=np.uint32))
    data = serialize(s)
    assert len(data) == HEADER_SIZE + 195_768
    assert deserialize(data) == s


def test_header_layout_is_little_endian():
    s = new_sketch(0.5, 0.5, 3, seed=0x0102030405060708)
    s.update(1)
    data = serialize(s)
    assert data[:4] == b"CMSK"
    assert data[4:6] == b"\x01\x00"
    assert data[40:48] == bytes([8, 7, 6, 5, 4, 3, 2, 1])
    depth, width = s.params.depth, s.params.width
    assert int.from_bytes(data[32:36], "little") == depth
    assert int.from_bytes(data[36:40], "little") == width


def test_deserialize_errors():
    s = new_sketch(0.1, 0.1, 10)
    data = serialize(s)
    with pytest.raises(TruncatedPayloadError):
        deserialize(data[:-1])
    with pytest.raises(TruncatedPayloadError):
        deserialize(data[:20])
    with pytest.raises(MalformedHeaderError):
        deserialize(b"XXXX" + data[4:])
    with pytest.raises(MalformedHeaderError):
        deserialize(data + b"\x00")
    bad_dims = bytearray(data)
    bad_dims[36] += 1
    with pytest.raises(MalformedHeaderError):
        deserialize(bytes(bad_dims))


@pytest.mark.parametrize("eps, pairs", [(0.05, 200_000), (0.001, 1_000_000)])
def test_row_collision_rate_close_to_one_over_width(eps, pairs):
    s = new_sketch(eps, 0.001, 1000, seed=8)
    rng = np.random.default_rng(21)
    items = rng.integers(0, 2**63, 2 * pairs, dtype=np.uint64)
    cols = s.columns_many(items)
    rate = (cols[:, 0::2] == cols[:, 1::2]).mean(axis=1)
    expected = 1 / s.params.width
    assert np.all(np.abs(rate - expected) <= 0.2 * expected)
