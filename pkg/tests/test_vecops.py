import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from npe_sim import vecops as vo
from oracles import rne, sat

i64 = st.integers(-(1 << 62), (1 << 62) - 1)


@given(st.lists(i64, min_size=1, max_size=16), st.lists(i64, min_size=1, max_size=16), st.sampled_from([16, 32, 64]))
def test_add_sub_saturate(xs, ys, bits):
    n = min(len(xs), len(ys))
    a, b = np.array(xs[:n], dtype=np.int64), np.array(ys[:n], dtype=np.int64)
    assert [int(v) for v in vo.add(a, b, bits)] == [sat(x + y, bits) for x, y in zip(xs, ys)]
    assert [int(v) for v in vo.sub(a, b, bits)] == [sat(x - y, bits) for x, y in zip(xs, ys)]


@given(st.lists(st.integers(-(1 << 31), 1 << 31), min_size=1, max_size=16), st.integers(-(1 << 31), 1 << 31),
       st.integers(0, 40))
def test_mul_oracle(xs, k, s):
    got = vo.mul(np.array(xs, dtype=np.int64), k, s, 32)
    assert [int(v) for v in got] == [sat(rne(x * k, s), 32) for x in xs]


@given(st.lists(st.integers(-(1 << 40), 1 << 40), min_size=1, max_size=16), st.integers(-10, 30))
def test_shift_modes(xs, r):
    a = np.array(xs, dtype=np.int64)
    assert [int(v) for v in vo.shift(a, r, 64)] == [sat(rne(x, r), 64) for x in xs]
    floor = [int(v) for v in vo.shift(a, r, 64, mode="floor")]
    assert floor == [sat(x >> r if r >= 0 else x << -r, 64) for x in xs]


def test_reduce_sum_exact_for_huge_lanes():
    a = np.array([1 << 62, 1 << 62, -(1 << 62)], dtype=np.int64)
    assert vo.reduce_sum(a, 64) == 1 << 62
    assert vo.reduce_sum(np.array([1 << 62] * 3, dtype=np.int64), 64) == (1 << 63) - 1
    assert vo.reduce_sum(np.array([30000, 30000]), 16) == 32767


def test_reduce_max_min_compare_permute():
    a = np.array([3, -7, 12, 0])
    assert vo.reduce_max(a) == 12
    assert vo.vmax(a, 1).tolist() == [3, 1, 12, 1]
    assert vo.vmin(a, 1).tolist() == [1, -7, 1, 0]
    assert vo.compare_ge(a, 0).tolist() == [True, False, True, True]
    assert vo.permute(a, [3, 2, 1, 0]).tolist() == [0, 12, -7, 3]


@given(st.integers(1, (1 << 63) - 1))
def test_leading_one(x):
    assert vo.leading_one(x) == x.bit_length() - 1


@given(st.lists(st.integers(1, (1 << 31) - 1), min_size=1, max_size=20))
def test_leading_one_vector(xs):
    got = vo.leading_one(np.array(xs, dtype=np.int64), 32)
    assert got.tolist() == [x.bit_length() - 1 for x in xs]


def test_recorder_counts_and_nests():
    with vo.record_ops() as outer:
        vo.add(1, 2, 16)
        with vo.record_ops() as inner:
            vo.mul(3, 4, 0, 16)
            vo.reduce_max([1, 2])
        vo.leading_one(5)
    assert dict(inner) == {"mul": 1, "reduce": 1}
    assert dict(outer) == {"add": 1, "find_segment": 1}
    assert set(outer) | set(inner) <= vo.ALLOWED_KINDS


def test_no_recording_outside_context():
    vo.add(1, 1, 16)
    with vo.record_ops() as c:
        pass
    assert not c


def test_unknown_width_rejected():
    with pytest.raises(KeyError):
        vo.add(1, 1, 12)
