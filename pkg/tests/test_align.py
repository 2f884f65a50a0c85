import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivetel.align import (
    align_trips,
    dtw_align,
    read_located,
    transfer_locations,
    write_located,
)
from drivetel.errors import ConfigError
from drivetel.ingest import CanRecord, PhoneRecord

from oracles import brute_dtw_cost


def test_identical_diagonal():
    p = dtw_align([0, 1, 2], [0, 1, 2])
    assert p.pairs == ((0, 0), (1, 1), (2, 2)) and p.total_cost == 0


def test_hand_example_cost_one():
    p = dtw_align([0, 1, 2], [0, 2])
    assert p.total_cost == 1.0 == brute_dtw_cost([0, 1, 2], [0, 2])
    assert p.pairs == ((0, 0), (1, 0), (2, 1))


def test_singleton_forced_path():
    # 0-based indices of the forced path
    assert dtw_align([5.0], [0, 1, 2]).pairs == ((0, 0), (0, 1), (0, 2))


def test_preconditions():
    with pytest.raises(ConfigError):
        dtw_align([], [1.0])
    with pytest.raises(ConfigError):
        dtw_align([0, 2, 1], [0, 1])


def check_path(p, n, m):
    assert p.pairs[0] == (0, 0) and p.pairs[-1] == (n - 1, m - 1)
    for (i0, j0), (i1, j1) in zip(p.pairs, p.pairs[1:]):
        assert (i1 - i0, j1 - j0) in ((1, 0), (0, 1), (1, 1))


def test_exhaustive_small_instances(rng):
    for n in range(1, 7):
        for m in range(1, 7):
            for _ in range(3):
                # multiples of 1/8 keep every partial sum exact
                a = np.sort(rng.integers(0, 160, n)) / 8.0
                b = np.sort(rng.integers(0, 160, m)) / 8.0
                p = dtw_align(a, b)
                check_path(p, n, m)
                assert p.total_cost == brute_dtw_cost(a, b)
                assert p.total_cost == sum(abs(a[i] - b[j]) for i, j in p.pairs)


def test_tie_break_prefers_diagonal_then_a():
    # all paths cost 0; each cell takes its diagonal predecessor when tied,
    # then the one that advanced a
    assert dtw_align([0.0, 0.0, 0.0], [0.0, 0.0]).pairs == ((0, 0), (1, 0), (2, 1))
    assert dtw_align([0.0, 0.0], [0.0, 0.0, 0.0]).pairs == ((0, 0), (0, 1), (1, 2))
    assert dtw_align([0.0, 2.0], [1.0, 1.0]).pairs == ((0, 0), (1, 1))


times = st.lists(st.floats(0, 1000, allow_nan=False), min_size=1, max_size=12).map(sorted)


@settings(max_examples=100, deadline=None)
@given(times)
def test_self_cost_zero(a):
    assert dtw_align(a, a).total_cost == 0


@settings(max_examples=100, deadline=None)
@given(times, times)
def test_cost_symmetric(a, b):
    assert dtw_align(a, b).total_cost == pytest.approx(dtw_align(b, a).total_cost, rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 400), min_size=1, max_size=10).map(sorted),
       st.lists(st.integers(0, 400), min_size=1, max_size=10).map(sorted), st.integers(-1000, 1000))
def test_shift_invariance(a, b, c):
    a, b = np.array(a) / 4.0, np.array(b) / 4.0
    p, q = dtw_align(a, b), dtw_align(a + c, b + c)
    assert p.pairs == q.pairs and p.total_cost == q.total_cost


def test_band_not_binding_on_realistic_streams(rng):
    for _ in range(20):
        T = rng.uniform(60, 300)
        can = np.sort(rng.uniform(0, T, int(3 * T)))
        phone = np.arange(0, T, 1.0)
        full = dtw_align(can, phone)
        banded = dtw_align(can, phone, band_s=30)
        assert banded.total_cost == pytest.approx(full.total_cost, rel=1e-12)


def test_band_stays_connected_across_gap():
    a = np.concatenate([np.arange(0, 10.0), np.arange(200, 210.0)])
    b = np.arange(0, 250.0, 1.0)
    p = dtw_align(a, b, band_s=5)
    check_path(p, len(a), len(b))
    assert np.isfinite(p.total_cost)


def _phone(t, lat):
    return PhoneRecord("t", "d", t, lat, -121.0, 1.0, 0.0, True)


def test_transfer_3hz_to_1hz():
    can = [CanRecord("t", x, "rpm", 800.0, True) for x in (0, 0.33, 0.67, 1.0)]
    phone = [_phone(0.0, 37.0), _phone(1.0, 38.0)]
    path = dtw_align([r.timestamp for r in can], [p.timestamp for p in phone])
    out = transfer_locations(can, phone, path)
    assert [r.latitude for r in out] == [37.0, 37.0, 38.0, 38.0]
    assert len(out) == len(can)


def test_transfer_equal_timestamps_one_to_one():
    can = [CanRecord("t", float(x), "speed", 1.0, True) for x in range(5)]
    phone = [_phone(float(x), 37.0 + x) for x in range(5)]
    out = transfer_locations(can, phone, dtw_align(range(5), range(5)))
    assert [r.latitude for r in out] == [37.0 + x for x in range(5)]
    assert [r.matched_phone_timestamp for r in out] == [0, 1, 2, 3, 4]


def test_align_trips_per_trip_and_unlocated():
    can = [CanRecord("t", 0.0, "rpm", 1, True), CanRecord("u", 0.0, "rpm", 1, False),
           CanRecord("t", 0.2, "speed", 2, True)]
    phone = [_phone(0.0, 37.0), _phone(1.0, 38.0)]
    located, unlocated = align_trips(can, phone)
    assert len(located) == 2 and [r.trip_id for r in unlocated] == ["u"]


def test_located_round_trip(tmp_path):
    can = [CanRecord("t", 0.1, "rpm", 812.5, True)]
    located, _ = align_trips(can, [_phone(0.0, 37.123456789)])
    p = tmp_path / "l.csv"
    write_located(located, p)
    assert read_located(p) == located
