import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sst

from drivetel.errors import ConfigError, NumericalError
from drivetel.stats import (
    TINY,
    GroupedSamples,
    SegmentRow,
    ecdf,
    format_can_row,
    format_interval,
    format_means_row,
    format_segment_row,
    group_means,
    histogram,
    ks_one_sided,
    ks_pvalue,
    ks_statistics,
    ks_test,
    MeansRow,
    per_segment_tests,
    split_by_sign,
    t_cdf,
    t_ppf,
    welch_interval,
    welch_one_sided,
    welch_test,
)

from oracles import brute_ks


def test_split_by_sign():
    pos, neg, z = split_by_sign([0.5, -0.3, 0])
    assert pos.tolist() == [0.5] and neg.tolist() == [-0.3] and z == 1
    pos, neg, z = split_by_sign([1.0, 2.0])
    assert len(neg) == 0 and z == 0


@given(st.lists(st.floats(-10, 10)))
def test_split_conserves_count(xs):
    pos, neg, z = split_by_sign(xs)
    assert len(pos) + len(neg) == len(xs) - z
    assert np.all(pos > 0) and np.all(neg < 0)


def test_group_means():
    row = group_means(GroupedSamples([1, 2, 3], [4.0, 6.0]))
    assert row.mean_active == 2 and row.mean_inactive == 5
    assert (row.n_active, row.n_inactive) == (3, 2)
    with pytest.raises(ConfigError, match="active"):
        group_means(GroupedSamples([], [1.0]))


def test_grouped_samples_sign_class():
    GroupedSamples([0.1], [0.2], sign_class="positive-acceleration")
    with pytest.raises(ConfigError):
        GroupedSamples([0.1, -0.2], [0.2], sign_class="positive-acceleration")
    with pytest.raises(ConfigError):
        GroupedSamples([np.inf], [0.2])


def test_table_shaped_rows():
    assert format_means_row(MeansRow(0.7626, 0.746, 10, 10)) == "Inactive 0.7626 / Active 0.746"
    assert format_can_row(1285.8, 1098.4, (185.07, 189.77)) == "1285.8 / 1098.4 / (185.07,189.77)"
    assert format_interval(0.014, math.inf) == "(0.014, ∞)"
    row = SegmentRow("24166", 0.826, 886, 0.751, 2686, 0.0013)
    assert format_segment_row(row) == "24166 | 0.826 (886) | 0.751 (2686) | 0.0013"


def test_reduction_pct():
    assert MeansRow(0.7626, 0.746, 1, 1).reduction_pct == pytest.approx(2.18, abs=0.01)


def test_welch_hand_example():
    w = welch_test([1, 2, 3], [2, 3, 4])
    assert w.t_statistic == pytest.approx(-1.2247, abs=1e-4)
    assert w.degrees_of_freedom == pytest.approx(4.0, abs=1e-4)
    assert w.difference == -1.0


def test_welch_identical_groups():
    g = GroupedSamples([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
    w = welch_one_sided(g, "greater")
    assert w.t_statistic == 0 and abs(w.p_value_one_sided - 0.5) < 1e-12


def test_welch_inactive_first():
    w = welch_one_sided(GroupedSamples(active=[1.0, 1.1, 0.9], inactive=[2.0, 2.1, 1.9]), "greater")
    assert w.mean_inactive == pytest.approx(2.0) and w.t_statistic > 0 and w.p_value_one_sided < 0.01
    lo, hi = w.interval
    assert hi == math.inf and 0 < lo < 1


def test_welch_tiny_variance():
    w = welch_test([0.0, 0.0], [0.0, 8.172497245191183e-135])
    assert w.degrees_of_freedom == pytest.approx(1.0)
    assert math.isfinite(w.t_statistic)


def test_welch_degenerate():
    with pytest.raises(NumericalError):
        welch_test([1.0, 1.0], [1.0, 1.0])
    with pytest.raises(ConfigError):
        welch_test([1.0], [1.0, 2.0])


def test_welch_against_scipy(rng):
    for _ in range(20):
        x = rng.normal(0, rng.uniform(0.5, 2), rng.integers(2, 50))
        y = rng.normal(0.3, rng.uniform(0.5, 2), rng.integers(2, 50))
        w = welch_test(x, y, "greater")
        ref = sst.ttest_ind(x, y, equal_var=False, alternative="greater")
        assert w.t_statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert w.p_value_one_sided == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20),
       st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_one_sided_p_values_sum_to_one(x, y):
    try:
        g = welch_test(x, y, "greater")
    except NumericalError:
        return
    l = welch_test(x, y, "less")
    assert g.p_value_one_sided + l.p_value_one_sided == pytest.approx(1.0, abs=1e-12)


def test_t_cdf_reference_values():
    for df in (1.0, 2.5, 4.0, 17.3, 1234.5, 1e6):
        for t in (-30.0, -3.0, -0.5, 0.0, 0.7, 2.0, 8.0):
            assert float(t_cdf(t, df)) == pytest.approx(sst.t.cdf(t, df), rel=1e-10, abs=1e-300)
        assert float(t_cdf(t_ppf(0.95, df), df)) == pytest.approx(0.95, abs=1e-10)


def test_two_sided_interval():
    lo, hi = welch_interval([1, 2, 3, 4.0], [2, 3, 4, 6.0])
    w = welch_test([1, 2, 3, 4.0], [2, 3, 4, 6.0])
    assert lo < w.difference < hi
    assert (lo + hi) / 2 == pytest.approx(w.difference)


def test_p_floor_flag():
    w = welch_test(np.arange(1000.0) + 1e4, np.arange(1000.0), "greater")
    assert w.p_value_one_sided == TINY and w.p_floored


def test_permutation_super_uniform(rng):
    x = rng.normal(size=60)
    rej = 0
    n = 10_000
    for _ in range(n):
        rng.shuffle(x)
        rej += welch_test(x[:30], x[30:], "greater").p_value_one_sided < 0.05
    assert 0.03 <= rej / n <= 0.07


def test_ecdf_examples():
    F = ecdf([1, 2, 3])
    assert F(2) == pytest.approx(2 / 3) and F(0.5) == 0 and F(3) == 1
    assert ecdf([1, 1, 2])(1) == pytest.approx(2 / 3)
    x, p = ecdf([3, 1, 1]).points
    assert x.tolist() == [1, 3] and p.tolist() == [2 / 3, 1]
    with pytest.raises(ConfigError):
        ecdf([])


def test_ks_hand_example():
    dp, dm = ks_statistics([1, 2, 3, 4], [1.5, 2.5, 3.5, 4.5])
    assert (dp, dm) == (0.25, 0.0) == brute_ks([1, 2, 3, 4], [1.5, 2.5, 3.5, 4.5])


def test_ks_identical():
    r = ks_test([1, 2, 3], [1, 2, 3])
    assert r.d_plus == r.d_minus == 0 and r.p_value_one_sided == 1.0


def test_ks_matches_brute_force(rng):
    for _ in range(30):
        m, n = rng.integers(1, 1001, 2)
        # rounding produces plenty of ties across and within samples
        x = np.round(rng.normal(0, 1, m), 1)
        y = np.round(rng.normal(0.1, 1.2, n), 1)
        assert ks_statistics(x, y) == brute_ks(x, y)
        for direction in ("less", "greater"):
            r = ks_test(x, y, direction)
            d = r.d_minus if direction == "less" else r.d_plus
            assert r.statistic == d
            expect = math.exp(-2 * d * d * m * n / (m + n))
            assert abs(r.p_value_one_sided - max(expect, TINY)) <= 1e-12


def test_ks_direction_semantics():
    # inactive values larger: inactive CDF lies below -> D- large, "less" significant
    g = GroupedSamples(active=np.linspace(0, 1, 500), inactive=np.linspace(0.2, 1.2, 500))
    r = ks_one_sided(g, "less")
    assert r.d_minus == pytest.approx(0.2, abs=0.01) and r.d_plus == 0
    assert r.p_value_one_sided < 1e-8


def test_ks_pvalue_formula():
    assert ks_pvalue(0.016, 10**6, 10**6) == pytest.approx(math.exp(-2 * 0.016**2 * 5e5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=1, max_size=40),
       st.lists(st.integers(-500, 500), min_size=1, max_size=40))
def test_ks_invariant_under_increasing_transform(x, y):
    # on a grid, so the transform stays strictly increasing in floating point
    x, y = np.array(x) / 100.0, np.array(y) / 100.0
    assert ks_statistics(x, y) == ks_statistics(np.exp(x), np.exp(y))
    assert ks_statistics(x, y) == ks_statistics(x ** 3 + 2 * x, y ** 3 + 2 * y)


def test_histogram_mass():
    c, e = histogram(np.arange(100.0), bins=10)
    assert c.sum() == 100 and len(e) == 11


def test_per_segment_tests(rng):
    n = 400
    vals = np.concatenate([rng.normal(1, 0.2, n), rng.normal(0.9, 0.2, n), rng.normal(1, 0.2, 150),
                           rng.normal(1, 0.2, 150), rng.normal(1, 0.2, 50)])
    segs = ["A"] * (2 * n) + ["B"] * 300 + ["C"] * 50
    active = np.array([False] * n + [True] * n + [False] * 150 + [True] * 150 + [True] * 50)
    rows, skipped = per_segment_tests(vals, segs, active, min_count=100)
    assert [r.segment_id for r in rows] == ["A", "B"]
    assert skipped == 1
    assert rows[0].n_inactive == n and rows[0].p_value < 1e-6
    ref = welch_test(vals[:n], vals[n:2 * n], "greater")
    assert rows[0].p_value == ref.p_value_one_sided


def test_per_segment_ignores_unmatched():
    rows, skipped = per_segment_tests([1.0, 2.0], [None, None], [True, False], min_count=2)
    assert rows == [] and skipped == 0
