"""Two-group comparison statistics: means, one-sided Welch t, ECDF, one-sided KS.

Throughout, the *first* group of a comparison is the inactive one, so a
positive difference means inactive > active, matching how the study reports
mu_inactive - mu_active.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, NumericalError

EPS = np.finfo(float).eps
TINY = np.finfo(float).tiny
DEFAULT_MIN_SEGMENT_COUNT = 100


@dataclass
class GroupedSamples:
    active: np.ndarray
    inactive: np.ndarray
    units: str = ""
    sign_class: str = "raw-channel"

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=float)
        self.inactive = np.asarray(self.inactive, dtype=float)
        for name in ("active", "inactive"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"{name} group has non-finite values")
        if self.sign_class == "positive-acceleration":
            if np.any(self.active <= 0) or np.any(self.inactive <= 0):
                raise ConfigError("positive-acceleration group holds non-positive values")
        elif self.sign_class == "negative-acceleration":
            if np.any(self.active >= 0) or np.any(self.inactive >= 0):
                raise ConfigError("negative-acceleration group holds non-negative values")
        elif self.sign_class != "raw-channel":
            raise ConfigError(f"unknown sign class {self.sign_class!r}")


def split_by_sign(acc) -> tuple[np.ndarray, np.ndarray, int]:
    """Strictly positive values, strictly negative values, and the number of zeros."""
    acc = np.asarray(acc, dtype=float)
    return acc[acc > 0], acc[acc < 0], int(np.count_nonzero(acc == 0))


@dataclass(frozen=True)
class MeansRow:
    mean_inactive: float
    mean_active: float
    n_inactive: int
    n_active: int

    @property
    def reduction_pct(self) -> float:
        """Relative reduction of the active mean magnitude, in percent."""
        return 100.0 * (abs(self.mean_inactive) - abs(self.mean_active)) / abs(self.mean_inactive)


def group_means(g: GroupedSamples) -> MeansRow:
    for name in ("inactive", "active"):
        if len(getattr(g, name)) == 0:
            raise ConfigError(f"{name} group is empty")
    return MeansRow(float(np.mean(g.inactive)), float(np.mean(g.active)), len(g.inactive), len(g.active))


# --- Welch ------------------------------------------------------------------


def t_cdf(t, df):
    """Student-t CDF for real df via the regularized incomplete beta function."""
    t = np.asarray(t, dtype=float)
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return np.where(t < 0, tail, 1.0 - tail)


def t_sf(t, df):
    return t_cdf(-np.asarray(t, dtype=float), df)


def t_ppf(q, df):
    return special.stdtrit(df, q)


@dataclass(frozen=True)
class WelchResult:
    mean_inactive: float
    mean_active: float
    t_statistic: float
    degrees_of_freedom: float
    p_value_one_sided: float
    one_sided_ci_bound: float
    direction: str
    confidence: float = 0.95
    p_floored: bool = False

    @property
    def difference(self):
        return self.mean_inactive - self.mean_active

    @property
    def interval(self) -> tuple[float, float]:
        if self.direction == "greater":
            return (self.one_sided_ci_bound, math.inf)
        return (-math.inf, self.one_sided_ci_bound)


def _welch_parts(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n1, n2 = len(x), len(y)
    if n1 < 2 or n2 < 2:
        raise ConfigError("Welch test needs at least 2 values per group")
    m1, m2 = float(x.mean()), float(y.mean())
    v1, v2 = float(x.var(ddof=1)), float(y.var(ddof=1))
    a, b = v1 / n1, v2 / n2
    se2 = a + b
    if se2 == 0:
        raise NumericalError("both groups have zero variance")
    # Welch-Satterthwaite on the variance shares, which sum to 1, so tiny
    # variances cannot underflow the denominator
    ra, rb = a / se2, b / se2
    df = 1.0 / (ra ** 2 / (n1 - 1) + rb ** 2 / (n2 - 1))
    return m1, m2, math.sqrt(se2), df


def welch_test(x, y, direction: str = "greater", confidence: float = 0.95) -> WelchResult:
    """One-sided Welch two-sample t-test for mean(x) - mean(y).

    ``direction="greater"`` tests H1: mean(x) > mean(y) and reports the lower
    confidence bound of the difference; ``"less"`` the mirror image.
    """
    if direction not in ("greater", "less"):
        raise ConfigError(f"direction must be 'greater' or 'less', not {direction!r}")
    m1, m2, se, df = _welch_parts(x, y)
    diff = m1 - m2
    t = diff / se
    q = t_ppf(confidence, df)
    if direction == "greater":
        p = float(t_sf(t, df))
        bound = diff - q * se
    else:
        p = float(t_cdf(t, df))
        bound = diff + q * se
    floored = bool(p < TINY)
    return WelchResult(m1, m2, float(t), float(df), max(p, TINY) if floored else p, float(bound), direction,
                       confidence, floored)


def welch_one_sided(g: GroupedSamples, direction: str = "greater", confidence: float = 0.95) -> WelchResult:
    """Welch test of mu_inactive - mu_active."""
    return welch_test(g.inactive, g.active, direction, confidence)


def welch_interval(x, y, confidence: float = 0.95) -> tuple[float, float]:
    """Two-sided Welch confidence interval for mean(x) - mean(y)."""
    m1, m2, se, df = _welch_parts(x, y)
    q = t_ppf(0.5 + confidence / 2, df)
    d = m1 - m2
    return float(d - q * se), float(d + q * se)


# --- ECDF / KS --------------------------------------------------------------


class ECDF:
    """Right-continuous empirical CDF."""

    def __init__(self, x):
        x = np.sort(np.asarray(x, dtype=float))
        if len(x) == 0:
            raise ConfigError("ECDF of an empty sample")
        self.x = x
        self.n = len(x)

    def __call__(self, t):
        return np.searchsorted(self.x, t, side="right") / self.n

    @property
    def points(self):
        """Distinct sample points and the CDF value at each."""
        u = np.unique(self.x)
        return u, self(u)


def ecdf(x) -> ECDF:
    return ECDF(x)


@dataclass(frozen=True)
class KsResult:
    d_plus: float
    d_minus: float
    p_value_one_sided: float
    m: int
    n: int
    direction: str
    p_floored: bool = False

    @property
    def statistic(self):
        return self.d_plus if self.direction == "greater" else self.d_minus


def ks_statistics(x, y) -> tuple[float, float]:
    """D+ = sup(F_x - F_y), D- = sup(F_y - F_x) by a merged scan of pooled points."""
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    m, n = len(x), len(y)
    pooled = np.concatenate([x, y])
    cx = np.searchsorted(x, pooled, side="right")
    cy = np.searchsorted(y, pooled, side="right")
    diff = cx / m - cy / n
    return max(0.0, float(diff.max())), max(0.0, float(-diff.min()))


def ks_pvalue(d: float, m: int, n: int) -> float:
    """One-sided asymptotic bound exp(-2 d^2 mn/(m+n))."""
    return math.exp(-2.0 * d * d * m * n / (m + n))


def ks_test(x, y, direction: str = "less") -> KsResult:
    """One-sided two-sample KS test of x against y.

    ``"less"``: H1 says F_x lies below F_y (x stochastically larger), using
    D-. ``"greater"``: F_x above F_y, using D+.
    """
    if direction not in ("greater", "less"):
        raise ConfigError(f"direction must be 'greater' or 'less', not {direction!r}")
    m, n = len(x), len(y)
    if m == 0 or n == 0:
        raise ConfigError("KS test needs two nonempty samples")
    dp, dm = ks_statistics(x, y)
    d = dp if direction == "greater" else dm
    p = ks_pvalue(d, m, n)
    floored = bool(p < TINY)
    return KsResult(dp, dm, max(p, TINY), m, n, direction, floored)


def ks_one_sided(g: GroupedSamples, direction: str = "less") -> KsResult:
    """KS test with the inactive sample first."""
    return ks_test(g.inactive, g.active, direction)


def histogram(x, bins=50, range=None):
    counts, edges = np.histogram(np.asarray(x, dtype=float), bins=bins, range=range)
    return counts, edges


# --- per-segment ------------------------------------------------------------


@dataclass(frozen=True)
class SegmentRow:
    segment_id: str
    mean_inactive: float
    n_inactive: int
    mean_active: float
    n_active: int
    p_value: float

    @property
    def total(self):
        return self.n_inactive + self.n_active


def per_segment_tests(values, segment_ids, active, min_count: int = DEFAULT_MIN_SEGMENT_COUNT,
                      direction: str = "greater"):
    """Welch test per road segment, most-travelled segment first.

    Segments where either group has fewer than ``min_count`` values, or where
    the test is degenerate, are skipped. Returns (rows, n_skipped).
    """
    values = np.asarray(values, dtype=float)
    active = np.asarray(active, dtype=bool)
    groups: dict[str, list[list[float]]] = defaultdict(lambda: [[], []])
    for v, s, a in zip(values.tolist(), segment_ids, active.tolist()):
        if s is None:
            continue
        groups[s][1 if a else 0].append(v)
    rows, skipped = [], 0
    for sid, (inact, act) in groups.items():
        if len(inact) < min_count or len(act) < min_count:
            skipped += 1
            continue
        try:
            w = welch_test(inact, act, direction)
        except (NumericalError, ConfigError):
            skipped += 1
            continue
        rows.append(SegmentRow(sid, w.mean_inactive, len(inact), w.mean_active, len(act), w.p_value_one_sided))
    rows.sort(key=lambda r: (-r.total, r.segment_id))
    return rows, skipped


# --- report row formatting ----------------------------------------------------


def fmt_sig(x: float, sig: int = 5) -> str:
    if math.isinf(x):
        return "∞" if x > 0 else "-∞"
    return f"{x:.{sig}g}"


def format_interval(lo: float, hi: float, sig: int = 5) -> str:
    if math.isinf(lo) or math.isinf(hi):
        return f"({fmt_sig(lo, sig)}, {fmt_sig(hi, sig)})"
    return f"({fmt_sig(lo, sig)},{fmt_sig(hi, sig)})"


def format_means_row(row: MeansRow, sig: int = 5) -> str:
    return f"Inactive {fmt_sig(row.mean_inactive, sig)} / Active {fmt_sig(row.mean_active, sig)}"


def format_can_row(mean_inactive, mean_active, interval, sig: int = 5) -> str:
    return f"{fmt_sig(mean_inactive, sig)} / {fmt_sig(mean_active, sig)} / {format_interval(*interval, sig=sig)}"


def format_segment_row(row: SegmentRow) -> str:
    return (f"{row.segment_id} | {row.mean_inactive:.3f} ({row.n_inactive}) | "
            f"{row.mean_active:.3f} ({row.n_active}) | {row.p_value:.4f}")
