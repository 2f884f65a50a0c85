"""Peaks-over-threshold analysis with the Generalized Pareto distribution."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, DomainError, InsufficientDataError, DrivetelError

MIN_EXCEEDANCES = 30
XI_BOUNDS = (-0.5, 1.0)
DEFAULT_QUANTILE = 0.90
_XI_ZERO = 1e-9
_PENALTY = 1e12


class ComparisonError(DrivetelError):
    exit_code = 4


class LevelBelowThresholdError(DomainError):
    pass


@dataclass(frozen=True)
class GpdFit:
    u: float
    sigma: float
    xi: float
    zeta_u: float
    n_exceedances: int
    n_total: int
    log_likelihood: float
    at_boundary: bool = False
    converged: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class MeanExcessCurve:
    thresholds: np.ndarray
    mean_excess: np.ndarray
    counts: np.ndarray

    def slope(self) -> float:
        """Least-squares slope of mean excess against threshold."""
        return float(np.polyfit(self.thresholds, self.mean_excess, 1)[0])


def mean_excess_curve(x, grid=None, min_count: int = 10) -> MeanExcessCurve:
    """Empirical E(y - u | y > u) over a threshold grid.

    Thresholds with fewer than ``min_count`` exceedances, or with the same
    exceedance count as the previous threshold, are omitted. The
    default grid is 50 evenly spaced sample quantiles from 0 to 0.99.
    """
    xs = np.sort(np.asarray(x, dtype=float))
    n = len(xs)
    if n == 0:
        raise ConfigError("mean excess of an empty sample")
    if grid is None:
        grid = np.quantile(xs, np.linspace(0.0, 0.99, 50))
    grid = np.unique(np.asarray(grid, dtype=float))
    tail_sums = np.concatenate([np.cumsum(xs[::-1])[::-1], [0.0]])
    first_above = np.searchsorted(xs, grid, side="right")
    counts = n - first_above
    keep = counts >= max(min_count, 1)
    # thresholds with no sample point between them repeat a count; keep the first
    keep[1:] &= counts[1:] != counts[:-1]
    grid, first_above, counts = grid[keep], first_above[keep], counts[keep]
    me = tail_sums[first_above] / counts - grid
    return MeanExcessCurve(grid, me, counts)


def gpd_log_likelihood(excess, sigma, xi) -> float:
    """Log-likelihood of threshold excesses; -inf outside the support."""
    y = np.asarray(excess, dtype=float)
    if sigma <= 0:
        return -math.inf
    k = len(y)
    if abs(xi) < _XI_ZERO:
        return -k * math.log(sigma) - float(y.sum()) / sigma
    z = xi * y / sigma
    if np.any(z <= -1.0):
        return -math.inf
    return -k * math.log(sigma) - (1.0 + 1.0 / xi) * float(np.log1p(z).sum())


def _start(excess):
    m = float(np.mean(excess))
    v = float(np.var(excess))
    if v <= 0:
        return max(m, 1e-12), 0.0
    r = m * m / v
    xi = 0.5 * (1.0 - r)
    sigma = 0.5 * m * (r + 1.0)
    xi = min(max(xi, XI_BOUNDS[0] + 0.05), XI_BOUNDS[1] - 0.05)
    return sigma, xi


def fit_gpd(x, u: float) -> GpdFit:
    """Maximum-likelihood GPD fit to the exceedances of ``x`` over ``u``.

    Nelder-Mead over (log sigma, xi) from the method-of-moments start; the
    support constraint and the xi box [-0.5, 1) are enforced by a penalty.
    ``at_boundary`` flags fits that end within 1e-3 of the box.
    """
    x = np.asarray(x, dtype=float)
    excess = x[x > u] - u
    k = len(excess)
    if k < MIN_EXCEEDANCES:
        raise InsufficientDataError(f"only {k} exceedances above u={u}; need {MIN_EXCEEDANCES}")
    scale = float(np.mean(excess))
    # optimise on excesses scaled to unit mean so tolerances are scale free
    ys = excess / scale
    lo, hi = XI_BOUNDS

    def nll(p):
        ls, xi = p
        if not lo <= xi < hi:
            return _PENALTY * (1.0 + abs(xi))
        ll = gpd_log_likelihood(ys, math.exp(ls), xi)
        if not math.isfinite(ll):
            return _PENALTY
        return -ll

    s0, xi0 = _start(ys)
    best = None
    x0 = np.array([math.log(s0), xi0])
    for _ in range(4):
        res = minimize(nll, x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 4000, "maxfev": 8000})
        if best is not None and abs(best.fun - res.fun) <= 1e-10:
            best = res if res.fun < best.fun else best
            break
        best = res if best is None or res.fun < best.fun else best
        x0 = best.x
    ls, xi = best.x
    sigma = math.exp(ls) * scale
    ll = gpd_log_likelihood(excess, sigma, xi)
    at_boundary = xi - lo < 1e-3 or hi - xi < 1e-3
    return GpdFit(float(u), float(sigma), float(xi), k / len(x), k, len(x), float(ll), bool(at_boundary),
                  bool(best.success))


def gpd_cdf(a, fit: GpdFit):
    """H(a) = 1 - (1 + xi (a-u)/sigma)_+^(-1/xi); exponential limit at xi = 0."""
    a_arr = np.asarray(a, dtype=float)
    if np.any(a_arr < fit.u):
        raise DomainError(f"gpd_cdf defined for a >= u={fit.u}")
    y = (a_arr - fit.u) / fit.sigma
    if abs(fit.xi) < _XI_ZERO:
        h = -np.expm1(-y)
    else:
        z = np.maximum(1.0 + fit.xi * y, 0.0)
        with np.errstate(divide="ignore"):
            h = 1.0 - np.power(z, -1.0 / fit.xi)
    h = np.clip(h, 0.0, 1.0)
    return float(h) if np.ndim(h) == 0 else h


def gpd_quantile(p, fit: GpdFit):
    """Inverse of :func:`gpd_cdf` for p in [0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p >= 1)):
        raise DomainError("quantile level must be in [0, 1)")
    if abs(fit.xi) < _XI_ZERO:
        q = fit.u - fit.sigma * np.log1p(-p)
    else:
        q = fit.u + fit.sigma / fit.xi * np.expm1(-fit.xi * np.log1p(-p))
    return float(q) if np.ndim(q) == 0 else q


def gpd_mean_excess(fit: GpdFit, v: float) -> float:
    """Model mean excess E(y - v | y > v) for v >= u; requires xi < 1.

    The denominator is (1 - xi), the standard GPD result; a printed (1 - sigma)
    in some write-ups is a typo, as the stated slope xi/(1 - xi) confirms.
    """
    return (fit.sigma + fit.xi * (v - fit.u)) / (1.0 - fit.xi)


def observations_per_period(period: float, sample_rate: float) -> int:
    """period * rate rounded half up."""
    return int(math.floor(period * sample_rate + 0.5))


def return_level(fit: GpdFit, period: float, sample_rate: float = 1.0) -> float:
    """Level exceeded on average once every ``period`` seconds.

    With m = round(period * rate) observations: u + sigma/xi ((m zeta)^xi - 1),
    or u + sigma ln(m zeta) when xi = 0. Requires m * zeta > 1.
    """
    if fit.sigma <= 0:
        raise DomainError("sigma must be positive")
    m = observations_per_period(period, sample_rate)
    mz = m * fit.zeta_u
    if mz <= 1.0:
        raise LevelBelowThresholdError(f"m*zeta_u = {mz:g} <= 1: return level would sit at or below u")
    if abs(fit.xi) < _XI_ZERO:
        return fit.u + fit.sigma * math.log(mz)
    return fit.u + fit.sigma / fit.xi * math.expm1(fit.xi * math.log(mz))


@dataclass(frozen=True)
class TailComparison:
    level_active: float
    level_inactive: float
    ratio: float
    direction: str
    reduction_pct: float


def tail_compare(active: GpdFit, inactive: GpdFit, period: float, sample_rate: float = 1.0,
                 sign: float = 1.0) -> TailComparison:
    """Return levels of both groups at a common threshold.

    ``sign=-1`` reports levels for a lower tail fitted on magnitudes (the
    levels are negated, ratio and reduction use magnitudes).
    ``direction`` names the group with the larger magnitude, or "equal".
    """
    if not math.isclose(active.u, inactive.u, rel_tol=1e-12, abs_tol=0.0):
        raise ComparisonError(f"thresholds differ: active u={active.u}, inactive u={inactive.u}")
    la = return_level(active, period, sample_rate)
    li = return_level(inactive, period, sample_rate)
    ratio = la / li
    if math.isclose(la, li, rel_tol=1e-12):
        direction = "equal"
    else:
        direction = "inactive" if li > la else "active"
    return TailComparison(sign * la, sign * li, ratio, direction, 100.0 * (li - la) / li)


def common_threshold(active, inactive, q: float = DEFAULT_QUANTILE) -> float:
    """q-quantile of the pooled sample."""
    if not 0 < q < 1:
        raise ConfigError("threshold quantile must be in (0, 1)")
    return float(np.quantile(np.concatenate([np.asarray(active, float), np.asarray(inactive, float)]), q))


def format_level(x: float) -> str:
    return f"{x:.2f}"


def format_reduction(pct: float) -> str:
    return f"{pct:.1f}%"
