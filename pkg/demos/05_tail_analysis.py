"""Peaks over threshold: how hard is the hardest acceleration every 24 s?

A generalized Pareto tail is fitted above a common threshold for each
group, and the return level is the value exceeded once per return period
on average.
"""
import numpy as np

from drivetel.evt import common_threshold, fit_gpd, mean_excess_curve, tail_compare
from drivetel.synth import sample_gpd

rng = np.random.default_rng(3)
n = 200_000
body_a, body_i = rng.exponential(0.2, n), rng.exponential(0.2, n)
tail_a = rng.random(n) < 0.1
tail_i = rng.random(n) < 0.1
active = np.where(tail_a, 0.5 + sample_gpd(n, 0.35, 0.1, seed=4), body_a)
inactive = np.where(tail_i, 0.5 + sample_gpd(n, 0.35, 0.2, seed=5), body_i)

u = common_threshold(active, inactive, 0.9)
fa, fi = fit_gpd(active, u), fit_gpd(inactive, u)
print(f"threshold {u:.3f}")
print(f"active:   sigma {fa.sigma:.3f} xi {fa.xi:.3f}")
print(f"inactive: sigma {fi.sigma:.3f} xi {fi.xi:.3f}")

cmp = tail_compare(fa, fi, 24, 1.0)
print(f"24 s return level: active {cmp.level_active:.2f}, inactive {cmp.level_inactive:.2f}, "
      f"reduction {cmp.reduction_pct:.1f}%")

c = mean_excess_curve(inactive, np.quantile(inactive, np.linspace(0.9, 0.999, 30)), min_count=200)
print(f"mean-excess slope above u (inactive): {c.slope():.3f}, GPD predicts {fi.xi / (1 - fi.xi):.3f}")
