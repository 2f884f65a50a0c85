"""Comparing acceleration between trips with the service on and off.

Welch's t-test compares means and the one-sided Kolmogorov-Smirnov test
asks whether the inactive distribution is stochastically larger.
"""
import numpy as np

from drivetel.stats import GroupedSamples, ks_one_sided, split_by_sign, welch_one_sided

rng = np.random.default_rng(2)
inactive = rng.gamma(2.0, 0.12, 50_000) - rng.gamma(2.0, 0.12, 50_000) * 0.9
active = rng.gamma(2.0, 0.115, 50_000) - rng.gamma(2.0, 0.115, 50_000) * 0.9

pos_i, neg_i, _ = split_by_sign(inactive)
pos_a, neg_a, _ = split_by_sign(active)
g = GroupedSamples(active=pos_a, inactive=pos_i)

w = welch_one_sided(g, "greater")
k = ks_one_sided(g, "less")
print(f"positive means: inactive {w.mean_inactive:.4f}, active {w.mean_active:.4f}")
print(f"Welch t {w.t_statistic:.3f}, df {w.degrees_of_freedom:.1f}, one-sided p {w.p_value_one_sided:.2e}")
print(f"KS D- {k.d_minus:.4f}, one-sided p {k.p_value_one_sided:.2e}")
