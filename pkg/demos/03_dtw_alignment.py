"""Aligning a CAN bus clock to the phone clock with dynamic time warping.

The CAN logger samples at 3 Hz on a clock that drifts against the phone's.
DTW pairs each CAN sample with a phone fix so CAN readings inherit a
position.
"""
import numpy as np

from drivetel.align import dtw_align

phone_t = np.arange(0.0, 20.0)
can_t = np.arange(0.0, 20.0, 1 / 3) * 1.002 + 0.4  # drift and offset

p = dtw_align(can_t, phone_t)
print("path length", len(p.pairs), "total |dt|", round(p.total_cost, 3))
for i, j in p.pairs[:8]:
    print(f"CAN t={can_t[i]:6.3f} -> phone t={phone_t[j]:4.1f}")
