"""
Synchronizing two sampling nodes on the mains voltage
=====================================================

Both nodes see the same mains voltage.  A node timestamps an event by the
cycle it falls in and its distance, in sampling intervals, from that cycle's
upward zero crossing.  Wireless beacon timestamps, the baseline, carry
packet jitter and occasional millisecond outliers.
"""
import numpy as np

from loadid.syncsim import DEFAULT_CLOCK_A, DEFAULT_CLOCK_B, detect_zero_crossings, error_cdf, simulate, summary

# Crossings are located to a fraction of a sample
k = np.arange(320 * 4)
print("crossings", detect_zero_crossings(np.sin(2 * np.pi * (k - 0.25) / 320)))

print("node A", DEFAULT_CLOCK_A)
print("node B", DEFAULT_CLOCK_B)
res = simulate(3000, seed=0)
for name, trials in (("zero-crossing", res.spt), ("beacon", res.tsf)):
    s = summary(trials)
    print(f"{name:13s} mean {s['mean_us']:6.1f} us  max {s['max_us']:7.1f} us  "
          f"<220 us {100 * s['p_under_220us']:.2f}%")

# A few points of the zero-crossing CDF
cdf = np.array(error_cdf(res.spt))
for q in (0.5, 0.9, 0.99, 1.0):
    print(f"{q:.2f} of errors below {cdf[np.searchsorted(cdf[:, 1], q), 0]:.1f} us")
