"""
Balanced event schedules
========================

A reflected Gray code flips its low bit far more often than its high bit.
Used to drive appliances, that gives the low-bit appliance most of the
switching events.  The balanced code here spreads flips evenly, and the
schedule generator interleaves several groups so the dataset stays balanced
and keeps visiting new state combinations.
"""
import numpy as np

from loadid.schedule import (ScheduleParams, balanced_gray_code, generate_schedule, overlap_ratio,
                             schedule_stats)

# Flip counts per bit: reflected code versus the balanced one
for n in (4, 6, 8):
    reflected = [(i ^ (i >> 1)) for i in range(2 ** n)]
    flips = np.zeros(n, dtype=int)
    for a, b in zip(reflected, reflected[1:] + reflected[:1]):
        flips[(a ^ b).bit_length() - 1] += 1
    print(f"n={n} reflected {flips.tolist()}  balanced {balanced_gray_code(n).transition_counts().tolist()}")

# A full-size schedule: 18 appliances in groups of six, three groups per round
train = generate_schedule(ScheduleParams(18, group_size=6, groups_active_per_round=3, rounds=30, rng_seed=1))
test = generate_schedule(ScheduleParams(18, group_size=6, groups_active_per_round=3, rounds=18, rng_seed=2))
st = schedule_stats(train)
print("events", len(train), "over", round(train.duration_hours(), 1), "hours")
print("events per appliance", st.events_per_appliance)
print("event balance", st.event_br, "state balance", round(st.state_br, 3))
print("unique states", st.unique_states)

# Held-out schedules should rarely revisit training states
print("train/test state overlap", round(overlap_ratio(train, test), 4))
