"""One stochastic day of household water use, summarised hour by hour."""

import numpy as np

from loopflow.scenarios import HOUR, demand_profile, household_events

events = household_events()
prof = demand_profile(events, 24 * HOUR, 60.0, seed=7)
hourly = prof.volumes.reshape(24, -1).sum(axis=1)

print(f"{sum(e.count for e in events)} events, {prof.volumes.sum():.1f} litres in total")
peak = hourly.max()
for h, v in enumerate(hourly):
    print(f"{h:02d}:00  {v:7.1f} l  {'#' * int(40 * v / peak) if peak else ''}")
print(f"busiest hour starts at {int(np.argmax(hourly)):02d}:00")
