#!/usr/bin/env python3
"""Generate feeders/feeder32_day.csv: a minute-resolution day of loads.

Every bus draws a double-peaked residential consumption curve (morning and
evening), and every third bus carries rooftop solar that exports around
midday.  The result stresses both voltage limits: midday export pushes the
feeder high, the evening peak drags it low.

The output is deterministic; rerunning the script reproduces the checked-in
CSV byte for byte.
"""

import math
import random

N_BUSES = 32
MINUTES = 1440
CONSUMPTION_SCALE = 0.016  # per-bus active-power draw at curve value 1.0
SOLAR_SCALE = 0.085  # per-solar-bus export at full sun
REACTIVE_FRACTION = 0.45  # consumption power factor tail
SEED = 20240831

OUT = "feeders/feeder32_day.csv"


def consumption(hour: float) -> float:
    """Double-peaked daily demand in [0.3, ~0.72]."""
    morning = 0.16 * math.exp(-(((hour - 8.0) / 2.0) ** 2))
    evening = 0.42 * math.exp(-(((hour - 19.0) / 2.6) ** 2))
    return 0.30 + morning + evening


def sun(hour: float) -> float:
    """Clear-sky irradiance shape, zero outside 6:30-17:30."""
    if hour < 6.5 or hour > 17.5:
        return 0.0
    return math.sin(math.pi * (hour - 6.5) / 11.0) ** 3


def main() -> None:
    rng = random.Random(SEED)
    demand_weight = [rng.uniform(0.8, 1.2) for _ in range(N_BUSES)]
    solar_weight = [
        rng.uniform(0.8, 1.2) if (bus + 1) % 3 == 0 else 0.0 for bus in range(N_BUSES)
    ]

    with open(OUT, "w", newline="\n") as f:
        f.write("t,bus,p_load,q_load\n")
        for t in range(MINUTES):
            hour = t / 60.0
            c = consumption(hour)
            s = sun(hour)
            for bus in range(N_BUSES):
                draw = CONSUMPTION_SCALE * demand_weight[bus] * c
                export = SOLAR_SCALE * solar_weight[bus] * s
                p = -draw + export
                q = -draw * REACTIVE_FRACTION
                f.write(f"{t},{bus + 1},{p:.6f},{q:.6f}\n")


if __name__ == "__main__":
    main()
