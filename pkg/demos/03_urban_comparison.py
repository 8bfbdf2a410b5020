"""
Gated versus ungated over several seeds
=======================================

Runs the shipped urban scenario: a 150 m by 100 m block with parked and
moving traffic. Pass seeds on the command line to choose how many (the full
ten take about two minutes on one core).

    python3 demos/03_urban_comparison.py 1 2 3
"""

import sys
import time
from importlib.resources import files

from semgate import eval as ev

config, seeds, settings = ev.load_experiment(files("semgate") / "configs" / "desk_urban.cfg")
if len(sys.argv) > 1:
    seeds = [int(s) for s in sys.argv[1:]]

t0 = time.perf_counter()
cmp = ev.compare(config, seeds, settings)
print(f"{len(seeds)} seeds in {time.perf_counter() - t0:.0f} s\n")

print("seed  ungated rms  gated rms")
for row in cmp.rows:
    print(f"{row.seed:4d}  {row.stats['ungated'].rms_3d:11.3f}  {row.stats['gated'].rms_3d:9.3f}")

print(f"\ngating wins on {cmp.wins} of {len(seeds)} seeds")
for metric, imp in cmp.improvement.items():
    print(f"  mean improvement in {metric:12s} {imp:6.1f}%")
