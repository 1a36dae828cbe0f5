"""Build a synthetic benchmark corpus and look at what's inside it.

The generator mimics a fleet of benchmarked servers: configuration features
follow realistic era trends (cores per chip grow over time, SSDs displace
HDDs), each server carries 11 load-level readings, and the ground-truth
coefficient set is returned so downstream accuracy can be scored against it.
"""

import numpy as np

from serverlens import SyntheticSpec, TargetKind, build_design_matrix, generate_synthetic
from serverlens.dataset import read_canonical_csv, write_canonical_csv

records, truth = generate_synthetic(SyntheticSpec(n_servers=200, seed=7, noise_sd=0.03))

r = records[0]
print(f"first server: {r.server_id}")
print(f"  chips={r.cc}  cores/chip={r.cpc}  freq={r.cf_mhz} MHz  dimms={r.mmc}  drive={r.ddt}")
print(f"  available year {r.had_year}")
print("  level  power_w  throughput")
for obs in r.levels[::2]:
    print(f"  {obs.level:5.1f}  {obs.power_w:7.1f}  {obs.throughput:12.0f}")

# the corpus serializes to an auditable CSV and round-trips exactly
text = write_canonical_csv(records)
back, _ = read_canonical_csv(text)
print(f"\ncanonical CSV: {len(text)} bytes, round-trip identical: {back == records}")

# design matrices for the three modeling targets
for target in TargetKind:
    matrix, _ = build_design_matrix(records, target)
    print(f"{target.value:15s} X={matrix.X.shape}  y range [{matrix.y.min():.1f}, {matrix.y.max():.1f}]")

# idle power falls across hardware generations, one of the trends the
# models are expected to pick up
years = np.array([r.had_year for r in records])
idle = np.array([r.levels[0].power_w for r in records])
for lo, hi in [(2004, 2010), (2011, 2017), (2018, 2023)]:
    sel = (years >= lo) & (years <= hi)
    print(f"mean idle power {lo}-{hi}: {idle[sel].mean():6.1f} W  (n={sel.sum()})")
