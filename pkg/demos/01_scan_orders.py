"""
Slice scan orders on a small grid
=================================

Four 1-D orderings of an 8x8 map cut into 2-row and 4-column slices, the
distance profile of neighbouring pixels, and a colour-coded picture of each
ordering written as a PPM file.
"""
import sys
from pathlib import Path

import numpy as np

from slicescan.scan_geometry import (
    DIRECTIONS, SliceConfig, adjacency_profile, apply_scan, build_slice_plan, restore_merge, write_plan_ppm,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

plan = build_slice_plan(8, 8, SliceConfig(2, 4))

# each grid cell shows its position in the horizontal forward sequence
print(plan.positions("h_fwd"))

# neighbours stay close: left/right pairs are m apart, up/down pairs n apart
rep = adjacency_profile(plan)
print("max horizontal-neighbour gap:", rep.max_h_neighbor_dist)
print("max vertical-neighbour gap:", rep.max_v_neighbor_dist)

# scanning and restoring is lossless, so merging the four untouched scans gives 4F
F = np.random.default_rng(0).normal(size=(3, 8, 8))
seqs = [apply_scan(F, plan, d) for d in DIRECTIONS]
print("restore_merge == 4F:", np.allclose(restore_merge(*seqs, plan), 4 * F))

# full-map slices fall back to the plain row/column cross scan
full = build_slice_plan(4, 4, SliceConfig(4, 4))
print("v_fwd with n=W:", full.perm("v_fwd").tolist())

write_plan_ppm(plan, out / "scan_2x4.ppm")
print("wrote", out / "scan_2x4.ppm")
