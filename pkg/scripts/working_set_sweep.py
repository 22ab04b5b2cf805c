#!/usr/bin/env python3
"""Sweep batch sizes and L2 capacities to show how the hybrid boundary moves.

Prints, for each batch size, the per-stage working sets of both tree phases
and where the plan switches between operation-level and fused execution; then
sweeps the cache capacity at a fixed batch to show the transition moving to
earlier stages as L2 shrinks.
"""
import argparse
import sys

sys.path.insert(0, str(__import__("pathlib").Path(__file__).resolve().parent.parent / "src"))

from latpir import he, planner
from latpir.planner import HardwareModel, Phase
from latpir.protocol import DbConfig

MB = 1024 * 1024


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--d0", type=int, default=256)
    ap.add_argument("--d1", type=int, default=512)
    ap.add_argument("--l2-mb", type=int, default=96)
    args = ap.parse_args()

    params = he.default_params()
    config = DbConfig(args.d0, args.d1, record_bytes=16384)
    hw = HardwareModel(l2_bytes=args.l2_mb * MB)
    print(f"database {config.d0} x {config.d1}, ell = {params.gadget.ell}, "
          f"L2 = {args.l2_mb} MB\n")

    for batch in (1, 4, 8, 16, 32, 64):
        plan = planner.build_plan(config, params, batch, hw)
        exp = "".join("F" if p.mode.value == "stage" else "o" for p in plan.expand_stages)
        col = "".join("F" if p.mode.value == "stage" else "o" for p in plan.coltor_stages)
        spike = max(p.working_set for p in plan.coltor_stages)
        print(f"batch {batch:3d}: expand [{exp}] coltor [{col}] "
              f"peak working set {spike / MB:9.1f} MB")

    print("\nColTor stage-0 working set by batch (nodes x ell x 128 KB x batch):")
    for batch in (1, 8, 32):
        ws = planner.working_set(Phase.COL_TOR, 0, batch, params, config)
        print(f"  batch {batch:3d}: {ws:>14,d} B = {ws / 2**30:.2f} GiB")

    print("\ntransition stage vs. L2 capacity (batch 32):")
    for l2 in (256, 128, 96, 64, 32, 16, 8):
        plan = planner.build_plan(config, params, 32, HardwareModel(l2_bytes=l2 * MB))
        t = plan.expand_transition
        print(f"  L2 {l2:4d} MB: expansion switches to fused at stage "
              f"{t if t is not None else '-'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
