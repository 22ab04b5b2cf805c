#!/usr/bin/env python3
"""End-to-end demo: build a database, answer batched queries, show the costs.

Usage:
    python3 scripts/demo_roundtrip.py                 # small fast profile
    python3 scripts/demo_roundtrip.py --full          # production profile (N=4096, 16 KB records)
    python3 scripts/demo_roundtrip.py --batch 8 --queries 16
"""
import argparse
import sys
import time

import numpy as np

sys.path.insert(0, str(__import__("pathlib").Path(__file__).resolve().parent.parent / "src"))

from latpir import he, planner, wire
from latpir.cluster import Strategy, comm_bytes
from latpir.planner import HardwareModel
from latpir.protocol import ClientSession, DbConfig, ServeStats, answer_batch, encode_database


def fmt_bytes(n: float) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if n < 1024:
            return f"{n:.1f} {unit}"
        n /= 1024
    return f"{n:.1f} TiB"


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true", help="production profile (slower)")
    ap.add_argument("--d0", type=int, default=0)
    ap.add_argument("--d1", type=int, default=0)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--queries", type=int, default=8)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    if args.full:
        params = he.default_params()
        config = DbConfig(args.d0 or 16, args.d1 or 16, record_bytes=16384)
    else:
        params = he.test_params()
        config = DbConfig(args.d0 or 8, args.d1 or 8, record_bytes=64)

    rng = np.random.default_rng(args.seed)
    print(f"ring: n={params.n}, k={params.basis.k}, Q ~= 2^{params.basis.big_q.bit_length() - 1}")
    print(f"plaintext: P = 2^{params.plain_bits}; gadget: z = 2^{params.gadget.z_bits}, "
          f"ell = {params.gadget.ell}")
    print(f"database: {config.d0} x {config.d1} records of {config.record_bytes} B")

    t0 = time.perf_counter()
    records = [rng.integers(0, 256, size=config.record_bytes, dtype=np.uint8).tobytes()
               for _ in range(config.records)]
    db = encode_database(records, config, params)
    print(f"encode: {time.perf_counter() - t0:.2f}s "
          f"(raw {fmt_bytes(db.raw_bytes)} -> encoded {fmt_bytes(db.encoded_bytes)}, "
          f"{db.encoded_bytes / db.raw_bytes:.0f}x)")

    t0 = time.perf_counter()
    session = ClientSession.create(params, config, rng)
    print(f"client keygen: {time.perf_counter() - t0:.2f}s "
          f"(query size {fmt_bytes(wire.serialized_ct_bytes(params))})")

    plan = planner.build_plan(config, params, args.batch, HardwareModel())
    print("\nexecution plan:")
    print(plan.to_text())

    keys = {0: session.keys}
    served = 0
    wall = 0.0
    while served < args.queries:
        bsz = min(args.batch, args.queries - served)
        queries, wants = [], []
        for _ in range(bsz):
            idx = int(rng.integers(0, config.records))
            queries.append(session.gen_query_flat(idx, rng))
            wants.append(records[idx])
        stats = ServeStats()
        t0 = time.perf_counter()
        responses = answer_batch(queries, keys, db, params, plan=plan, stats=stats)
        dt = time.perf_counter() - t0
        wall += dt
        for resp, want in zip(responses, wants):
            assert session.decode(resp) == want, "record mismatch"
        served += bsz
        phase_txt = ", ".join(f"{k} {v * 1000:.0f}ms" for k, v in stats.phase_seconds.items())
        print(f"batch of {bsz}: {dt:.2f}s ({phase_txt})")

    print(f"\n{served} queries correct; amortized {wall / served * 1000:.1f} ms/query "
          f"({served / wall:.1f} QPS)")

    led = comm_bytes(Strategy.SHARD_ALL_GATHER, config, args.batch, 2, params)
    print(f"2-worker all-gather volume at batch {args.batch}: "
          f"{fmt_bytes(led.after_expand_bytes)} after expansion, "
          f"{fmt_bytes(led.after_coltor_bytes)} after the tournament")
    return 0


if __name__ == "__main__":
    sys.exit(main())
