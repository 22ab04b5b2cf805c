"""Command-line interface: build-db, serve, query, plan, bench."""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys

import numpy as np

from . import planner, protocol, wire
from .errors import PirError
from .he import HeParams, SecretKey
from .protocol import ClientSession, DbConfig
from .ring import RnsBasis
from .server import PirClient, PirServer, ServerConfig, run_bench


def _load_records(path: str, record_bytes: int) -> list[bytes]:
    """A directory of record files (sorted by name) or one raw file split into
    fixed-size records."""
    if os.path.isdir(path):
        names = sorted(os.listdir(path))
        return [open(os.path.join(path, n), "rb").read() for n in names]
    blob = open(path, "rb").read()
    if len(blob) % record_bytes:
        raise PirError(f"raw file size {len(blob)} is not a multiple of {record_bytes}")
    return [blob[i:i + record_bytes] for i in range(0, len(blob), record_bytes)]


def cmd_build_db(args) -> int:
    records = _load_records(args.records, args.record_bytes)
    if len(records) % args.d0:
        raise PirError(f"{len(records)} records do not split into d0={args.d0} rows")
    d1 = len(records) // args.d0
    config = DbConfig(args.d0, d1, args.record_bytes)
    basis = RnsBasis.generate(args.n, args.primes, args.prime_bits)
    params = HeParams(basis, args.plain_bits)
    db = protocol.encode_database(records, config, params)
    wire.save_database(args.out, db)
    print(f"wrote {args.out}: {config.d0}x{config.d1} records, "
          f"raw {db.raw_bytes} B, encoded {db.encoded_bytes} B")
    return 0


def cmd_serve(args) -> int:
    config = ServerConfig.from_file(args.config)
    server = PirServer(config)
    print(f"serving {config.db_path} on {config.host}:{config.port} "
          f"(batch {config.batch_max} / {config.batch_wait_ms} ms)")
    server.serve_forever()
    return 0


def _save_keys(path: str, session: ClientSession) -> None:
    with open(path, "wb") as fh:
        fh.write(wire.serialize_params(session.params, session.config))
        fh.write(wire.serialize_poly(session.sk.s))
        fh.write(wire.serialize_evkset(session.client_id, session.keys))


def _load_keys(path: str) -> ClientSession:
    with open(path, "rb") as fh:
        stream = io.BufferedReader(io.BytesIO(fh.read()))
    params, config = wire.deserialize_params(wire.read_message(stream))
    s = wire.deserialize_poly(wire.read_message(stream), params.basis)
    client_id, keys = wire.deserialize_evkset(wire.read_message(stream), params.basis)
    return ClientSession(params, config, SecretKey(params, s), keys, client_id)


def cmd_query(args) -> int:
    host, _, port = args.server.rpartition(":")
    rng = np.random.default_rng(args.seed)
    session = _load_keys(args.keys) if os.path.exists(args.keys) else None
    fresh_id = int.from_bytes(os.urandom(4), "little")
    client = PirClient(host, int(port), rng, client_id=fresh_id, session=session)
    if session is None:
        _save_keys(args.keys, client.session)
        print(f"generated new session keys -> {args.keys}", file=sys.stderr)
    with client:
        record = client.query(args.index)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(record)
        print(f"wrote {len(record)} bytes to {args.out}")
    else:
        sys.stdout.buffer.write(record)
    return 0


def cmd_plan(args) -> int:
    config = ServerConfig.from_file(args.config)
    db, params = config.load()
    plan = planner.build_plan(db.config, params, args.batch or config.batch_max, config.hardware())
    sys.stdout.write(plan.to_text())
    report = planner.roofline_report(config.hardware(), db.config, params,
                                     args.batch or config.batch_max)
    sys.stdout.write("-- roofline --\n")
    sys.stdout.write(report.to_text())
    return 0


def cmd_bench(args) -> int:
    config = ServerConfig.from_file(args.config)
    report = run_bench(config, args.batches, args.batch)
    sys.stdout.write(report.to_text())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.stage_csv())
        print(f"wrote per-stage CSV to {args.csv}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latpir", description="Batched lattice PIR engine")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-db", help="encode records into a database image")
    b.add_argument("--records", required=True, help="directory of record files or one raw file")
    b.add_argument("--d0", type=int, required=True, help="row count")
    b.add_argument("--record-bytes", type=int, default=16384)
    b.add_argument("--out", required=True)
    b.add_argument("--n", type=int, default=4096, help="ring degree")
    b.add_argument("--primes", type=int, default=4, help="RNS prime count")
    b.add_argument("--prime-bits", type=int, default=27)
    b.add_argument("--plain-bits", type=int, default=32)
    b.set_defaults(fn=cmd_build_db)

    s = sub.add_parser("serve", help="run the PIR server")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_serve)

    q = sub.add_parser("query", help="fetch one record privately")
    q.add_argument("--server", required=True, help="host:port")
    q.add_argument("--index", type=int, required=True, help="flat record index")
    q.add_argument("--keys", required=True, help="session key file (created if missing)")
    q.add_argument("--out", default="", help="write the record here instead of stdout")
    q.add_argument("--seed", type=int, default=None)
    q.set_defaults(fn=cmd_query)

    pl = sub.add_parser("plan", help="print the hybrid execution plan")
    pl.add_argument("--config", required=True)
    pl.add_argument("--batch", type=int, default=0)
    pl.set_defaults(fn=cmd_plan)

    be = sub.add_parser("bench", help="benchmark batched serving in-process")
    be.add_argument("--config", required=True)
    be.add_argument("--batches", type=int, default=3)
    be.add_argument("--batch", type=int, default=0)
    be.add_argument("--csv", default="", help="write the per-stage CSV here")
    be.set_defaults(fn=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    if os.environ.get("LATPIR_LOG"):
        logging.basicConfig(level=os.environ["LATPIR_LOG"].upper())
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
