"""Multi-worker execution strategies with exact communication accounting.

Three strategies:

* naive batch parallelism: queries are split across workers, each holding a
  full database replica; no inter-worker traffic.
* sharding with response aggregation: the database is partitioned along the
  column axis; every worker expands all queries itself, answers its shard
  with the low column bits, and ships one ciphertext per query to the
  coordinator, which finishes the remaining log2(n_workers) tournament stages
  with the high column bits.
* sharding with all-gather: expansion is split across workers
  (batch/n_workers queries each) and the expanded row ciphertexts are
  gathered and redistributed so every worker can answer its shard for the
  whole batch; the remainder matches the aggregation strategy.

Workers run as threads behind byte-frame channels (wire-format messages), so
the ledgers count real serialized bytes.  The coordinator is the orchestrating
thread, not one of the workers.  The pinned ledger counters follow the
closed forms: the all-gather volume counts each expanded row ciphertext once
(batch * d0 ciphertexts, independent of database size) and aggregation counts
one ciphertext per query per worker; the per-query RGSW material an expanding
worker shares rides in a separate sidecar counter.
"""
from __future__ import annotations

import queue
import threading
import traceback
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import protocol, wire
from .errors import InvalidArgument, InvalidState
from .he import HeParams, ct_from_raw
from .layout import LayoutKind
from .protocol import ClientKeys, ClientQuery, DbConfig, EncodedDatabase, Response


class Strategy(Enum):
    NAIVE_BATCH = "naive"
    SHARD_AGGREGATE = "shard_aggregate"
    SHARD_ALL_GATHER = "shard_all_gather"


@dataclass(frozen=True)
class ShardSpec:
    """Column partition of the database across workers.

    Ranges must tile [0, d1) in order with power-of-two widths so each worker
    can run a local tournament and the coordinator a cross-worker one.
    """

    n_workers: int
    ranges: tuple[tuple[int, int], ...]

    @classmethod
    def even(cls, d1: int, n_workers: int) -> "ShardSpec":
        if n_workers < 1 or d1 % n_workers:
            raise InvalidArgument(f"{n_workers} workers cannot evenly shard d1={d1}")
        width = d1 // n_workers
        return cls(n_workers, tuple((w * width, (w + 1) * width) for w in range(n_workers)))

    def validate(self, d1: int) -> None:
        if len(self.ranges) != self.n_workers:
            raise InvalidArgument("one column range per worker is required")
        if self.n_workers & (self.n_workers - 1):
            raise InvalidArgument("worker count must be a power of two")
        cursor = 0
        for lo, hi in self.ranges:
            if lo != cursor or hi <= lo:
                raise InvalidArgument(f"ranges must tile [0, {d1}) in order")
            width = hi - lo
            if width & (width - 1):
                raise InvalidArgument(f"shard width {width} is not a power of two")
            cursor = hi
        if cursor != d1:
            raise InvalidArgument(f"ranges cover [0, {cursor}) but d1={d1}")


@dataclass
class CommLedger:
    """Byte counters for the two inter-worker synchronization points.

    ``rgsw_sidecar_bytes`` tracks the per-query RGSW material shared under
    the all-gather strategy; the headline volume formulas count only the
    expanded row ciphertexts, matching their independence from d1.
    """

    after_expand_bytes: int = 0
    after_coltor_bytes: int = 0
    rgsw_sidecar_bytes: int = 0
    per_link: dict = field(default_factory=dict, compare=False)

    def add(self, phase: str, worker: int, nbytes: int) -> None:
        if phase == "expand":
            self.after_expand_bytes += nbytes
        elif phase == "coltor":
            self.after_coltor_bytes += nbytes
        else:
            self.rgsw_sidecar_bytes += nbytes
        key = (worker, phase)
        self.per_link[key] = self.per_link.get(key, 0) + nbytes

    def modeled_seconds(self, link_bandwidth: float) -> dict[str, float]:
        if link_bandwidth <= 0:
            raise InvalidArgument("link bandwidth must be positive")
        return {
            "after_expand": self.after_expand_bytes / link_bandwidth,
            "after_coltor": self.after_coltor_bytes / link_bandwidth,
        }

    def to_text(self, strategy: Strategy, n_workers: int, link_bandwidth: float | None = None) -> str:
        rows = [("after_expand", self.after_expand_bytes), ("after_coltor", self.after_coltor_bytes)]
        lines = ["strategy\tn_workers\tphase\tbytes\tmodeled_seconds"]
        for phase, nbytes in rows:
            modeled = f"{nbytes / link_bandwidth:.9f}" if link_bandwidth else "-"
            lines.append(f"{strategy.value}\t{n_workers}\t{phase}\t{nbytes}\t{modeled}")
        return "\n".join(lines) + "\n"


def comm_bytes(
    strategy: Strategy, config: DbConfig, batch: int, n_workers: int, params: HeParams
) -> CommLedger:
    """Closed-form predicted ledger; run_strategy must measure exactly this."""
    led = CommLedger()
    if n_workers <= 1 or strategy is Strategy.NAIVE_BATCH:
        return led
    ct = wire.serialized_ct_bytes(params)
    led.after_coltor_bytes = batch * n_workers * ct
    if strategy is Strategy.SHARD_ALL_GATHER:
        led.after_expand_bytes = batch * config.d0 * ct
        led.rgsw_sidecar_bytes = batch * (config.d1.bit_length() - 1) * _rgsw_wire_bytes(params)
    return led


def _rgsw_wire_bytes(params: HeParams) -> int:
    ct_body = 6 + 2 * params.basis.k * params.n * 4
    return wire.HEADER_BYTES + 3 + 2 * params.gadget.ell * ct_body


def shard_database(db: EncodedDatabase, spec: ShardSpec) -> list[EncodedDatabase]:
    """Disjoint column slices; concatenation reconstructs the database exactly."""
    spec.validate(db.config.d1)
    out = []
    for lo, hi in spec.ranges:
        cfg = DbConfig(db.config.d0, hi - lo, db.config.record_bytes)
        if db.layout is LayoutKind.P_MAJOR:
            data = np.ascontiguousarray(db.data[lo:hi])
        else:
            data = np.ascontiguousarray(db.data[:, lo:hi])
        out.append(EncodedDatabase(cfg, db.params, data, db.layout))
    return out


# ---------------------------------------------------------------------------
# worker plumbing


class _Worker(threading.Thread):
    """One in-process worker: a thread with byte-frame inbox/outbox channels."""

    def __init__(self, wid: int, db: EncodedDatabase, params: HeParams):
        super().__init__(daemon=True, name=f"pir-worker-{wid}")
        self.wid = wid
        self.db = db
        self.params = params
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()

    def send(self, tag: str, frames: list[bytes]) -> None:
        self.inbox.put((tag, frames))

    def recv(self):
        tag, frames = self.outbox.get()
        if tag == "error":
            raise InvalidState(f"worker {self.wid} failed:\n{frames[0].decode()}")
        return tag, frames

    def run(self) -> None:
        basis = self.params.basis
        queries: list[ClientQuery] = []
        keys: dict[int, ClientKeys] = {}
        gathered_rows: list[list] = []
        gathered_rgsws: list[list] = []
        while True:
            tag, frames = self.inbox.get()
            try:
                if tag == "stop":
                    return
                elif tag == "keys":
                    for f in frames:
                        cid, ck = wire.deserialize_evkset(f, basis)
                        keys[cid] = ck
                    self.outbox.put(("ok", []))
                elif tag == "queries":
                    queries = [wire.deserialize_query(f, basis) for f in frames]
                    self.outbox.put(("ok", []))
                elif tag == "run_full":
                    resps = protocol.answer_batch(queries, keys, self.db, self.params)
                    self.outbox.put(("responses", [wire.serialize_response(r) for r in resps]))
                elif tag == "expand":
                    # all-gather: expand own queries, share row cts + rgsw sidecar
                    klist = [keys[q.client_id] for q in queries]
                    expanded = protocol.expand_query_batch(
                        queries, klist, _full_config(self.db.config, frames), self.params
                    )
                    out_frames = []
                    for ex, ck in zip(expanded, klist):
                        rgsws = protocol.build_rgsw_from_expanded(ex.col_cts, ck, self.params)
                        for ct in ex.row_cts:
                            out_frames.append(wire.serialize_ct(ct))
                        for rg in rgsws:
                            out_frames.append(wire.serialize_rgsw(rg))
                    self.outbox.put(("expanded", out_frames))
                elif tag == "gathered":
                    d0 = self.db.config.d0
                    gathered_rows, gathered_rgsws = [], []
                    i = 0
                    while i < len(frames):
                        rows = [wire.deserialize_ct(frames[i + r], basis) for r in range(d0)]
                        i += d0
                        rg = []
                        for _ in range(_low_bits(self.db.config.d1)):
                            rg.append(wire.deserialize_rgsw(frames[i], basis))
                            i += 1
                        gathered_rows.append(rows)
                        gathered_rgsws.append(rg)
                    self.outbox.put(("ok", []))
                elif tag == "run_shard":
                    # aggregate: expand everything locally, answer own shard
                    klist = [keys[q.client_id] for q in queries]
                    full_cfg = _full_config(self.db.config, frames)
                    expanded = protocol.expand_query_batch(queries, klist, full_cfg, self.params)
                    rows = [ex.row_cts for ex in expanded]
                    rgsws = [
                        protocol.build_rgsw_from_expanded(ex.col_cts, ck, self.params)
                        for ex, ck in zip(expanded, klist)
                    ]
                    out = self._answer_shard(rows, rgsws)
                    self.outbox.put(("partials", out))
                elif tag == "run_gathered":
                    out = self._answer_shard(gathered_rows, gathered_rgsws)
                    self.outbox.put(("partials", out))
                else:
                    raise InvalidArgument(f"unknown worker command {tag!r}")
            except Exception:
                self.outbox.put(("error", [traceback.format_exc().encode()]))

    def _answer_shard(self, rows_per_query, rgsws_per_query) -> list[bytes]:
        """Row selection plus the local tournament over this worker's columns."""
        expanded = [protocol.ExpandedQuery(rows, []) for rows in rows_per_query]
        in0 = protocol._expanded_to_in0(expanded, self.params)
        out_pm, _ = protocol.row_select_raw(in0, self.db, self.params)
        state = protocol._out_to_stack(out_pm, self.params)
        local_bits = _low_bits(self.db.config.d1)
        low_rgsws = [rg[:local_bits] for rg in rgsws_per_query]
        if local_bits:
            final = protocol.col_tournament_batch(state, low_rgsws, self.params)
        else:
            final = state[:, 0]
        return [wire.serialize_ct(ct_from_raw(final[b], self.params.basis))
                for b in range(final.shape[0])]


def _low_bits(d1_local: int) -> int:
    return d1_local.bit_length() - 1


def _full_config(shard_cfg: DbConfig, frames: list[bytes]) -> DbConfig:
    return DbConfig(shard_cfg.d0, int(frames[0].decode()), shard_cfg.record_bytes)


# ---------------------------------------------------------------------------
# strategy orchestration


def run_strategy(
    queries: list[ClientQuery],
    keys_by_client: dict[int, ClientKeys],
    db: EncodedDatabase,
    strategy: Strategy,
    spec: ShardSpec,
    params: HeParams,
) -> tuple[list[Response], CommLedger]:
    """Execute a batch under the chosen strategy; responses match the query order
    and are bit-identical to single-worker execution."""
    if spec.n_workers < 1:
        raise InvalidArgument("need at least one worker")
    if strategy is Strategy.NAIVE_BATCH or spec.n_workers == 1:
        return _run_naive(queries, keys_by_client, db, spec, params)
    spec.validate(db.config.d1)
    if strategy is Strategy.SHARD_AGGREGATE:
        return _run_sharded(queries, keys_by_client, db, spec, params, all_gather=False)
    if strategy is Strategy.SHARD_ALL_GATHER:
        return _run_sharded(queries, keys_by_client, db, spec, params, all_gather=True)
    raise InvalidArgument(f"unknown strategy {strategy}")


def _assign_round_robin(count: int, n_workers: int) -> list[list[int]]:
    out = [[] for _ in range(n_workers)]
    for i in range(count):
        out[i % n_workers].append(i)
    return out


def _keys_frames(queries: list[ClientQuery], keys_by_client: dict[int, ClientKeys]) -> list[bytes]:
    seen, frames = set(), []
    for q in queries:
        if q.client_id not in seen:
            seen.add(q.client_id)
            if q.client_id not in keys_by_client:
                raise InvalidState(f"no uploaded keys for client {q.client_id}")
            frames.append(wire.serialize_evkset(q.client_id, keys_by_client[q.client_id]))
    return frames


def _run_naive(queries, keys_by_client, db, spec, params) -> tuple[list[Response], CommLedger]:
    ledger = CommLedger()
    n = spec.n_workers
    workers = [_Worker(w, db, params) for w in range(n)]
    for w in workers:
        w.start()
    try:
        assignment = _assign_round_robin(len(queries), n)
        for w, idxs in zip(workers, assignment):
            qs = [queries[i] for i in idxs]
            if not qs:
                continue
            w.send("keys", _keys_frames(qs, keys_by_client))
            w.recv()
            w.send("queries", [wire.serialize_query(q) for q in qs])
            w.recv()
            w.send("run_full", [])
        responses: list[Response | None] = [None] * len(queries)
        for w, idxs in zip(workers, assignment):
            if not idxs:
                continue
            _, frames = w.recv()
            for i, f in zip(idxs, frames):
                responses[i] = wire.deserialize_response(f, params.basis)
        return responses, ledger
    finally:
        for w in workers:
            w.send("stop", [])


def _run_sharded(
    queries, keys_by_client, db, spec, params, all_gather: bool
) -> tuple[list[Response], CommLedger]:
    ledger = CommLedger()
    config = db.config
    shards = shard_database(db, spec)
    workers = [_Worker(w, shards[w], params) for w in range(spec.n_workers)]
    for w in workers:
        w.start()
    try:
        klist = [keys_by_client.get(q.client_id) for q in queries]
        if any(k is None for k in klist):
            raise InvalidState("missing client keys for the batch")
        d1_frames = [str(config.d1).encode()]
        low_bits = _low_bits(shards[0].config.d1)
        total_bits = _low_bits(config.d1)

        if all_gather:
            assignment = _assign_round_robin(len(queries), spec.n_workers)
            for w, idxs in zip(workers, assignment):
                qs = [queries[i] for i in idxs]
                if qs:
                    w.send("keys", _keys_frames(qs, keys_by_client))
                    w.recv()
                    w.send("queries", [wire.serialize_query(q) for q in qs])
                    w.recv()
                w.send("expand", d1_frames)
            # gather: row cts are the headline volume, rgsws ride as sidecar
            per_query_frames: list[list[bytes] | None] = [None] * len(queries)
            high_rgsws: list[list] = [None] * len(queries)
            frames_per_query = config.d0 + total_bits
            for w, idxs in zip(workers, assignment):
                _, frames = w.recv()
                for slot, qi in enumerate(idxs):
                    chunk = frames[slot * frames_per_query:(slot + 1) * frames_per_query]
                    for f in chunk[: config.d0]:
                        ledger.add("expand", w.wid, len(f))
                    for f in chunk[config.d0:]:
                        ledger.add("rgsw", w.wid, len(f))
                    per_query_frames[qi] = chunk
                    high_rgsws[qi] = [
                        wire.deserialize_rgsw(f, params.basis)
                        for f in chunk[config.d0 + low_bits:]
                    ]
            # broadcast the gathered set (row cts + low-bit rgsws) to every worker
            bcast: list[bytes] = []
            for chunk in per_query_frames:
                bcast.extend(chunk[: config.d0])
                bcast.extend(chunk[config.d0: config.d0 + low_bits])
            for w in workers:
                w.send("gathered", bcast)
            for w in workers:
                w.recv()
            for w in workers:
                w.send("run_gathered", [])
        else:
            key_frames = _keys_frames(queries, keys_by_client)
            query_frames = [wire.serialize_query(q) for q in queries]
            for w in workers:
                w.send("keys", key_frames)
                w.recv()
                w.send("queries", query_frames)
                w.recv()
                w.send("run_shard", d1_frames)
            # the coordinator expands on its own to build the high-bit rgsws
            expanded = protocol.expand_query_batch(queries, klist, config, params)
            high_rgsws = [
                protocol.build_rgsw_from_expanded(ex.col_cts, k, params)[low_bits:]
                for ex, k in zip(expanded, klist)
            ]

        # collect one ciphertext per query per worker, counted as coltor traffic
        partials = np.empty(
            (len(queries), spec.n_workers, 2, params.basis.k, params.n), dtype=np.uint64
        )
        for w in workers:
            _, frames = w.recv()
            for qi, f in enumerate(frames):
                ledger.add("coltor", w.wid, len(f))
                ct = wire.deserialize_ct(f, params.basis)
                partials[qi, w.wid] = ct.raw()

        final = protocol.col_tournament_batch(partials, high_rgsws, params)
        responses = [
            Response(ct_from_raw(final[i], params.basis), q.client_id, q.seq)
            for i, q in enumerate(queries)
        ]
        return responses, ledger
    finally:
        for w in workers:
            w.send("stop", [])
