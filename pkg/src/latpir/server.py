"""Batching PIR server, matching client, and the benchmark harness.

The server speaks the length-prefixed wire protocol over TCP.  Clients upload
their evaluation keys once per session (cached by client id), then send
queries; the server forms a batch when ``batch_max`` queries are pending or
``batch_wait_ms`` elapsed since the first pending query, whichever comes
first, runs the pipeline (optionally under a multi-worker strategy), and
replies to each connection.  Responses do not depend on what else shared the
batch.
"""
from __future__ import annotations

import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import cluster, planner, protocol, wire
from .cluster import ShardSpec, Strategy
from .errors import InvalidArgument, InvalidConfig, ParseError
from .he import GadgetConfig, HeParams
from .layout import PipelineConfig
from .planner import HardwareModel
from .protocol import ClientKeys, ClientQuery, EncodedDatabase, Response

log = logging.getLogger("latpir")
if os.environ.get("LATPIR_LOG"):
    logging.basicConfig(level=os.environ["LATPIR_LOG"].upper())


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ServerConfig:
    """Key-value server configuration; see ``from_file`` for the format."""

    db_path: str = ""
    host: str = "127.0.0.1"
    port: int = 7413
    batch_max: int = 32
    batch_wait_ms: int = 50
    strategy: Strategy = Strategy.NAIVE_BATCH
    n_workers: int = 1
    engine: str = "auto"
    prime_streams: int = 4
    n_chunks: int = 8
    pipeline_workers: int = 4
    z_bits: int = 22
    ell: int = 0  # 0 derives the smallest ell with z**ell > Q
    error_bound: int = 16
    l2_mb: int = 96
    dram_gbps: float = 1660.0
    peak_tops: float = 31.5
    scratch_kb: int = 96
    seed: int = 1234

    @classmethod
    def from_file(cls, path: str) -> "ServerConfig":
        """Parse ``key = value`` lines; '#' starts a comment."""
        cfg = cls()
        casts = {f.name: type(getattr(cfg, f.name)) for f in cfg.__dataclass_fields__.values()}
        with open(path) as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InvalidConfig(f"{path}:{ln}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                name = {"db": "db_path", "workers": "n_workers"}.get(key, key)
                if name not in casts:
                    raise InvalidConfig(f"{path}:{ln}: unknown key {key!r}")
                if name == "strategy":
                    try:
                        cfg.strategy = {"single": Strategy.NAIVE_BATCH}.get(value) or Strategy(value)
                    except ValueError:
                        raise InvalidConfig(f"{path}:{ln}: unknown strategy {value!r}") from None
                else:
                    caster = casts[name]
                    setattr(cfg, name, caster(value))
        return cfg

    def hardware(self) -> HardwareModel:
        return HardwareModel(
            l2_bytes=self.l2_mb * 1024 * 1024,
            dram_bandwidth=self.dram_gbps * 1e9,
            peak_ops=self.peak_tops * 1e12,
            scratch_bytes=self.scratch_kb * 1024,
        )

    def pipeline(self) -> PipelineConfig | None:
        if self.engine != "pipeline":
            return None
        return PipelineConfig(self.prime_streams, self.n_chunks, self.pipeline_workers)

    def load(self) -> tuple[EncodedDatabase, HeParams]:
        """Load the DB image and rebuild the parameter profile with this config's gadget."""
        if not self.db_path:
            raise InvalidConfig("config is missing the db path")
        db, params = wire.load_database(self.db_path)
        ell = self.ell
        if ell <= 0:
            ell = 1
            while (1 << (self.z_bits * ell)) <= params.basis.big_q:
                ell += 1
        params = HeParams(params.basis, params.plain_bits,
                          GadgetConfig(self.z_bits, ell), self.error_bound)
        db.params = params
        return db, params


# ---------------------------------------------------------------------------
# server


class _PendingQuery:
    __slots__ = ("conn", "query", "arrived")

    def __init__(self, conn: "_Connection", query: ClientQuery):
        self.conn = conn
        self.query = query
        self.arrived = time.monotonic()


class _Connection:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.file = sock.makefile("rwb")
        self.write_lock = threading.Lock()

    def reply(self, data: bytes) -> None:
        with self.write_lock:
            try:
                wire.write_message(self.file, data)
            except (OSError, ValueError):
                pass

    def close(self) -> None:
        try:
            self.file.close()
            self.sock.close()
        except OSError:
            pass


class PirServer:
    """Threaded batching server; use as a context manager in tests."""

    MAX_PAYLOAD = 1 << 30

    def __init__(self, config: ServerConfig, db: EncodedDatabase | None = None,
                 params: HeParams | None = None):
        self.config = config
        if db is None or params is None:
            db, params = config.load()
        self.db = db
        self.params = params
        self.keys: dict[int, ClientKeys] = {}
        self.keys_lock = threading.Lock()
        self.pending: list[_PendingQuery] = []
        self.pending_cond = threading.Condition()
        self.stop_event = threading.Event()
        self.listener: socket.socket | None = None
        self.port = config.port
        self._threads: list[threading.Thread] = []
        self.batches_served = 0

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        self.listener = socket.create_server((self.config.host, self.config.port))
        self.port = self.listener.getsockname()[1]
        self.listener.settimeout(0.2)
        acceptor = threading.Thread(target=self._accept_loop, daemon=True, name="pir-accept")
        collector = threading.Thread(target=self._collect_loop, daemon=True, name="pir-collect")
        self._threads = [acceptor, collector]
        acceptor.start()
        collector.start()
        log.info("serving on %s:%d", self.config.host, self.port)

    def stop(self) -> None:
        self.stop_event.set()
        with self.pending_cond:
            self.pending_cond.notify_all()
        if self.listener:
            self.listener.close()
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self) -> "PirServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self.stop_event.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # -- network ------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self.stop_event.is_set():
            try:
                sock, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn = _Connection(sock)
            t = threading.Thread(target=self._conn_loop, args=(conn,), daemon=True)
            t.start()

    def _conn_loop(self, conn: _Connection) -> None:
        basis = self.params.basis
        try:
            while not self.stop_event.is_set():
                try:
                    msg = wire.read_message(conn.file, self.MAX_PAYLOAD)
                except ParseError as exc:
                    if "exceeds limit" in str(exc):
                        break  # oversize payload: drop the connection
                    conn.reply(wire.serialize_error(1, str(exc)))
                    continue
                except (OSError, ValueError):
                    break
                if msg is None:
                    break
                try:
                    kind, _ = wire.parse_header(msg)
                    if kind == wire.KIND_PARAMS:
                        conn.reply(wire.serialize_params(self.params, self.db.config))
                    elif kind == wire.KIND_EVKSET:
                        cid, keys = wire.deserialize_evkset(msg, basis)
                        with self.keys_lock:
                            self.keys[cid] = keys
                    elif kind == wire.KIND_QUERY:
                        query = wire.deserialize_query(msg, basis)
                        with self.pending_cond:
                            self.pending.append(_PendingQuery(conn, query))
                            self.pending_cond.notify_all()
                    else:
                        conn.reply(wire.serialize_error(2, f"unexpected message kind {kind}"))
                except ParseError as exc:
                    conn.reply(wire.serialize_error(1, str(exc)))
        finally:
            conn.close()

    # -- batching -------------------------------------------------------------

    def _collect_loop(self) -> None:
        wait_s = self.config.batch_wait_ms / 1000.0
        while not self.stop_event.is_set():
            with self.pending_cond:
                while not self.pending and not self.stop_event.is_set():
                    self.pending_cond.wait(timeout=0.1)
                if self.stop_event.is_set():
                    return
                deadline = self.pending[0].arrived + wait_s
                while (len(self.pending) < self.config.batch_max
                       and time.monotonic() < deadline
                       and not self.stop_event.is_set()):
                    self.pending_cond.wait(timeout=max(deadline - time.monotonic(), 0.001))
                batch = self.pending[: self.config.batch_max]
                del self.pending[: len(batch)]
            if batch:
                self._serve_batch(batch)

    def _serve_batch(self, batch: list[_PendingQuery]) -> None:
        queries = [p.query for p in batch]
        with self.keys_lock:
            keys = dict(self.keys)
        try:
            responses = self.answer(queries, keys)
        except Exception as exc:  # report per connection rather than dying
            log.exception("batch failed")
            for p in batch:
                p.conn.reply(wire.serialize_error(3, f"batch failed: {exc}"))
            return
        self.batches_served += 1
        for p, resp in zip(batch, responses):
            p.conn.reply(wire.serialize_response(resp))

    def answer(self, queries: list[ClientQuery], keys: dict[int, ClientKeys]) -> list[Response]:
        cfg = self.config
        if cfg.n_workers > 1:
            spec = ShardSpec.even(self.db.config.d1, cfg.n_workers)
            responses, _ = cluster.run_strategy(queries, keys, self.db, cfg.strategy, spec, self.params)
            return responses
        return protocol.answer_batch(
            queries, keys, self.db, self.params,
            hw=cfg.hardware(), engine=cfg.engine, pipeline=cfg.pipeline(),
        )


# ---------------------------------------------------------------------------
# client


class PirClient:
    """Connects, syncs parameters, uploads keys once, then queries records.

    Pass a previously created ``session`` to reuse saved key material; it must
    match the server's parameter profile.
    """

    def __init__(self, host: str, port: int, rng: np.random.Generator,
                 client_id: int = 0, session: protocol.ClientSession | None = None):
        self.sock = socket.create_connection((host, port))
        self.file = self.sock.makefile("rwb")
        self.rng = rng
        wire.write_message(self.file, wire.params_request())
        self.params, self.config = wire.deserialize_params(self._read())
        if session is not None:
            if [m.q for m in session.params.basis.moduli] != [m.q for m in self.params.basis.moduli] \
                    or session.params.n != self.params.n:
                raise InvalidArgument("saved session keys do not match the server's parameters")
            self.session = session
        else:
            self.session = protocol.ClientSession.create(self.params, self.config, rng, client_id)
        self.client_id = self.session.client_id
        wire.write_message(self.file, wire.serialize_evkset(self.client_id, self.session.keys))

    def _read(self) -> bytes:
        msg = wire.read_message(self.file)
        if msg is None:
            raise ParseError("server closed the connection", 0)
        kind, _ = wire.parse_header(msg)
        if kind == wire.KIND_ERROR:
            code, text = wire.deserialize_error(msg)
            raise InvalidArgument(f"server error {code}: {text}")
        return msg

    def query(self, index: int) -> bytes:
        q = self.session.gen_query_flat(index, self.rng)
        wire.write_message(self.file, wire.serialize_query(q))
        resp = wire.deserialize_response(self._read(), self.params.basis)
        return self.session.decode(resp)

    def query_coords(self, i_star: int, j_star: int) -> bytes:
        q = self.session.gen_query(i_star, j_star, self.rng)
        wire.write_message(self.file, wire.serialize_query(q))
        resp = wire.deserialize_response(self._read(), self.params.basis)
        return self.session.decode(resp)

    def close(self) -> None:
        try:
            self.file.close()
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "PirClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# benchmark harness


@dataclass
class BenchReport:
    batch: int
    batches: int
    phase_ms_per_query: dict[str, float]
    qps: float
    allocator_traffic_bytes: int
    stage_rows: list[tuple]  # (phase, stage, nodes, working_set, mode, amortized_ms)
    plan_text: str
    ledger_text: str = ""

    def to_text(self) -> str:
        lines = [
            f"batch\t{self.batch}",
            f"batches\t{self.batches}",
            f"qps\t{self.qps:.3f}",
            f"allocator_traffic_bytes\t{self.allocator_traffic_bytes}",
        ]
        for phase, ms in self.phase_ms_per_query.items():
            lines.append(f"amortized_ms\t{phase}\t{ms:.3f}")
        lines.append("-- plan --")
        lines.append(self.plan_text.rstrip("\n"))
        if self.ledger_text:
            lines.append("-- comm --")
            lines.append(self.ledger_text.rstrip("\n"))
        return "\n".join(lines) + "\n"

    def stage_csv(self) -> str:
        rows = ["phase,stage,nodes,working_set_bytes,mode,amortized_ms"]
        for phase, stage, nodes, ws, mode, ms in self.stage_rows:
            rows.append(f"{phase},{stage},{nodes},{ws},{mode},{ms:.4f}")
        return "\n".join(rows) + "\n"


def run_bench(config: ServerConfig, batches: int, batch: int | None = None) -> BenchReport:
    """Serve seeded random batches in process and report amortized costs."""
    db, params = config.load()
    bsz = batch or config.batch_max
    rng = np.random.default_rng(config.seed)
    session = protocol.ClientSession.create(params, db.config, rng, client_id=0)
    keys = {0: session.keys}
    hw = config.hardware()
    plan = planner.build_plan(db.config, params, bsz, hw)

    phase_totals: dict[str, float] = {}
    stage_acc: dict[tuple, list] = {}
    total_alloc = 0
    wall = 0.0
    for _ in range(batches):
        queries = [session.gen_query_flat(int(rng.integers(0, db.config.records)), rng)
                   for _ in range(bsz)]
        stats = protocol.ServeStats()
        t0 = time.perf_counter()
        protocol.answer_batch(queries, keys, db, params, hw=hw, plan=plan,
                              engine=config.engine, pipeline=config.pipeline(), stats=stats)
        wall += time.perf_counter() - t0
        for phase, secs in stats.phase_seconds.items():
            phase_totals[phase] = phase_totals.get(phase, 0.0) + secs
        for st in stats.stages:
            key = (st.phase, st.stage, st.nodes, st.working_set, st.mode)
            stage_acc.setdefault(key, []).append(st.seconds)
        total_alloc += stats.arena_total_bytes

    n_queries = batches * bsz
    phase_ms = {ph: tot / n_queries * 1000 for ph, tot in phase_totals.items()}
    stage_rows = [
        key + (sum(v) / n_queries * 1000,) for key, v in stage_acc.items()
    ]
    ledger_text = ""
    if config.n_workers > 1:
        led = cluster.comm_bytes(config.strategy, db.config, bsz, config.n_workers, params)
        ledger_text = led.to_text(config.strategy, config.n_workers,
                                  link_bandwidth=config.dram_gbps * 1e9)
    return BenchReport(
        batch=bsz, batches=batches, phase_ms_per_query=phase_ms,
        qps=n_queries / wall if wall else 0.0,
        allocator_traffic_bytes=total_alloc,
        stage_rows=sorted(stage_rows), plan_text=plan.to_text(), ledger_text=ledger_text,
    )
