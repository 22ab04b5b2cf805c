import os
import threading
import time

import numpy as np
import pytest

from latpir import he, wire
from latpir.cli import main as cli_main
from latpir.cluster import Strategy
from latpir.errors import InvalidConfig
from latpir.protocol import DbConfig, answer_batch
from latpir.server import PirClient, PirServer, ServerConfig, run_bench
from latpir.planner import choose_mode


@pytest.fixture(scope="module")
def served(proto_params, proto_db):
    records, config, db = proto_db
    scfg = ServerConfig(port=0, batch_max=8, batch_wait_ms=60)
    with PirServer(scfg, db, proto_params) as server:
        yield records, config, db, proto_params, server


# ---------------------------------------------------------------------------
# config parsing


def test_server_config_from_file(tmp_path):
    path = tmp_path / "server.cfg"
    path.write_text(
        """
        # demo config
        db = /tmp/foo.db
        port = 9999
        batch_max = 16
        batch_wait_ms = 25
        strategy = shard_all_gather
        n_workers = 2
        z_bits = 11
        l2_mb = 48
        """
    )
    cfg = ServerConfig.from_file(str(path))
    assert cfg.db_path == "/tmp/foo.db"
    assert cfg.port == 9999
    assert cfg.batch_max == 16
    assert cfg.strategy is Strategy.SHARD_ALL_GATHER
    assert cfg.n_workers == 2
    assert cfg.hardware().l2_bytes == 48 * 1024 * 1024


def test_server_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("nonsense = 1\n")
    with pytest.raises(InvalidConfig):
        ServerConfig.from_file(str(path))


# ---------------------------------------------------------------------------
# server integration


def test_single_client_window_expiry(served):
    records, config, db, params, server = served
    with PirClient("127.0.0.1", server.port, np.random.default_rng(1), client_id=10) as c:
        assert c.query(6) == records[6]
        assert c.query_coords(2, 3) == records[2 * config.d1 + 3]


def test_concurrent_clients_one_batch(served):
    records, config, db, params, server = served
    n_clients = 8
    clients = [
        PirClient("127.0.0.1", server.port, np.random.default_rng(100 + t), client_id=100 + t)
        for t in range(n_clients)
    ]
    try:
        barrier = threading.Barrier(n_clients)
        results: dict[int, tuple[bytes, bytes]] = {}

        def worker(ci, idx):
            barrier.wait()
            results[ci] = (clients[ci].query(idx), records[idx])

        before = server.batches_served
        threads = [threading.Thread(target=worker, args=(t, t * 3 % config.records))
                   for t in range(n_clients)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(results) == n_clients
        for got, want in results.values():
            assert got == want
        # all queries arrived in a burst: they fit one batch window
        assert server.batches_served - before <= 2
    finally:
        for c in clients:
            c.close()


def test_solo_vs_batched_identical_bytes(proto_params, proto_db):
    records, config, db = proto_db
    rng = np.random.default_rng(66)
    from latpir.protocol import ClientSession

    target = ClientSession.create(proto_params, config, rng, client_id=50)
    noise = ClientSession.create(proto_params, config, rng, client_id=51)
    keys = {50: target.keys, 51: noise.keys}
    q = target.gen_query(4, 4, rng)
    solo = answer_batch([q], keys, db, proto_params)[0]
    batch = [noise.gen_query_flat(int(rng.integers(0, config.records)), rng) for _ in range(3)]
    combined = answer_batch(batch[:2] + [q] + batch[2:], keys, db, proto_params)
    got = [r for r in combined if r.client_id == 50][0]
    assert wire.serialize_response(got) == wire.serialize_response(solo)


def test_pipelined_queries_reply_in_fifo_order(served, proto_params):
    """A client that fires several queries before reading gets replies in order."""
    import socket

    records, config, db, params, server = served
    rng = np.random.default_rng(77)
    from latpir.protocol import ClientSession

    session = ClientSession.create(proto_params, config, rng, client_id=90)
    with socket.create_connection(("127.0.0.1", server.port)) as sock:
        f = sock.makefile("rwb")
        wire.write_message(f, wire.serialize_evkset(90, session.keys))
        picks = [5, 41, 17]
        for idx in picks:
            wire.write_message(f, wire.serialize_query(session.gen_query_flat(idx, rng)))
        got = []
        for _ in picks:
            resp = wire.deserialize_response(wire.read_message(f), params.basis)
            got.append(resp.seq)
            idx = picks[len(got) - 1]
            assert session.decode(resp) == records[idx]
        assert got == sorted(got)


def test_malformed_message_gets_error_reply(served):
    import socket

    records, config, db, params, server = served
    with socket.create_connection(("127.0.0.1", server.port)) as sock:
        f = sock.makefile("rwb")
        f.write(wire._frame(wire.KIND_QUERY, b"garbage"))
        f.flush()
        msg = wire.read_message(f)
        code, text = wire.deserialize_error(msg)
        assert code == 1


def test_unknown_kind_gets_error_reply(served):
    import socket

    records, config, db, params, server = served
    with socket.create_connection(("127.0.0.1", server.port)) as sock:
        f = sock.makefile("rwb")
        f.write(wire._frame(99, b""))
        f.flush()
        code, text = wire.deserialize_error(wire.read_message(f))
        assert code == 2


def test_server_with_cluster_strategy(proto_params, proto_db):
    records, config, db = proto_db
    scfg = ServerConfig(port=0, batch_max=4, batch_wait_ms=40,
                        strategy=Strategy.SHARD_AGGREGATE, n_workers=2)
    with PirServer(scfg, db, proto_params) as server:
        with PirClient("127.0.0.1", server.port, np.random.default_rng(5), client_id=60) as c:
            assert c.query(11) == records[11]


@pytest.mark.slow
def test_server_at_production_profile():
    """Full socket path at N=4096: ~5 MB key upload, 128 KB query ciphertexts."""
    params = he.default_params()
    config = DbConfig(4, 4, record_bytes=16384)
    rng = np.random.default_rng(404)
    records = [rng.integers(0, 256, size=16384, dtype=np.uint8).tobytes()
               for _ in range(config.records)]
    from latpir.protocol import encode_database as enc

    db = enc(records, config, params)
    scfg = ServerConfig(port=0, batch_max=2, batch_wait_ms=40)
    with PirServer(scfg, db, params) as server:
        with PirClient("127.0.0.1", server.port, np.random.default_rng(1), client_id=7) as c:
            assert c.query(10) == records[10]
            assert c.query(3) == records[3]


def test_server_with_pipeline_engine(proto_params, proto_db):
    records, config, db = proto_db
    scfg = ServerConfig(port=0, batch_max=2, batch_wait_ms=30, engine="pipeline",
                        prime_streams=proto_params.basis.k, n_chunks=4, pipeline_workers=2)
    with PirServer(scfg, db, proto_params) as server:
        with PirClient("127.0.0.1", server.port, np.random.default_rng(6), client_id=61) as c:
            assert c.query(3) == records[3]
            assert c.query(58) == records[58]


# ---------------------------------------------------------------------------
# bench + CLI


@pytest.fixture(scope="module")
def db_image(tmp_path_factory, proto_params, proto_db):
    records, config, db = proto_db
    root = tmp_path_factory.mktemp("bench")
    db_path = str(root / "bench.db")
    wire.save_database(db_path, db)
    cfg_path = str(root / "server.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(f"db = {db_path}\n")
        fh.write(f"z_bits = {proto_params.gadget.z_bits}\n")
        fh.write(f"ell = {proto_params.gadget.ell}\n")
        fh.write(f"error_bound = {proto_params.error_bound}\n")
        fh.write("batch_max = 4\nbatch_wait_ms = 30\nport = 0\n")
    return db_path, cfg_path


def test_run_bench_report(db_image):
    db_path, cfg_path = db_image
    cfg = ServerConfig.from_file(cfg_path)
    report = run_bench(cfg, batches=2, batch=3)
    assert report.qps > 0
    assert report.allocator_traffic_bytes > 0
    assert set(report.phase_ms_per_query) >= {"ExpandQuery", "RowSel", "ColTor"}
    text = report.to_text()
    assert "qps" in text and "-- plan --" in text
    # CSV rows satisfy the planner boundary law: mode derivable from working set
    hw = cfg.hardware()
    csv = report.stage_csv().strip().split("\n")
    assert csv[0] == "phase,stage,nodes,working_set_bytes,mode,amortized_ms"
    for row in csv[1:]:
        phase, stage, nodes, ws, mode, ms = row.split(",")
        want = choose_mode(int(ws), hw)
        assert mode == want.value
        assert float(ms) >= 0


def test_cli_build_db_plan_bench(tmp_path, proto_params):
    # build-db over a raw file: 8 records of 64 bytes
    raw = tmp_path / "records.bin"
    rng = np.random.default_rng(0)
    payload = rng.integers(0, 256, size=8 * 64, dtype=np.uint8).tobytes()
    raw.write_bytes(payload)
    out_db = tmp_path / "cli.db"
    rc = cli_main([
        "build-db", "--records", str(raw), "--d0", "2", "--record-bytes", "64",
        "--out", str(out_db), "--n", "256", "--primes", "2", "--prime-bits", "27",
        "--plain-bits", "8",
    ])
    assert rc == 0 and out_db.exists()
    db, params = wire.load_database(str(out_db))
    assert db.config == DbConfig(2, 4, 64)
    assert db.encoded_bytes == db.raw_bytes * (params.basis.k * params.n * 4) // 64
    cfg = tmp_path / "server.cfg"
    cfg.write_text(f"db = {out_db}\nz_bits = 11\nerror_bound = 4\nbatch_max = 2\n")
    rc = cli_main(["plan", "--config", str(cfg), "--batch", "2"])
    assert rc == 0
    csv = tmp_path / "stages.csv"
    rc = cli_main(["bench", "--config", str(cfg), "--batches", "1", "--batch", "2",
                   "--csv", str(csv)])
    assert rc == 0 and csv.exists()


def test_cli_build_db_zero_records(tmp_path):
    raw = tmp_path / "zeros.bin"
    raw.write_bytes(b"\x00" * (16 * 64))
    out_db = tmp_path / "zeros.db"
    rc = cli_main([
        "build-db", "--records", str(raw), "--d0", "4", "--record-bytes", "64",
        "--out", str(out_db), "--n", "256", "--primes", "2", "--prime-bits", "27",
        "--plain-bits", "8",
    ])
    assert rc == 0
    db, params = wire.load_database(str(out_db))
    assert not db.data.any()
    # encoded payload is exactly (k*n*4)/record_bytes times the raw size
    assert db.encoded_bytes == db.raw_bytes * (params.basis.k * params.n * 4) // 64


def test_cli_build_db_default_profile_4x(tmp_path):
    """256 zero 16 KB records at production defaults: loadable, exactly 4x raw."""
    raw = tmp_path / "zeros16k.bin"
    raw.write_bytes(b"\x00" * (256 * 16384))
    out_db = tmp_path / "zeros16k.db"
    rc = cli_main([
        "build-db", "--records", str(raw), "--d0", "16", "--record-bytes", "16384",
        "--out", str(out_db),
    ])
    assert rc == 0
    db, params = wire.load_database(str(out_db))
    assert db.config == DbConfig(16, 16, 16384)
    assert not db.data.any()
    assert db.encoded_bytes == 4 * db.raw_bytes


def test_cli_error_exit_code(tmp_path):
    rc = cli_main(["plan", "--config", str(tmp_path / "missing.cfg")])
    assert rc == 1


def test_cli_query_against_server(tmp_path, proto_params, proto_db):
    records, config, db = proto_db
    scfg = ServerConfig(port=0, batch_max=2, batch_wait_ms=30)
    with PirServer(scfg, db, proto_params) as server:
        keys_path = tmp_path / "client.keys"
        out_path = tmp_path / "record.bin"
        rc = cli_main([
            "query", "--server", f"127.0.0.1:{server.port}", "--index", "9",
            "--keys", str(keys_path), "--out", str(out_path), "--seed", "3",
        ])
        assert rc == 0
        assert out_path.read_bytes() == records[9]
        # keys persist and are reusable
        rc = cli_main([
            "query", "--server", f"127.0.0.1:{server.port}", "--index", "12",
            "--keys", str(keys_path), "--out", str(out_path), "--seed", "4",
        ])
        assert rc == 0
        assert out_path.read_bytes() == records[12]
