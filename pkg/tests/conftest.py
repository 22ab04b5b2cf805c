import numpy as np
import pytest
from hypothesis import settings

from latpir import he
from latpir.protocol import DbConfig, encode_database

# JIT warmup on first transform can be slow; property tests should not time out.
settings.register_profile("latpir", deadline=None, max_examples=30)
settings.load_profile("latpir")


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture(scope="session")
def tiny_params():
    """Small ring for fast HE-level tests."""
    return he.test_params(n=64, k=2, prime_bits=20, plain_bits=8, z_bits=7, error_bound=2)


@pytest.fixture(scope="session")
def proto_params():
    """Protocol-scale test profile (enough slots and noise margin for 8x8 DBs)."""
    return he.test_params()


@pytest.fixture(scope="session")
def proto_db(proto_params):
    rng = np.random.default_rng(1234)
    config = DbConfig(d0=8, d1=8, record_bytes=64)
    records = [rng.integers(0, 256, size=64, dtype=np.uint8).tobytes()
               for _ in range(config.records)]
    db = encode_database(records, config, proto_params)
    return records, config, db
