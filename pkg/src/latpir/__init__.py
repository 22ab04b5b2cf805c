"""latpir: a batched single-server lattice PIR engine.

Layers, bottom to top:

* :mod:`latpir.ring` - RNS polynomial arithmetic and the negacyclic NTT.
* :mod:`latpir.he` - BFV/RGSW primitives (keys, Subs, external product).
* :mod:`latpir.planner` - working-set model, hybrid execution plans, and the
  operation-level / fused stage executors.
* :mod:`latpir.layout` - tiled GEMM engines, layout transposition, and the
  pipelined row-selection scheduler.
* :mod:`latpir.protocol` - database encoding, query generation, the three
  server phases, and response decoding.
* :mod:`latpir.cluster` - multi-worker strategies with communication ledgers.
* :mod:`latpir.wire` / :mod:`latpir.server` / :mod:`latpir.cli` - the binary
  wire format, the batching TCP service, and the command-line tools.
"""

from .errors import InvalidArgument, InvalidConfig, InvalidState, ParseError, PirError
from .he import (
    BfvCiphertext,
    EvalKey,
    GadgetConfig,
    HeParams,
    RgswCiphertext,
    SecretKey,
    default_params,
    test_params,
)
from .protocol import (
    ClientKeys,
    ClientQuery,
    ClientSession,
    DbConfig,
    EncodedDatabase,
    QueryBatch,
    Response,
    answer_batch,
    encode_database,
)
from .ring import Domain, Modulus, RnsBasis, RnsPoly, default_basis

__all__ = [
    "BfvCiphertext", "ClientKeys", "ClientQuery", "ClientSession", "DbConfig",
    "Domain", "EncodedDatabase", "EvalKey", "GadgetConfig", "HeParams",
    "InvalidArgument", "InvalidConfig", "InvalidState", "Modulus", "ParseError",
    "PirError", "QueryBatch", "Response", "RgswCiphertext", "RnsBasis", "RnsPoly",
    "SecretKey", "answer_batch", "default_basis", "default_params",
    "encode_database", "test_params",
]

__version__ = "0.1.0"
