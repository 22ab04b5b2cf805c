"""The three server phases (query expansion, row selection, column tournament)
plus database encoding, client query generation, and response decoding.

Query format: the client packs everything into one ciphertext.  Coefficient
slots [0, d0) hold the row indicator scaled by Delta; slots
[d0, d0 + log2(d1)*ell) hold the column-bit digit payloads bit_j * z^i (no
Delta scaling).  Every packed slot is pre-multiplied by the inverse of the
expansion tree size mod Q, so after the oblivious expansion doubles amplitudes
once per stage the expanded ciphertexts carry the exact phases
Delta * indicator and z^i * bit_j.

Column selection consumes one RGSW per column bit, assembled from the
expanded ciphertexts: the b-column rows are the expanded payload ciphertexts
themselves, and the a-column rows are synthesized by an external product with
a client-provided RGSW encryption of the secret (onion mode).  A reference
mode where the client encrypts the RGSWs directly is kept as a correctness
baseline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import he, layout, planner, ring
from .errors import InvalidArgument, InvalidState
from .he import BfvCiphertext, EvalKey, HeParams, RgswCiphertext, SecretKey, ct_from_raw
from .layout import LayoutKind, PipelineConfig, TileConfig
from .planner import Arena, ExecMode, ExecutionPlan, HardwareModel, Phase
from .ring import Domain, RnsPoly, U64


# ---------------------------------------------------------------------------
# database


@dataclass(frozen=True)
class DbConfig:
    """Database geometry: d0 x d1 records of record_bytes payload each."""

    d0: int
    d1: int
    record_bytes: int = 16384

    def __post_init__(self):
        if self.d0 < 1 or self.d1 < 1:
            raise InvalidArgument("database dimensions must be positive")
        if self.d1 & (self.d1 - 1):
            raise InvalidArgument("d1 must be a power of two (binary tournament)")
        if self.record_bytes < 1:
            raise InvalidArgument("record_bytes must be positive")

    @property
    def records(self) -> int:
        return self.d0 * self.d1

    def coords(self, flat_index: int) -> tuple[int, int]:
        if not 0 <= flat_index < self.records:
            raise InvalidArgument(f"record index {flat_index} out of range")
        return flat_index // self.d1, flat_index % self.d1


class EncodedDatabase:
    """d0 x d1 grid of NTT-domain plaintext polynomials in one physical layout.

    P-major storage is (d1, d0, p) with p = k*n flattened limb-major, which is
    exactly the (n, k, p) operand shape of the p-major GEMM engine; the
    transposed layout is (p, d1, d0).
    """

    def __init__(self, config: DbConfig, params: HeParams, data: np.ndarray, kind: LayoutKind):
        self.config = config
        self.params = params
        self.data = data
        self.layout = kind
        p = params.basis.k * params.n
        want = (config.d1, config.d0, p) if kind is LayoutKind.P_MAJOR else (p, config.d1, config.d0)
        if data.shape != want:
            raise InvalidArgument(f"database tensor shape {data.shape} != expected {want}")

    @property
    def raw_bytes(self) -> int:
        return self.config.records * self.config.record_bytes

    @property
    def encoded_bytes(self) -> int:
        return self.config.records * self.params.poly_bytes

    def poly(self, i: int, j: int) -> RnsPoly:
        basis = self.params.basis
        flat = self.data[j, i] if self.layout is LayoutKind.P_MAJOR else self.data[:, j, i]
        return RnsPoly(basis, flat.reshape(basis.k, basis.n).copy(), Domain.NTT)

    def to_layout(self, kind: LayoutKind) -> "EncodedDatabase":
        if kind is self.layout:
            return self
        data = layout.transpose_db_tensor(self.data, self.layout)
        return EncodedDatabase(self.config, self.params, data, kind)


def _bytes_to_plain(data: bytes, params: HeParams, config: DbConfig) -> np.ndarray:
    """Pack record bytes into base-P coefficients (P is byte-aligned)."""
    width = params.plain_bits // 8
    padded = data.ljust(config.record_bytes, b"\x00")
    words = np.frombuffer(padded.ljust(-(-len(padded) // width) * width, b"\x00"),
                          dtype=f"<u{width}").astype(np.uint64)
    out = np.zeros(params.n, dtype=np.uint64)
    out[: len(words)] = words
    return out


def _plain_to_bytes(m: np.ndarray, params: HeParams, config: DbConfig) -> bytes:
    width = params.plain_bits // 8
    return m.astype(f"<u{width}").tobytes()[: config.record_bytes]


def encode_database(
    records: list[bytes], config: DbConfig, params: HeParams,
    kind: LayoutKind = LayoutKind.P_MAJOR,
) -> EncodedDatabase:
    """Pack records base-P, center mod P, lift mod Q, and apply the NTT.

    Centering keeps plaintext coefficients in [-P/2, P/2), which halves the
    noise contributed by the row-selection plaintext multiplications without
    changing the mod-P payload.
    """
    if params.plain_bits % 8 or params.plain_bits > 32:
        raise InvalidArgument("plaintext modulus must be a byte-aligned power of two up to 2**32")
    if config.record_bytes * 8 > params.n * params.plain_bits:
        raise InvalidArgument("record does not fit one plaintext polynomial")
    if len(records) != config.records:
        raise InvalidArgument(f"expected {config.records} records, got {len(records)}")
    basis = params.basis
    p_half = params.plain_modulus // 2
    p_flat = basis.k * basis.n
    data = np.empty((config.d1, config.d0, p_flat), dtype=U64)
    chunk = max(1, (1 << 24) // max(p_flat, 1))  # bound transform batch memory
    for start in range(0, config.records, chunk):
        batch = []
        for r in range(start, min(start + chunk, config.records)):
            rec = records[r]
            if len(rec) > config.record_bytes:
                raise InvalidArgument(f"record {r} exceeds {config.record_bytes} bytes")
            m = _bytes_to_plain(rec, params, config).astype(np.int64)
            m -= (m >= p_half) * params.plain_modulus
            batch.append(ring.small_signed_to_poly(m, basis).limbs)
        ntts = ring.ntt_raw(np.stack(batch), basis)
        for off, r in enumerate(range(start, min(start + chunk, config.records))):
            i, j = config.coords(r)
            data[j, i] = ntts[off].reshape(p_flat)
    db = EncodedDatabase(config, params, data, LayoutKind.P_MAJOR)
    return db if kind is LayoutKind.P_MAJOR else db.to_layout(kind)


def decode_record_plain(m: np.ndarray, config: DbConfig, params: HeParams) -> bytes:
    """Inverse of the record packing (mod-P coefficients to payload bytes)."""
    return _plain_to_bytes(m, params, config)


# ---------------------------------------------------------------------------
# client-side types


@dataclass
class ClientKeys:
    """Query-independent material a client uploads once per session.

    ``sk_rgsw`` is only needed for onion-mode RGSW assembly; expansion-only
    uses may leave it unset.
    """

    evks: list[EvalKey]
    sk_rgsw: RgswCiphertext | None = None

    def __post_init__(self):
        self._by_kaut = {evk.k_aut: evk for evk in self.evks}
        self._raw_evk: dict[int, np.ndarray] = {}
        self._raw_rgsw: np.ndarray | None = None

    def evk_for(self, k_aut: int) -> EvalKey:
        evk = self._by_kaut.get(k_aut)
        if evk is None:
            raise InvalidState(f"no evaluation key for automorphism index {k_aut}")
        return evk

    def evk_raw(self, k_aut: int) -> np.ndarray:
        got = self._raw_evk.get(k_aut)
        if got is None:
            got = np.stack([ct.raw() for ct in self.evk_for(k_aut).ksk])
            self._raw_evk[k_aut] = got
        return got

    def sk_rgsw_raw(self) -> np.ndarray:
        if self.sk_rgsw is None:
            raise InvalidState("this key set has no RGSW of the secret (onion mode needs one)")
        if self._raw_rgsw is None:
            self._raw_rgsw = self.sk_rgsw.raw()
        return self._raw_rgsw


@dataclass
class ClientQuery:
    """A single ciphertext packing both indices, plus routing metadata."""

    ct: BfvCiphertext
    client_id: int = 0
    seq: int = 0


@dataclass
class ExpandedQuery:
    row_cts: list[BfvCiphertext]
    col_cts: list[BfvCiphertext]

    @property
    def total(self) -> int:
        return len(self.row_cts) + len(self.col_cts)


@dataclass
class QueryBatch:
    queries: list[ClientQuery]
    max_size: int = 32

    def __post_init__(self):
        if not 1 <= len(self.queries) <= self.max_size:
            raise InvalidArgument(
                f"batch size {len(self.queries)} outside [1, {self.max_size}]"
            )


@dataclass
class Response:
    ct: BfvCiphertext
    client_id: int = 0
    seq: int = 0


def expansion_stage_count(config: DbConfig, params: HeParams) -> int:
    return planner.num_expand_stages(
        planner.expansion_leaves(config.d0, config.d1, params.gadget.ell)
    )


def client_keygen(params: HeParams, config: DbConfig, rng: np.random.Generator) -> tuple[SecretKey, ClientKeys]:
    """Secret key plus the uploadable session material (evks and RGSW(s))."""
    sk, evks = he.keygen(params, rng, num_stages=max(expansion_stage_count(config, params), 0))
    return sk, ClientKeys(evks, he.gen_secret_rgsw(sk, rng))


def client_gen_query(
    sk: SecretKey, i_star: int, j_star: int, config: DbConfig,
    rng: np.random.Generator, client_id: int = 0, seq: int = 0,
) -> ClientQuery:
    """Pack (i*, j*) into one ciphertext, pre-divided by the expansion factor."""
    params = sk.params
    if not 0 <= i_star < config.d0:
        raise InvalidArgument(f"row index {i_star} out of range [0, {config.d0})")
    if not 0 <= j_star < config.d1:
        raise InvalidArgument(f"column index {j_star} out of range [0, {config.d1})")
    ell = params.gadget.ell
    total = planner.expansion_leaves(config.d0, config.d1, ell)
    if total > params.n:
        raise InvalidArgument(f"expansion needs {total} slots but the ring has {params.n}")
    stages = planner.num_expand_stages(total)
    basis = params.basis

    payload = np.zeros((basis.k, basis.n), dtype=U64)
    for limb, mod in enumerate(basis.moduli):
        inv = pow(pow(2, stages, mod.q), mod.q - 2, mod.q)
        payload[limb, i_star] = params.delta % mod.q * inv % mod.q
        for bit in range(config.d1.bit_length() - 1):
            if (j_star >> bit) & 1:
                for dig in range(ell):
                    slot = config.d0 + bit * ell + dig
                    payload[limb, slot] = (
                        pow(params.gadget.z, dig, mod.q) * inv % mod.q
                    )
    ct = he.encrypt_phase_ntt(sk, ring.ntt_raw(payload, basis), rng)
    return ClientQuery(ct, client_id, seq)


# ---------------------------------------------------------------------------
# phase 1: expansion


def _stack_queries(queries: list[ClientQuery]) -> np.ndarray:
    return np.stack([q.ct.raw() for q in queries])[:, None]  # (B, 1, 2, k, n)


def _stage_mode(plan: ExecutionPlan | None, phase: Phase, stage: int,
                override: ExecMode | None) -> ExecMode:
    if override is not None:
        return override
    if plan is not None:
        return plan.mode_for(phase, stage)
    return ExecMode.OPERATION_LEVEL


@dataclass
class StageTiming:
    phase: str
    stage: int
    nodes: int
    mode: str
    working_set: int
    seconds: float
    peak_transient_bytes: int


@dataclass
class ServeStats:
    phase_seconds: dict[str, float] = field(default_factory=dict)
    stages: list[StageTiming] = field(default_factory=list)
    arena_total_bytes: int = 0

    def add_phase(self, name: str, seconds: float) -> None:
        self.phase_seconds[name] = self.phase_seconds.get(name, 0.0) + seconds


def expand_query_batch(
    queries: list[ClientQuery],
    keys: list[ClientKeys],
    config: DbConfig,
    params: HeParams,
    plan: ExecutionPlan | None = None,
    mode: ExecMode | None = None,
    stats: ServeStats | None = None,
) -> list[ExpandedQuery]:
    """Run the binary expansion tree for a batch, stage by stage.

    Stage t applies Subs with automorphism index n/2**t + 1; each node yields
    (c + Subs(c)) and X^(-2**t) * (c - Subs(c)).  The working list is truncated
    to the leaf count so no dead subtrees are processed.
    """
    if not queries:
        return []
    basis = params.basis
    ell = params.gadget.ell
    total = planner.expansion_leaves(config.d0, config.d1, ell)
    stages = planner.num_expand_stages(total)
    state = _stack_queries(queries)
    for t in range(stages):
        k_aut = params.n // (1 << t) + 1
        ksks = np.stack([k.evk_raw(k_aut) for k in keys])
        mono = ring.monomial_ntt(basis, -(1 << t))
        m = _stage_mode(plan, Phase.EXPAND_QUERY, t, mode)
        arena = Arena()
        t0 = time.perf_counter()
        state = planner.expand_stage(state, ksks, k_aut, mono, basis, params.gadget, m, arena)
        dt = time.perf_counter() - t0
        if state.shape[1] > total:
            state = state[:, :total]
        if stats is not None:
            stats.add_phase(Phase.EXPAND_QUERY.value, dt)
            stats.stages.append(StageTiming(
                Phase.EXPAND_QUERY.value, t, planner.expand_nodes(total, t), m.value,
                planner.working_set(Phase.EXPAND_QUERY, t, len(queries), params, config),
                dt, arena.peak_bytes,
            ))
            stats.arena_total_bytes += arena.total_bytes
    out = []
    for b in range(len(queries)):
        cts = [ct_from_raw(state[b, c], basis) for c in range(total)]
        out.append(ExpandedQuery(cts[: config.d0], cts[config.d0:]))
    return out


def expand_query(
    query: ClientQuery, evks: ClientKeys | list[EvalKey], config: DbConfig,
    params: HeParams, plan: ExecutionPlan | None = None, mode: ExecMode | None = None,
) -> ExpandedQuery:
    """Single-query expansion; see :func:`expand_query_batch`."""
    keys = ClientKeys(evks) if isinstance(evks, list) else evks
    return expand_query_batch([query], [keys], config, params, plan, mode)[0]


# ---------------------------------------------------------------------------
# RGSW assembly


def build_rgsw_from_expanded(
    col_cts: list[BfvCiphertext], keys: ClientKeys, params: HeParams,
) -> list[RgswCiphertext]:
    """Assemble one RGSW per column bit from the expanded payload ciphertexts.

    The expanded ciphertexts encrypt bit * z^i in the phase slot, which is
    exactly the b-digit column; the a-digit column needs encryptions of
    bit * z^i * s and is synthesized with an external product against the
    client's RGSW(s).
    """
    ell = params.gadget.ell
    if not col_cts:
        return []  # single-column database: nothing to select
    if len(col_cts) % ell:
        raise InvalidArgument("column ciphertexts must come in groups of ell per bit")
    basis = params.basis
    stack = np.stack([ct.raw() for ct in col_cts])[None]  # (1, M, 2, k, n)
    rgsw_rows = keys.sk_rgsw_raw()[None]
    a_rows = planner.external_product_batch(
        stack, rgsw_rows, basis, params.gadget, ExecMode.OPERATION_LEVEL
    )[0]
    out = []
    for bit in range(len(col_cts) // ell):
        rows = [ct_from_raw(a_rows[bit * ell + i], basis) for i in range(ell)]
        rows += [col_cts[bit * ell + i] for i in range(ell)]
        out.append(RgswCiphertext(tuple(rows), params.gadget))
    return out


def client_gen_rgsws(
    sk: SecretKey, j_star: int, config: DbConfig, rng: np.random.Generator,
) -> list[RgswCiphertext]:
    """Reference mode: the client encrypts the column-bit RGSWs directly."""
    return [
        he.gen_rgsw(sk, (j_star >> bit) & 1, rng)
        for bit in range(config.d1.bit_length() - 1)
    ]


# ---------------------------------------------------------------------------
# phase 2: row selection


def _expanded_to_in0(expanded: list[ExpandedQuery], params: HeParams) -> np.ndarray:
    """Stack row ciphertexts as the p-major GEMM operand (2*B, d0, p).

    The m axis is query-major: m = 2*b + component.
    """
    basis = params.basis
    b = len(expanded)
    d0 = len(expanded[0].row_cts)
    stack = np.empty((b, d0, 2, basis.k, basis.n), dtype=U64)
    for bi, ex in enumerate(expanded):
        for ki, ct in enumerate(ex.row_cts):
            stack[bi, ki, 0] = ct.a.limbs
            stack[bi, ki, 1] = ct.b.limbs
    return np.ascontiguousarray(
        stack.transpose(0, 2, 1, 3, 4).reshape(2 * b, d0, basis.k * basis.n)
    )


def _q_per_p(params: HeParams) -> np.ndarray:
    return np.repeat(params.basis.q_arr, params.n)


def row_select_raw(
    in0_pm: np.ndarray,
    db: EncodedDatabase,
    params: HeParams,
    engine: str = "auto",
    tile: TileConfig | None = None,
    pipeline: PipelineConfig | None = None,
    scratch_budget: int = layout.DEFAULT_SCRATCH_BYTES,
) -> tuple[np.ndarray, layout.PipelineTrace | None]:
    """Dispatch the batched GEMMs; returns the p-major output (m, n, p)."""
    m, d0, p = in0_pm.shape
    if d0 != db.config.d0:
        raise InvalidArgument(f"expanded row count {d0} != database d0 {db.config.d0}")
    q = _q_per_p(params)
    trace = None
    if engine == "auto":
        if pipeline is not None:
            engine = "pipeline"
        else:
            engine = "pmajor" if db.layout is LayoutKind.P_MAJOR else "transposed"
    if engine == "naive":
        pm = db.to_layout(LayoutKind.P_MAJOR)
        out_logical = layout.gemm_naive(
            in0_pm.transpose(2, 0, 1), pm.data.transpose(2, 1, 0), q
        )
        out = np.ascontiguousarray(out_logical.transpose(1, 2, 0))
    elif engine == "pmajor":
        pm = db.to_layout(LayoutKind.P_MAJOR)
        eff = tile or layout.auto_tile(m, db.config.d1, d0, p, scratch_budget, pmajor=True)
        out = layout.gemm_pmajor_tiled(in0_pm, pm.data, q, eff, scratch_budget)
    elif engine == "transposed":
        tr = db.to_layout(LayoutKind.TRANSPOSED)
        eff = tile or layout.auto_tile(m, db.config.d1, d0, scratch_budget=scratch_budget)
        a_t = layout.transpose_ct_tensor(in0_pm, LayoutKind.P_MAJOR)
        out_t = layout.gemm_transposed_tiled(a_t, tr.data, q, eff, scratch_budget)
        out = layout.transpose_out_tensor(out_t, LayoutKind.TRANSPOSED)
    elif engine == "pipeline":
        tr = db.to_layout(LayoutKind.TRANSPOSED)
        out, trace = layout.pipeline_rowsel(
            in0_pm, tr.data, q, params.basis.k, pipeline or PipelineConfig(),
            tile, scratch_budget,
        )
    else:
        raise InvalidArgument(f"unknown row-selection engine {engine!r}")
    return out, trace


def _out_to_stack(out_pm: np.ndarray, params: HeParams) -> np.ndarray:
    """(2*B, d1, p) p-major output back to a (B, d1, 2, k, n) ciphertext stack."""
    basis = params.basis
    m, d1, p = out_pm.shape
    b = m // 2
    arr = out_pm.reshape(b, 2, d1, basis.k, basis.n)
    return np.ascontiguousarray(arr.transpose(0, 2, 1, 3, 4))


def row_select(
    expanded: list[ExpandedQuery] | ExpandedQuery,
    db: EncodedDatabase,
    params: HeParams,
    engine: str = "auto",
    tile: TileConfig | None = None,
    pipeline: PipelineConfig | None = None,
) -> list[list[BfvCiphertext]]:
    """Batched encrypted row selection: per query, d1 ciphertexts of DB row i*."""
    batch = [expanded] if isinstance(expanded, ExpandedQuery) else expanded
    in0 = _expanded_to_in0(batch, params)
    out, _ = row_select_raw(in0, db, params, engine, tile, pipeline)
    stack = _out_to_stack(out, params)
    basis = params.basis
    return [
        [ct_from_raw(stack[b, j], basis) for j in range(db.config.d1)]
        for b in range(len(batch))
    ]


def row_select_plaintext(one_hot: np.ndarray, db: EncodedDatabase) -> np.ndarray:
    """Plaintext oracle: select rows with indicator vectors instead of ciphertexts.

    ``one_hot`` is (B, d0); the result (B, d1, p) must equal the database rows.
    """
    pm = db.to_layout(LayoutKind.P_MAJOR)
    q = np.repeat(pm.params.basis.q_arr, pm.params.n)
    b, d0 = one_hot.shape
    p = pm.data.shape[2]
    in0 = np.broadcast_to(one_hot.astype(U64).T[None], (p, d0, b)).transpose(0, 2, 1)
    out = layout.gemm_naive(np.ascontiguousarray(in0), pm.data.transpose(2, 1, 0), q)
    return np.ascontiguousarray(out.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# phase 3: column tournament


def col_tournament_batch(
    row_selected: np.ndarray,
    rgsws: list[list[RgswCiphertext]],
    params: HeParams,
    plan: ExecutionPlan | None = None,
    mode: ExecMode | None = None,
    stats: ServeStats | None = None,
) -> np.ndarray:
    """log2(d1) selection stages over a (B, d1, 2, k, n) stack, LSB bit first."""
    basis = params.basis
    state = row_selected
    batch = state.shape[0]
    d1 = state.shape[1]
    if d1 & (d1 - 1):
        raise InvalidArgument("tournament needs a power-of-two ciphertext count")
    stages = planner.num_coltor_stages(d1)
    for j in range(stages):
        rgsw_stack = np.stack([per_query[j].raw() for per_query in rgsws])
        m = _stage_mode(plan, Phase.COL_TOR, j, mode)
        arena = Arena()
        t0 = time.perf_counter()
        state = planner.coltor_stage(state, rgsw_stack, basis, params.gadget, m, arena)
        dt = time.perf_counter() - t0
        if stats is not None:
            stats.add_phase(Phase.COL_TOR.value, dt)
            nodes = d1 >> (j + 1)
            ws = nodes * params.gadget.ell * 2 * params.poly_bytes * batch
            stats.stages.append(StageTiming(
                Phase.COL_TOR.value, j, nodes, m.value, ws, dt, arena.peak_bytes,
            ))
            stats.arena_total_bytes += arena.total_bytes
    return state[:, 0]


def col_tournament(
    row_selected: list[BfvCiphertext],
    rgsws: list[RgswCiphertext],
    params: HeParams,
    plan: ExecutionPlan | None = None,
    mode: ExecMode | None = None,
) -> BfvCiphertext:
    """Single-query tournament; with d1 = 1 this is the identity."""
    d1 = len(row_selected)
    if d1 & (d1 - 1):
        raise InvalidArgument("tournament needs a power-of-two ciphertext count")
    if len(rgsws) != planner.num_coltor_stages(d1):
        raise InvalidArgument(f"need {planner.num_coltor_stages(d1)} RGSWs for d1={d1}")
    if d1 == 1:
        return row_selected[0]
    state = np.stack([ct.raw() for ct in row_selected])[None]
    out = col_tournament_batch(state, [rgsws], params, plan, mode)
    return ct_from_raw(out[0], params.basis)


# ---------------------------------------------------------------------------
# client decode and the full pipeline


def client_decode_response(sk: SecretKey, response: Response, config: DbConfig) -> bytes:
    m = he.decrypt(sk, response.ct)
    return _plain_to_bytes(m, sk.params, config)


@dataclass
class ClientSession:
    """Client-side state: secret key, uploadable keys, and query numbering."""

    params: HeParams
    config: DbConfig
    sk: SecretKey
    keys: ClientKeys
    client_id: int = 0
    _seq: int = 0

    @classmethod
    def create(
        cls, params: HeParams, config: DbConfig, rng: np.random.Generator, client_id: int = 0
    ) -> "ClientSession":
        sk, keys = client_keygen(params, config, rng)
        return cls(params, config, sk, keys, client_id)

    def gen_query(self, i_star: int, j_star: int, rng: np.random.Generator) -> ClientQuery:
        q = client_gen_query(self.sk, i_star, j_star, self.config, rng, self.client_id, self._seq)
        self._seq += 1
        return q

    def gen_query_flat(self, index: int, rng: np.random.Generator) -> ClientQuery:
        return self.gen_query(*self.config.coords(index), rng)

    def decode(self, response: Response) -> bytes:
        return client_decode_response(self.sk, response, self.config)


def answer_batch(
    queries: list[ClientQuery],
    keys_by_client: dict[int, ClientKeys],
    db: EncodedDatabase,
    params: HeParams,
    hw: HardwareModel | None = None,
    plan: ExecutionPlan | None = None,
    mode: ExecMode | None = None,
    engine: str = "auto",
    tile: TileConfig | None = None,
    pipeline: PipelineConfig | None = None,
    stats: ServeStats | None = None,
) -> list[Response]:
    """Serve a batch end to end: expand, assemble RGSWs, select rows, run the
    tournament.  Every query is processed with its own client's key material;
    results are independent of batch composition."""
    if not queries:
        return []
    config = db.config
    try:
        keys = [keys_by_client[q.client_id] for q in queries]
    except KeyError as exc:
        raise InvalidState(f"no uploaded keys for client {exc.args[0]}") from None
    if plan is None and mode is None:
        plan = planner.build_plan(config, params, len(queries), hw or HardwareModel())

    expanded = expand_query_batch(queries, keys, config, params, plan, mode, stats)

    t0 = time.perf_counter()
    rgsws = [
        build_rgsw_from_expanded(ex.col_cts, k, params) for ex, k in zip(expanded, keys)
    ]
    if stats is not None:
        stats.add_phase("RgswAssembly", time.perf_counter() - t0)

    t0 = time.perf_counter()
    in0 = _expanded_to_in0(expanded, params)
    out_pm, _ = row_select_raw(in0, db, params, engine, tile, pipeline)
    selected = _out_to_stack(out_pm, params)
    if stats is not None:
        stats.add_phase(Phase.ROW_SEL.value, time.perf_counter() - t0)

    final = col_tournament_batch(selected, rgsws, params, plan, mode, stats)
    basis = params.basis
    return [
        Response(ct_from_raw(final[b], basis), q.client_id, q.seq)
        for b, q in enumerate(queries)
    ]


def respond(
    query: ClientQuery, keys: ClientKeys, db: EncodedDatabase, params: HeParams, **kwargs
) -> Response:
    return answer_batch([query], {query.client_id: keys}, db, params, **kwargs)[0]
