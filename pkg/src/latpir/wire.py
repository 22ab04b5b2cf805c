"""Bit-exact binary serialization: message framing, value codecs, DB container.

Every message starts with a fixed header:

    magic "GPIR" | version u16 | kind u8 | payload length u64   (little-endian)

Value payloads echo the ring geometry (n u32, k u8, domain u8) before limb
data, which is written as little-endian 32-bit words, limb-major then
coefficient order.  Deserialization validates the echo against the supplied
basis, so a payload can never silently re-interpret under wrong parameters.

The database container uses the same conventions under the magic "GPDB" and
embeds its RNS primes, making the file self-describing and portable.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ParseError
from .he import BfvCiphertext, EvalKey, GadgetConfig, HeParams, RgswCiphertext
from .layout import LayoutKind
from .protocol import ClientKeys, ClientQuery, DbConfig, EncodedDatabase, Response
from .ring import Domain, Modulus, RnsBasis, RnsPoly, U64, find_two_n_root

MAGIC = b"GPIR"
DB_MAGIC = b"GPDB"
VERSION = 1

_HEADER = struct.Struct("<4sHBQ")
HEADER_BYTES = _HEADER.size  # 15

KIND_PARAMS = 1
KIND_QUERY = 2
KIND_EVKSET = 3
KIND_RESPONSE = 4
KIND_ERROR = 5
KIND_POLY = 16
KIND_CT = 17
KIND_RGSW = 18
KIND_EVK = 19

_POLY_ECHO = struct.Struct("<IBB")  # n, k, domain

# Fixed per-value overhead on top of raw limb words: header + geometry echo.
CT_OVERHEAD = HEADER_BYTES + _POLY_ECHO.size


def serialized_ct_bytes(params: HeParams) -> int:
    """Exact wire size of one ciphertext message at the given parameters."""
    return CT_OVERHEAD + 2 * params.basis.k * params.n * 4


def _frame(kind: int, payload: bytes) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, kind, len(payload)) + payload


def parse_header(buf: bytes) -> tuple[int, int]:
    """Validate a header; returns (kind, payload length)."""
    if len(buf) < HEADER_BYTES:
        raise ParseError("truncated header", len(buf))
    magic, version, kind, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    return kind, length


def split_message(buf: bytes) -> tuple[int, bytes]:
    """Header check plus exact-length payload extraction."""
    kind, length = parse_header(buf)
    if len(buf) != HEADER_BYTES + length:
        raise ParseError(
            f"payload length mismatch: header says {length}, got {len(buf) - HEADER_BYTES}",
            HEADER_BYTES,
        )
    return kind, buf[HEADER_BYTES:]


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.off = offset

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.buf):
            raise ParseError("truncated payload", self.off)
        out = self.buf[self.off:self.off + count]
        self.off += count
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def done(self) -> None:
        if self.off != len(self.buf):
            raise ParseError("trailing bytes after value", self.off)


# -- polynomial ---------------------------------------------------------------


def _poly_body(p: RnsPoly) -> bytes:
    echo = _POLY_ECHO.pack(p.basis.n, p.basis.k, 1 if p.domain is Domain.NTT else 0)
    return echo + p.limbs.astype("<u4").tobytes()


def _read_poly(r: _Reader, basis: RnsBasis) -> RnsPoly:
    n, k, dom = r.unpack(_POLY_ECHO)
    if n != basis.n or k != basis.k:
        raise ParseError(f"geometry echo ({n}, {k}) does not match basis "
                         f"({basis.n}, {basis.k})", r.off - _POLY_ECHO.size)
    if dom not in (0, 1):
        raise ParseError(f"bad domain flag {dom}", r.off - 1)
    raw = r.take(k * n * 4)
    limbs = np.frombuffer(raw, dtype="<u4").reshape(k, n).astype(U64)
    return RnsPoly(basis, limbs, Domain.NTT if dom else Domain.COEFF)


def serialize_poly(p: RnsPoly) -> bytes:
    return _frame(KIND_POLY, _poly_body(p))


def deserialize_poly(buf: bytes, basis: RnsBasis) -> RnsPoly:
    kind, payload = split_message(buf)
    if kind != KIND_POLY:
        raise ParseError(f"expected poly message, got kind {kind}", 6)
    r = _Reader(payload)
    p = _read_poly(r, basis)
    r.done()
    return p


# -- ciphertext ---------------------------------------------------------------


def _ct_body(ct: BfvCiphertext) -> bytes:
    echo = _POLY_ECHO.pack(ct.basis.n, ct.basis.k, 1 if ct.domain is Domain.NTT else 0)
    return echo + ct.a.limbs.astype("<u4").tobytes() + ct.b.limbs.astype("<u4").tobytes()


def _read_ct(r: _Reader, basis: RnsBasis) -> BfvCiphertext:
    n, k, dom = r.unpack(_POLY_ECHO)
    if n != basis.n or k != basis.k:
        raise ParseError(f"geometry echo ({n}, {k}) does not match basis "
                         f"({basis.n}, {basis.k})", r.off - _POLY_ECHO.size)
    dom_flag = Domain.NTT if dom else Domain.COEFF
    limbs = []
    for _ in range(2):
        raw = r.take(k * n * 4)
        limbs.append(np.frombuffer(raw, dtype="<u4").reshape(k, n).astype(U64))
    return BfvCiphertext(RnsPoly(basis, limbs[0], dom_flag), RnsPoly(basis, limbs[1], dom_flag))


def serialize_ct(ct: BfvCiphertext) -> bytes:
    return _frame(KIND_CT, _ct_body(ct))


def deserialize_ct(buf: bytes, basis: RnsBasis) -> BfvCiphertext:
    kind, payload = split_message(buf)
    if kind != KIND_CT:
        raise ParseError(f"expected ciphertext message, got kind {kind}", 6)
    r = _Reader(payload)
    ct = _read_ct(r, basis)
    r.done()
    return ct


# -- RGSW and evaluation keys --------------------------------------------------

_GADGET = struct.Struct("<BH")  # z_bits, ell


def _rgsw_body(rgsw: RgswCiphertext) -> bytes:
    parts = [_GADGET.pack(rgsw.gadget.z_bits, rgsw.gadget.ell)]
    parts += [_ct_body(row) for row in rgsw.rows]
    return b"".join(parts)


def _read_rgsw(r: _Reader, basis: RnsBasis) -> RgswCiphertext:
    z_bits, ell = r.unpack(_GADGET)
    gadget = GadgetConfig(z_bits, ell)
    rows = tuple(_read_ct(r, basis) for _ in range(2 * ell))
    return RgswCiphertext(rows, gadget)


def serialize_rgsw(rgsw: RgswCiphertext) -> bytes:
    return _frame(KIND_RGSW, _rgsw_body(rgsw))


def deserialize_rgsw(buf: bytes, basis: RnsBasis) -> RgswCiphertext:
    kind, payload = split_message(buf)
    if kind != KIND_RGSW:
        raise ParseError(f"expected RGSW message, got kind {kind}", 6)
    r = _Reader(payload)
    rgsw = _read_rgsw(r, basis)
    r.done()
    return rgsw


_EVK_HEAD = struct.Struct("<IBH")  # k_aut, z_bits, ell


def _evk_body(evk: EvalKey) -> bytes:
    parts = [_EVK_HEAD.pack(evk.k_aut, evk.gadget.z_bits, evk.gadget.ell)]
    parts += [_ct_body(row) for row in evk.ksk]
    return b"".join(parts)


def _read_evk(r: _Reader, basis: RnsBasis) -> EvalKey:
    k_aut, z_bits, ell = r.unpack(_EVK_HEAD)
    gadget = GadgetConfig(z_bits, ell)
    rows = tuple(_read_ct(r, basis) for _ in range(ell))
    return EvalKey(k_aut, rows, gadget)


def serialize_evk(evk: EvalKey) -> bytes:
    return _frame(KIND_EVK, _evk_body(evk))


def deserialize_evk(buf: bytes, basis: RnsBasis) -> EvalKey:
    kind, payload = split_message(buf)
    if kind != KIND_EVK:
        raise ParseError(f"expected evaluation-key message, got kind {kind}", 6)
    r = _Reader(payload)
    evk = _read_evk(r, basis)
    r.done()
    return evk


# -- protocol messages ---------------------------------------------------------

_ROUTE = struct.Struct("<QI")  # client_id, seq


def serialize_query(q: ClientQuery) -> bytes:
    return _frame(KIND_QUERY, _ROUTE.pack(q.client_id, q.seq) + _ct_body(q.ct))


def deserialize_query(buf: bytes, basis: RnsBasis) -> ClientQuery:
    kind, payload = split_message(buf)
    if kind != KIND_QUERY:
        raise ParseError(f"expected query message, got kind {kind}", 6)
    r = _Reader(payload)
    client_id, seq = r.unpack(_ROUTE)
    ct = _read_ct(r, basis)
    r.done()
    return ClientQuery(ct, client_id, seq)


def serialize_response(resp: Response) -> bytes:
    return _frame(KIND_RESPONSE, _ROUTE.pack(resp.client_id, resp.seq) + _ct_body(resp.ct))


def deserialize_response(buf: bytes, basis: RnsBasis) -> Response:
    kind, payload = split_message(buf)
    if kind != KIND_RESPONSE:
        raise ParseError(f"expected response message, got kind {kind}", 6)
    r = _Reader(payload)
    client_id, seq = r.unpack(_ROUTE)
    ct = _read_ct(r, basis)
    r.done()
    return Response(ct, client_id, seq)


_EVKSET_HEAD = struct.Struct("<QHB")  # client_id, evk count, has sk_rgsw


def serialize_evkset(client_id: int, keys: ClientKeys) -> bytes:
    parts = [_EVKSET_HEAD.pack(client_id, len(keys.evks), 1 if keys.sk_rgsw else 0)]
    for evk in keys.evks:
        parts.append(_evk_body(evk))
    if keys.sk_rgsw is not None:
        parts.append(_rgsw_body(keys.sk_rgsw))
    return _frame(KIND_EVKSET, b"".join(parts))


def deserialize_evkset(buf: bytes, basis: RnsBasis) -> tuple[int, ClientKeys]:
    kind, payload = split_message(buf)
    if kind != KIND_EVKSET:
        raise ParseError(f"expected evkset message, got kind {kind}", 6)
    r = _Reader(payload)
    client_id, count, has_rgsw = r.unpack(_EVKSET_HEAD)
    evks = [_read_evk(r, basis) for _ in range(count)]
    sk_rgsw = _read_rgsw(r, basis) if has_rgsw else None
    r.done()
    return client_id, ClientKeys(evks, sk_rgsw)


_PARAMS_BODY = struct.Struct("<IBBBHHIII")  # n, k, plain_bits, z_bits, ell, err_bound, d0, d1, record_bytes


def serialize_params(params: HeParams, config: DbConfig) -> bytes:
    body = _PARAMS_BODY.pack(
        params.n, params.basis.k, params.plain_bits,
        params.gadget.z_bits, params.gadget.ell, params.error_bound,
        config.d0, config.d1, config.record_bytes,
    )
    qs = b"".join(struct.pack("<Q", m.q) for m in params.basis.moduli)
    return _frame(KIND_PARAMS, body + qs)


def deserialize_params(buf: bytes) -> tuple[HeParams, DbConfig]:
    kind, payload = split_message(buf)
    if kind != KIND_PARAMS:
        raise ParseError(f"expected params message, got kind {kind}", 6)
    r = _Reader(payload)
    n, k, plain_bits, z_bits, ell, err_bound, d0, d1, record_bytes = r.unpack(_PARAMS_BODY)
    moduli = []
    for _ in range(k):
        (q,) = struct.unpack("<Q", r.take(8))
        moduli.append(Modulus(q, find_two_n_root(q, 2 * n)))
    r.done()
    basis = RnsBasis(n, moduli)
    params = HeParams(basis, plain_bits, GadgetConfig(z_bits, ell), err_bound)
    return params, DbConfig(d0, d1, record_bytes)


def params_request() -> bytes:
    """Empty-payload params message: a client's request for the server profile."""
    return _frame(KIND_PARAMS, b"")


def serialize_error(code: int, message: str) -> bytes:
    return _frame(KIND_ERROR, struct.pack("<H", code) + message.encode())


def deserialize_error(buf: bytes) -> tuple[int, str]:
    kind, payload = split_message(buf)
    if kind != KIND_ERROR:
        raise ParseError(f"expected error message, got kind {kind}", 6)
    (code,) = struct.unpack_from("<H", payload)
    return code, payload[2:].decode(errors="replace")


# -- stream I/O ----------------------------------------------------------------


def write_message(sock_file: BinaryIO, data: bytes) -> None:
    sock_file.write(data)
    sock_file.flush()


def read_message(sock_file: BinaryIO, max_payload: int = 1 << 30) -> bytes | None:
    """Read one framed message; None on clean EOF."""
    head = sock_file.read(HEADER_BYTES)
    if not head:
        return None
    if len(head) < HEADER_BYTES:
        raise ParseError("truncated header", len(head))
    kind, length = parse_header(head)
    if length > max_payload:
        raise ParseError(f"payload of {length} bytes exceeds limit", 7)
    payload = sock_file.read(length)
    if len(payload) < length:
        raise ParseError("truncated payload", HEADER_BYTES + len(payload))
    return head + payload


# -- database container ---------------------------------------------------------

_DB_HEAD = struct.Struct("<4sHIIIIBBB")  # magic, version, d0, d1, record_bytes, n, k, plain_bits, layout


def save_database(path: str, db: EncodedDatabase) -> None:
    params = db.params
    cfg = db.config
    with open(path, "wb") as fh:
        fh.write(_DB_HEAD.pack(
            DB_MAGIC, VERSION, cfg.d0, cfg.d1, cfg.record_bytes,
            params.n, params.basis.k, params.plain_bits,
            0 if db.layout is LayoutKind.P_MAJOR else 1,
        ))
        for m in params.basis.moduli:
            fh.write(struct.pack("<Q", m.q))
        fh.write(db.data.astype("<u4").tobytes())


def load_database(path: str, params: HeParams | None = None) -> tuple[EncodedDatabase, HeParams]:
    """Load a DB image; validates primes against ``params`` or rebuilds a basis."""
    with open(path, "rb") as fh:
        head = fh.read(_DB_HEAD.size)
        if len(head) < _DB_HEAD.size:
            raise ParseError("truncated database header", len(head))
        magic, version, d0, d1, record_bytes, n, k, plain_bits, layout_flag = _DB_HEAD.unpack(head)
        if magic != DB_MAGIC:
            raise ParseError(f"bad database magic {magic!r}", 0)
        if version != VERSION:
            raise ParseError(f"unsupported database version {version}", 4)
        qs = [struct.unpack("<Q", fh.read(8))[0] for _ in range(k)]
        if params is not None:
            have = [m.q for m in params.basis.moduli]
            if params.n != n or have != qs or params.plain_bits != plain_bits:
                raise ParseError("database parameters do not match the supplied profile", _DB_HEAD.size)
        else:
            basis = RnsBasis(n, [Modulus(q, find_two_n_root(q, 2 * n)) for q in qs])
            params = HeParams(basis, plain_bits)
        cfg = DbConfig(d0, d1, record_bytes)
        kind = LayoutKind.P_MAJOR if layout_flag == 0 else LayoutKind.TRANSPOSED
        p = k * n
        shape = (d1, d0, p) if kind is LayoutKind.P_MAJOR else (p, d1, d0)
        count = d0 * d1 * p
        raw = fh.read(count * 4)
        if len(raw) < count * 4:
            raise ParseError("truncated database payload", _DB_HEAD.size + len(raw))
        data = np.frombuffer(raw, dtype="<u4").reshape(shape).astype(U64)
    return EncodedDatabase(cfg, params, data, kind), params
