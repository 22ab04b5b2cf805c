"""Physical layouts, tiled GEMM engines, and the transpose/GEMM pipeline.

Row selection is a batch of point-wise GEMMs over the p axis (one independent
GEMM per polynomial evaluation point):

    out[p, m, n] = sum_k in0[p, m, k] * in1[p, k, n]   (mod q(p))

where p ranges over limb-major (limb, coefficient) pairs, m over the
2*batch ciphertext polynomials, k over database rows, and n over columns.

Two physical layouts are supported:

* PMajor: the p axis is innermost (contiguous per polynomial), the layout
  NTT kernels want.  Ciphertext tensor (m, k, p), database (n, k, p),
  output (m, n, p).
* Transposed: p is outermost and the GEMM-relevant axis is innermost.
  Ciphertext tensor (p, k, m), database (p, n, k), output (p, m, n).

All engines compute exact modular arithmetic and are bit-identical; they
differ in traffic/scratch shape only.  The naive triple loop is the oracle.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from .errors import InvalidArgument, InvalidConfig
from .ring import U64

DEFAULT_SCRATCH_BYTES = 96 * 1024


class LayoutKind(Enum):
    P_MAJOR = "pmajor"
    TRANSPOSED = "transposed"


@dataclass(frozen=True)
class TensorLayout:
    """Declares how a logical [p, rows, cols] tensor is laid out physically.

    ``strides`` are element strides for the logical axes; the invariant is
    that PMajor keeps p contiguous (stride 1) and Transposed keeps the last
    logical axis contiguous.
    """

    kind: LayoutKind
    p: int
    rows: int
    cols: int

    @property
    def strides(self) -> tuple[int, int, int]:
        if self.kind is LayoutKind.P_MAJOR:
            # physical (rows, cols, p)
            return (1, self.cols * self.p, self.p)
        # physical (p, rows, cols)
        return (self.rows * self.cols, self.cols, 1)


@dataclass(frozen=True)
class TileConfig:
    """Thread-block tile extents; ``bp`` is only used by the p-major engine."""

    bm: int
    bn: int
    bk: int
    bp: int | None = None

    def scratch_bytes(self) -> int:
        """Staging capacity for one work unit: (bm*bk + bn*bk) words per p lane."""
        return (self.bm * self.bk + self.bn * self.bk) * (self.bp or 1) * 4

    def accumulator_bytes(self) -> int:
        return self.bm * self.bn * (self.bp or 1) * 4

    def traffic_per_output(self) -> Fraction:
        """Modeled global reads per output element (up to the shared k factor)."""
        return Fraction(1, self.bm) + Fraction(1, self.bn)

    def validate(self, m: int, n: int, k: int, p: int | None = None,
                 scratch_budget: int = DEFAULT_SCRATCH_BYTES) -> None:
        for extent, dim, name in ((self.bm, m, "bm"), (self.bn, n, "bn"), (self.bk, k, "bk")):
            if extent < 1 or dim % extent:
                raise InvalidConfig(f"tile {name}={extent} does not divide problem dim {dim}")
        if self.bp is not None:
            if p is None or self.bp < 1 or p % self.bp:
                raise InvalidConfig(f"tile bp={self.bp} does not divide p={p}")
        if self.scratch_bytes() > scratch_budget:
            raise InvalidConfig(
                f"tile scratch {self.scratch_bytes()} B exceeds budget {scratch_budget} B"
            )


BASELINE_PMAJOR_TILE = TileConfig(16, 16, 8, bp=32)
TRANSPOSED_TILE = TileConfig(64, 64, 32)


@dataclass(frozen=True)
class RatioReport:
    scratch_ratio: Fraction
    accumulator_ratio: Fraction
    traffic_ratio: Fraction


def scratch_footprint(tile: TileConfig) -> int:
    return tile.scratch_bytes()


def traffic_ratio(tile_a: TileConfig, tile_b: TileConfig) -> RatioReport:
    """Resource ratios of tile_a relative to tile_b (scratch, accumulator, traffic)."""
    return RatioReport(
        Fraction(tile_a.scratch_bytes(), tile_b.scratch_bytes()),
        Fraction(tile_a.accumulator_bytes(), tile_b.accumulator_bytes()),
        tile_a.traffic_per_output() / tile_b.traffic_per_output(),
    )


def auto_tile(m: int, n: int, k: int, p: int | None = None,
              scratch_budget: int = DEFAULT_SCRATCH_BYTES, pmajor: bool = False) -> TileConfig:
    """Largest power-of-two tile that divides the problem and fits the budget."""

    def pow2_div(dim: int, cap: int) -> int:
        t = 1
        while t * 2 <= cap and dim % (t * 2) == 0:
            t *= 2
        return t

    bm, bn, bk = pow2_div(m, 64), pow2_div(n, 64), pow2_div(k, 32)
    bp = pow2_div(p, 32) if pmajor and p is not None else None
    tile = TileConfig(bm, bn, bk, bp)
    while tile.scratch_bytes() > scratch_budget:
        if tile.bp is not None and tile.bp > 1:
            tile = TileConfig(tile.bm, tile.bn, tile.bk, tile.bp // 2)
        elif tile.bm >= tile.bn and tile.bm > 1:
            tile = TileConfig(tile.bm // 2, tile.bn, tile.bk, tile.bp)
        elif tile.bn > 1:
            tile = TileConfig(tile.bm, tile.bn // 2, tile.bk, tile.bp)
        elif tile.bk > 1:
            tile = TileConfig(tile.bm, tile.bn, tile.bk // 2, tile.bp)
        else:
            break
    return tile


# ---------------------------------------------------------------------------
# transposition


def transpose_ct_tensor(src: np.ndarray, src_kind: LayoutKind) -> np.ndarray:
    """Flip a ciphertext tensor between (m, k, p) and (p, k, m); pure permutation."""
    if src.ndim != 3:
        raise InvalidArgument(f"expected a rank-3 tensor, got shape {src.shape}")
    return np.ascontiguousarray(src.transpose(2, 1, 0))


def transpose_db_tensor(src: np.ndarray, src_kind: LayoutKind) -> np.ndarray:
    """Flip a database tensor between (n, k, p) and (p, n, k)."""
    if src.ndim != 3:
        raise InvalidArgument(f"expected a rank-3 tensor, got shape {src.shape}")
    if src_kind is LayoutKind.P_MAJOR:
        return np.ascontiguousarray(src.transpose(2, 0, 1))
    return np.ascontiguousarray(src.transpose(1, 2, 0))


def transpose_out_tensor(src: np.ndarray, src_kind: LayoutKind) -> np.ndarray:
    """Flip an output tensor between (m, n, p) and (p, m, n)."""
    if src.ndim != 3:
        raise InvalidArgument(f"expected a rank-3 tensor, got shape {src.shape}")
    if src_kind is LayoutKind.P_MAJOR:
        return np.ascontiguousarray(src.transpose(2, 0, 1))
    return np.ascontiguousarray(src.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# GEMM engines


def _k_chunk(q_per_p: np.ndarray) -> int:
    qmax = int(q_per_p.max())
    return max(1, (2**64 - 1) // ((qmax - 1) ** 2))


def gemm_naive(in0: np.ndarray, in1: np.ndarray, q_per_p: np.ndarray) -> np.ndarray:
    """Reference triple loop over (m, n, k); exact modular result of shape (p, m, n).

    Inputs are logical: in0[p, m, k] and in1[p, k, n].  The oracle for both
    tiled engines.
    """
    p, m, kdim = in0.shape
    p2, kdim2, n = in1.shape
    if p2 != p or kdim2 != kdim:
        raise InvalidArgument(f"shape mismatch: {in0.shape} vs {in1.shape}")
    q = q_per_p.astype(U64)
    chunk = _k_chunk(q)
    out = np.zeros((p, m, n), dtype=U64)
    for mi in range(m):
        for ni in range(n):
            acc = np.zeros(p, dtype=U64)
            for k0 in range(0, kdim, chunk):
                k1 = min(k0 + chunk, kdim)
                part = np.zeros(p, dtype=U64)
                for ki in range(k0, k1):
                    part += in0[:, mi, ki] * in1[:, ki, ni] % q
                acc = (acc + part) % q
            out[:, mi, ni] = acc
    return out


def _acc_tile(a: np.ndarray, b: np.ndarray, q: np.ndarray, chunk: int, spec: str) -> np.ndarray:
    """Chunked einsum accumulation with periodic reduction; exact for any q < 2**31."""
    kdim = a.shape[1]  # reduction axis sits at position 1 for both layouts
    acc = None
    for k0 in range(0, kdim, chunk):
        if spec == "mkp,nkp->mnp":
            part = np.einsum("mkp,nkp->mnp", a[:, k0:k0 + chunk], b[:, k0:k0 + chunk]) % q
        else:  # "pkm,pnk->pmn"
            part = np.einsum("pkm,pnk->pmn", a[:, k0:k0 + chunk], b[:, :, k0:k0 + chunk]) % q
        acc = part if acc is None else (acc + part) % q
    return acc


def gemm_pmajor_tiled(
    a_pm: np.ndarray,
    b_pm: np.ndarray,
    q_per_p: np.ndarray,
    tile: TileConfig = BASELINE_PMAJOR_TILE,
    scratch_budget: int = DEFAULT_SCRATCH_BYTES,
) -> np.ndarray:
    """Tiled engine on p-major data: a (m, k, p), b (n, k, p) -> out (m, n, p).

    Each work unit covers bp parallel GEMMs to keep p-contiguous loads; tiles
    are staged into scratch copies and accumulated per bk step.
    """
    m, kdim, p = a_pm.shape
    n, kdim2, p2 = b_pm.shape
    if kdim2 != kdim or p2 != p:
        raise InvalidArgument(f"shape mismatch: {a_pm.shape} vs {b_pm.shape}")
    if tile.bp is None:
        raise InvalidConfig("p-major engine requires a bp tile extent")
    tile.validate(m, n, kdim, p, scratch_budget)
    q = q_per_p.astype(U64)
    chunk = _k_chunk(q)
    out = np.empty((m, n, p), dtype=U64)
    for p0 in range(0, p, tile.bp):
        psl = slice(p0, p0 + tile.bp)
        qp = q[None, None, psl]
        for m0 in range(0, m, tile.bm):
            for n0 in range(0, n, tile.bn):
                acc = np.zeros((tile.bm, tile.bn, tile.bp), dtype=U64)
                for k0 in range(0, kdim, tile.bk):
                    a_tile = np.ascontiguousarray(a_pm[m0:m0 + tile.bm, k0:k0 + tile.bk, psl])
                    b_tile = np.ascontiguousarray(b_pm[n0:n0 + tile.bn, k0:k0 + tile.bk, psl])
                    acc = (acc + _acc_tile(a_tile, b_tile, qp, chunk, "mkp,nkp->mnp")) % qp
                out[m0:m0 + tile.bm, n0:n0 + tile.bn, psl] = acc
    return out


def gemm_transposed_tiled(
    a_t: np.ndarray,
    b_t: np.ndarray,
    q_per_p: np.ndarray,
    tile: TileConfig = TRANSPOSED_TILE,
    scratch_budget: int = DEFAULT_SCRATCH_BYTES,
) -> np.ndarray:
    """Tiled engine on transposed data: a (p, k, m), b (p, n, k) -> out (p, m, n).

    Each p is an independent GEMM with contiguous k/m access; the p axis is
    fully vectorized per tile.
    """
    p, kdim, m = a_t.shape
    p2, n, kdim2 = b_t.shape
    if kdim2 != kdim or p2 != p:
        raise InvalidArgument(f"shape mismatch: {a_t.shape} vs {b_t.shape}")
    tile.validate(m, n, kdim, p, scratch_budget)
    q = q_per_p.astype(U64)
    chunk = _k_chunk(q)
    out = np.empty((p, m, n), dtype=U64)
    qp = q[:, None, None]
    for m0 in range(0, m, tile.bm):
        for n0 in range(0, n, tile.bn):
            acc = np.zeros((p, tile.bm, tile.bn), dtype=U64)
            for k0 in range(0, kdim, tile.bk):
                a_tile = np.ascontiguousarray(a_t[:, k0:k0 + tile.bk, m0:m0 + tile.bm])
                b_tile = np.ascontiguousarray(b_t[:, n0:n0 + tile.bn, k0:k0 + tile.bk])
                acc = (acc + _acc_tile(a_tile, b_tile, qp, chunk, "pkm,pnk->pmn")) % qp
            out[:, m0:m0 + tile.bm, n0:n0 + tile.bn] = acc
    return out


# ---------------------------------------------------------------------------
# pipelined row selection


@dataclass(frozen=True)
class PipelineConfig:
    """Lane/chunk decomposition of the p axis plus the worker pool size."""

    prime_streams: int = 4
    n_chunks: int = 8
    workers: int = 4


@dataclass(frozen=True)
class TraceRecord:
    kind: str  # transpose_in | gemm | transpose_out
    lane: int
    chunk: int
    start_ns: int
    end_ns: int


@dataclass
class PipelineTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def validate_dependencies(self) -> None:
        by_task: dict[tuple[int, int], dict[str, TraceRecord]] = {}
        for r in self.records:
            by_task.setdefault((r.lane, r.chunk), {})[r.kind] = r
        for (lane, chunk), kinds in by_task.items():
            ti, ge, to = kinds["transpose_in"], kinds["gemm"], kinds["transpose_out"]
            if not (ti.end_ns <= ge.start_ns <= ge.end_ns <= to.start_ns):
                raise InvalidArgument(f"dependency violation in task ({lane}, {chunk})")

    def has_overlap(self, kind_a: str = "transpose", kind_b: str = "gemm") -> bool:
        """True when some `kind_a` interval intersects some `kind_b` interval."""
        a_recs = [r for r in self.records if r.kind.startswith(kind_a)]
        b_recs = [r for r in self.records if r.kind.startswith(kind_b)]
        for ra in a_recs:
            for rb in b_recs:
                if ra.start_ns < rb.end_ns and rb.start_ns < ra.end_ns:
                    return True
        return False

    def to_text(self) -> str:
        lines = [f"{r.kind}\t{r.lane}\t{r.chunk}\t{r.start_ns}\t{r.end_ns}" for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def pipeline_rowsel(
    ct_pm: np.ndarray,
    db_t: np.ndarray,
    q_per_p: np.ndarray,
    limbs: int,
    pipeline: PipelineConfig,
    tile: TileConfig | None = None,
    scratch_budget: int = DEFAULT_SCRATCH_BYTES,
) -> tuple[np.ndarray, PipelineTrace]:
    """Row selection with per-(lane, chunk) transpose_in -> gemm -> transpose_out tasks.

    ``ct_pm`` is the p-major ciphertext tensor (m, k, p); ``db_t`` the
    pre-transposed database (p, n, k).  The p axis is cut into
    ``prime_streams`` limb groups x ``n_chunks`` coefficient chunks; tasks for
    different cuts run concurrently on the worker pool while each cut's three
    steps stay ordered.  Output is the p-major (m, n, p) tensor, bit-identical
    to the unpipelined engines.
    """
    m, kdim, p = ct_pm.shape
    if p % limbs:
        raise InvalidArgument(f"p={p} is not a multiple of the limb count {limbs}")
    n_per_limb = p // limbs
    if limbs % pipeline.prime_streams:
        raise InvalidConfig(
            f"prime_streams={pipeline.prime_streams} must divide the limb count {limbs}"
        )
    if n_per_limb % pipeline.n_chunks:
        raise InvalidConfig(f"n_chunks={pipeline.n_chunks} must divide n={n_per_limb}")
    n_cols = db_t.shape[1]
    lanes = pipeline.prime_streams
    limbs_per_lane = limbs // lanes
    chunk_len = n_per_limb // pipeline.n_chunks
    eff_tile = tile or auto_tile(m, n_cols, kdim, scratch_budget=scratch_budget)

    out = np.empty((m, n_cols, p), dtype=U64)
    trace = PipelineTrace()
    lock = threading.Lock()

    def record(kind: str, lane: int, chunk: int, t0: int, t1: int) -> None:
        with lock:
            trace.records.append(TraceRecord(kind, lane, chunk, t0, t1))

    def p_indices(lane: int, chunk: int) -> np.ndarray:
        parts = []
        for limb in range(lane * limbs_per_lane, (lane + 1) * limbs_per_lane):
            base = limb * n_per_limb + chunk * chunk_len
            parts.append(np.arange(base, base + chunk_len))
        return np.concatenate(parts)

    def run_task(lane: int, chunk: int) -> None:
        idx = p_indices(lane, chunk)
        t0 = time.monotonic_ns()
        ct_slice = np.ascontiguousarray(ct_pm[:, :, idx].transpose(2, 1, 0))
        record("transpose_in", lane, chunk, t0, time.monotonic_ns())

        t0 = time.monotonic_ns()
        res = gemm_transposed_tiled(ct_slice, db_t[idx], q_per_p[idx], eff_tile, scratch_budget)
        record("gemm", lane, chunk, t0, time.monotonic_ns())

        t0 = time.monotonic_ns()
        out[:, :, idx] = res.transpose(1, 2, 0)
        record("transpose_out", lane, chunk, t0, time.monotonic_ns())

    tasks = [(lane, chunk) for lane in range(lanes) for chunk in range(pipeline.n_chunks)]
    if pipeline.workers <= 1:
        for lane, chunk in tasks:
            run_task(lane, chunk)
    else:
        with ThreadPoolExecutor(max_workers=pipeline.workers) as pool:
            futures = [pool.submit(run_task, lane, chunk) for lane, chunk in tasks]
            for f in futures:
                f.result()
    return out, trace
